//! Exhaustive-enumeration ground truth.
//!
//! Nothing here shares code with the dynamic programs: chain energies and grid
//! energies are evaluated configuration by configuration. Labelings are visited
//! in lexicographic order with vertex 0 as the most significant digit, so ties
//! resolve to the lexicographically smallest labeling.

use rayon::prelude::*;

use crate::chain_dp::ChainSlice;
use crate::error::{Error, Result};
use crate::model::{Labeling, Potentials};
use crate::scalar::Scalar;

pub const MAP_STATE_LIMIT: u64 = 1 << 24;
pub const CHAIN_STATE_LIMIT: u64 = 1 << 20;

const BLOCK: u64 = 1 << 14;

fn state_count(labels: usize, vertices: usize, limit: u64) -> Result<u64> {
    let states = (labels as f64).powi(vertices as i32);
    if states > limit as f64 {
        return Err(Error::TooLarge { states, limit });
    }
    Ok((labels as u64).pow(vertices as u32))
}

fn decode_index(mut index: u64, labels: usize, out: &mut [usize]) {
    for x in out.iter_mut().rev() {
        *x = (index % labels as u64) as usize;
        index /= labels as u64;
    }
}

/// Advances `x` to the next labeling in lexicographic order.
fn increment(x: &mut [usize], labels: usize) {
    for v in x.iter_mut().rev() {
        *v += 1;
        if *v < labels {
            return;
        }
        *v = 0;
    }
}

/// The exact MAP labeling and its energy.
pub fn brute_force_map<T: Scalar>(p: &Potentials<T>) -> Result<(Labeling, T)> {
    let g = &p.grid;
    let l = g.num_labels;
    let nv = g.num_vertices();
    let total = state_count(l, nv, MAP_STATE_LIMIT)?;
    let edges: Vec<(usize, usize, &[T])> = g
        .edges()
        .iter()
        .enumerate()
        .map(|(e, edge)| (edge.source, edge.target, p.edge_table(e, edge.slot)))
        .collect();
    let score = |x: &[usize]| -> T {
        let mut s = T::zero();
        for (i, &xi) in x.iter().enumerate() {
            s += p.unary[i * l + xi];
        }
        for &(a, b, t) in &edges {
            s += t[x[a] * l + x[b]];
        }
        s
    };

    let blocks = total.div_ceil(BLOCK);
    let (best_index, best) = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let end = (start + BLOCK).min(total);
            let mut x = vec![0; nv];
            decode_index(start, l, &mut x);
            let mut best = (start, score(&x));
            for idx in start + 1..end {
                increment(&mut x, l);
                let s = score(&x);
                if s > best.1 {
                    best = (idx, s);
                }
            }
            best
        })
        .reduce_with(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        })
        .expect("at least one labeling");
    let mut x = vec![0; nv];
    decode_index(best_index, l, &mut x);
    Ok((Labeling::new(x), best))
}

fn chain_score<T: Scalar>(slice: &ChainSlice<'_, T>, x: &[usize]) -> T {
    let l = slice.num_labels;
    let mut s = T::zero();
    for (i, &xi) in x.iter().enumerate() {
        s += slice.unary[i * l + xi];
    }
    for (k, t) in slice.pairwise.iter().enumerate() {
        s += t[x[k] * l + x[k + 1]];
    }
    s
}

fn for_each_chain_config<T: Scalar>(
    slice: &ChainSlice<'_, T>,
    mut f: impl FnMut(&[usize], T),
) -> Result<()> {
    let n = slice.len();
    let l = slice.num_labels;
    let total = state_count(l, n, CHAIN_STATE_LIMIT)?;
    let mut x = vec![0; n];
    for idx in 0..total {
        if idx > 0 {
            increment(&mut x, l);
        }
        f(&x, chain_score(slice, &x));
    }
    Ok(())
}

/// `γ log Σ_x exp(E(x) / γ)` over every configuration of the chain.
pub fn brute_force_smoothed_energy<T: Scalar>(slice: &ChainSlice<'_, T>, gamma: T) -> Result<T> {
    let mut energies = Vec::new();
    for_each_chain_config(slice, |_, e| energies.push(e))?;
    let m = energies.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = energies.iter().map(|&e| ((e - m) / gamma).exp()).sum();
    Ok(m + gamma * s.ln())
}

/// `μ_i(l) = max { E(x) : x_i = l }` for every position and label.
pub fn brute_force_max_marginals<T: Scalar>(slice: &ChainSlice<'_, T>) -> Result<Vec<T>> {
    let l = slice.num_labels;
    let mut out = vec![T::neg_infinity(); slice.len() * l];
    for_each_chain_config(slice, |x, e| {
        for (i, &xi) in x.iter().enumerate() {
            let cell = &mut out[i * l + xi];
            if e > *cell {
                *cell = e;
            }
        }
    })?;
    Ok(out)
}

/// One-hot encoding `(x_i(l), x_ij(l, l'))` of a labeling, the ILP view.
pub fn one_hot<T: Scalar>(p: &Potentials<T>, x: &Labeling) -> (Vec<T>, Vec<T>) {
    let g = &p.grid;
    let l = g.num_labels;
    let mut xv = vec![T::zero(); g.num_vertices() * l];
    for (i, &xi) in x.labels.iter().enumerate() {
        xv[i * l + xi] = T::one();
    }
    let edges = g.edges();
    let mut xe = vec![T::zero(); edges.len() * l * l];
    for (e, edge) in edges.iter().enumerate() {
        xe[e * l * l + x.labels[edge.source] * l + x.labels[edge.target]] = T::one();
    }
    (xv, xe)
}

/// `Σ ψ_i · x_i + Σ φ_ij · x_ij` for one-hot (or fractional) vectors.
pub fn ilp_objective<T: Scalar>(p: &Potentials<T>, xv: &[T], xe: &[T]) -> T {
    let dense = p.to_dense();
    let a: T = dense.unary.iter().zip(xv).map(|(&w, &x)| w * x).sum();
    let b: T = dense.pairwise.data().iter().zip(xe).map(|(&w, &x)| w * x).sum();
    a + b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_random, random_labeling, Distribution};
    use crate::model::{energy, GridSpec, Pairwise};

    #[test]
    fn zero_potentials_pick_all_zero() {
        let p = Potentials::<f64>::zeros(GridSpec::new(2, 2, 2, &[1]), true);
        let (x, e) = brute_force_map(&p).unwrap();
        assert_eq!(x.labels, vec![0; 4]);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn two_node_map() {
        let mut p = Potentials::<f64>::zeros(GridSpec::new(2, 1, 2, &[1]), false);
        p.unary = vec![0.0, 1.0, 0.0, 0.0];
        p.pairwise = Pairwise::Dense(vec![0.0, 0.0, 0.0, 2.0]);
        let (x, e) = brute_force_map(&p).unwrap();
        assert_eq!(x.labels, vec![1, 1]);
        assert_eq!(e, 3.0);

        let s = ChainSlice::from_flat(2, &p.unary, p.pairwise.data()).unwrap();
        assert_eq!(brute_force_max_marginals(&s).unwrap(), vec![0.0, 3.0, 1.0, 3.0]);
        let sm = brute_force_smoothed_energy(&s, 1.0).unwrap();
        assert!((sm - 3.210998).abs() < 1e-6);
    }

    #[test]
    fn map_beats_random_labelings() {
        let g = GridSpec::new(3, 3, 2, &[1, 2]);
        let p = generate_random::<f64>(0, &g, Distribution::Normal);
        let (x, best) = brute_force_map(&p).unwrap();
        assert_eq!(energy(&p, &x).unwrap(), best);
        for s in 0..100 {
            let y = random_labeling(1000 + s, &g);
            assert!(energy(&p, &y).unwrap() <= best);
        }
    }

    #[test]
    fn guards_are_errors() {
        let p = Potentials::<f64>::zeros(GridSpec::new(5, 5, 2, &[1]), true);
        assert!(matches!(brute_force_map(&p), Err(Error::TooLarge { .. })));
        let u = vec![0.0f64; 21 * 2];
        let pw = vec![0.0f64; 20 * 4];
        let s = ChainSlice::from_flat(2, &u, &pw).unwrap();
        assert!(brute_force_max_marginals(&s).is_err());
    }

    #[test]
    fn smoothed_energy_of_zero_chain() {
        let u = vec![0.0f64; 4 * 3];
        let pw = vec![0.0f64; 3 * 9];
        let s = ChainSlice::from_flat(3, &u, &pw).unwrap();
        let gamma = 1e6;
        let e = brute_force_smoothed_energy(&s, gamma).unwrap();
        let expect = gamma * 4.0 * 3f64.ln();
        assert!((e - expect).abs() <= 1e-9 * expect);
        let single = ChainSlice::from_flat(2, &[0.0, 0.0], &[]).unwrap();
        assert!((brute_force_smoothed_energy(&single, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn length_one_marginals_equal_unary() {
        let s = ChainSlice::from_flat(3, &[0.5, -1.0, 2.0], &[]).unwrap();
        assert_eq!(brute_force_max_marginals(&s).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn ilp_objective_matches_energy() {
        let g = GridSpec::new(3, 3, 3, &[1, 2]);
        let p = generate_random::<f64>(3, &g, Distribution::Normal);
        for s in 0..20 {
            let x = random_labeling(s, &g);
            let (xv, xe) = one_hot(&p, &x);
            let a = ilp_objective(&p, &xv, &xe);
            let b = energy(&p, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
