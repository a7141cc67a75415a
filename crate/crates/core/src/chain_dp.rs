//! Two-pass dynamic programming on a single chain.
//!
//! The root-to-leaf pass computes forward halves `f_i`, the leaf-to-root pass
//! backward halves `b_i`, and the (smoothed-)max-marginals are
//! `m_i = f_i + b_i - ψ_i`. Every reduction is over labels in ascending order, so
//! results are bit-reproducible. The tape records softmax weights (smoothed
//! mode) or argmax indices (max mode); reverse-mode gradients need nothing else.

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};

/// Reduction used by the DP: hard max or negative-entropy smoothed max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode<T> {
    Max,
    Smoothed { gamma: T },
}

impl<T: Scalar> Mode<T> {
    pub fn smoothed(gamma: T) -> Result<Self> {
        if gamma > T::zero() && gamma.is_finite() {
            Ok(Mode::Smoothed { gamma })
        } else {
            Err(Error::InvalidGamma(gamma.as_f64()))
        }
    }

    pub fn gamma(&self) -> Option<T> {
        match *self {
            Mode::Max => None,
            Mode::Smoothed { gamma } => Some(gamma),
        }
    }

    /// Reduces `values` to a scalar: `max` or `γ log Σ exp(v / γ)`.
    pub fn reduce(&self, values: &[T]) -> T {
        match *self {
            Mode::Max => values[argmax(values)],
            Mode::Smoothed { gamma } => smoothed_max_value(values, gamma),
        }
    }
}

fn smoothed_max_value<T: Scalar>(values: &[T], gamma: T) -> T {
    let m = values[argmax(values)];
    let s: T = values.iter().map(|&v| ((v - m) / gamma).exp()).sum();
    m + gamma * s.ln()
}

/// `γ log Σ_l exp(v_l / γ)` and its gradient `softmax(v / γ)`.
pub fn smoothed_max<T: Scalar>(values: &[T], gamma: T) -> (T, Vec<T>) {
    let m = values[argmax(values)];
    let mut grad: Vec<T> = values.iter().map(|&v| ((v - m) / gamma).exp()).collect();
    let s: T = grad.iter().copied().sum();
    grad.iter_mut().for_each(|g| *g /= s);
    (m + gamma * s.ln(), grad)
}

/// Potentials of one chain: `unary` is `(n, L)`, `pairwise[k]` is the `L x L`
/// table between positions `k` and `k + 1`, rows indexed by the label at `k`.
#[derive(Debug, Clone)]
pub struct ChainSlice<'a, T> {
    pub num_labels: usize,
    pub unary: &'a [T],
    pub pairwise: Vec<&'a [T]>,
}

impl<'a, T: Scalar> ChainSlice<'a, T> {
    /// Builds a slice from a flat `(n - 1) * L * L` pairwise buffer.
    pub fn from_flat(num_labels: usize, unary: &'a [T], pairwise: &'a [T]) -> Result<Self> {
        let l = num_labels;
        if l == 0 || !unary.len().is_multiple_of(l) || unary.is_empty() {
            return Err(Error::Shape(format!(
                "unary length {} is not a positive multiple of {l}",
                unary.len()
            )));
        }
        let n = unary.len() / l;
        if pairwise.len() != (n - 1) * l * l {
            return Err(Error::Shape(format!(
                "pairwise length {} for a chain of {n} with {l} labels",
                pairwise.len()
            )));
        }
        Ok(Self {
            num_labels: l,
            unary,
            pairwise: pairwise.chunks(l * l).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.unary.len() / self.num_labels
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainMarginals<T> {
    pub num_labels: usize,
    pub marginals: Vec<T>,
    pub energy: T,
    pub forward_half: Vec<T>,
    pub backward_half: Vec<T>,
}

impl<T> ChainMarginals<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.marginals[i * self.num_labels..(i + 1) * self.num_labels]
    }
}

/// Stored reductions of one forward call.
///
/// Layout for edge `k` (positions `k`, `k + 1`): `forward[(k * L + l) * L + j]`
/// is the weight of label `j` at `k` in the reduction producing `f_{k+1}(l)`;
/// `backward[(k * L + l) * L + j]` is the weight of label `j` at `k + 1` in the
/// reduction producing `b_k(l)`. Argmax tapes drop the last axis.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeData<T> {
    Argmax { forward: Vec<u32>, backward: Vec<u32> },
    Weights { forward: Vec<T>, backward: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTape<T> {
    pub len: usize,
    pub num_labels: usize,
    pub data: TapeData<T>,
}

impl<T: Scalar> ChainTape<T> {
    pub fn empty(mode: &Mode<T>, len: usize, num_labels: usize) -> Self {
        let edges = len.saturating_sub(1);
        let data = match mode {
            Mode::Max => TapeData::Argmax {
                forward: vec![0; edges * num_labels],
                backward: vec![0; edges * num_labels],
            },
            Mode::Smoothed { .. } => TapeData::Weights {
                forward: vec![T::zero(); edges * num_labels * num_labels],
                backward: vec![T::zero(); edges * num_labels * num_labels],
            },
        };
        Self {
            len,
            num_labels,
            data,
        }
    }

    /// Storage held by the tape, in bytes.
    pub fn size_bytes(&self) -> usize {
        match &self.data {
            TapeData::Argmax { forward, backward } => 4 * (forward.len() + backward.len()),
            TapeData::Weights { forward, backward } => {
                T::WIDTH.bytes() * (forward.len() + backward.len())
            }
        }
    }
}

/// Runs both passes, writing halves and marginals into caller buffers of
/// `n * L` entries, and returns the chain energy.
pub(crate) fn forward_into<T: Scalar>(
    slice: &ChainSlice<'_, T>,
    mode: &Mode<T>,
    fwd: &mut [T],
    bwd: &mut [T],
    marg: &mut [T],
    mut tape: Option<&mut ChainTape<T>>,
    scratch: &mut Vec<T>,
) -> T {
    let l = slice.num_labels;
    let n = slice.len();
    let u = slice.unary;
    scratch.clear();
    scratch.resize(l, T::zero());

    fwd[..l].copy_from_slice(&u[..l]);
    for i in 1..n {
        let table = slice.pairwise[i - 1];
        let (prev, cur) = fwd.split_at_mut(i * l);
        let prev = &prev[(i - 1) * l..];
        for lab in 0..l {
            for j in 0..l {
                scratch[j] = prev[j] + table[j * l + lab];
            }
            let rec = tape.as_deref_mut().map(|t| (t, (i - 1) * l + lab));
            cur[lab] = u[i * l + lab] + reduce_record(mode, scratch, rec, true);
        }
    }

    bwd[(n - 1) * l..n * l].copy_from_slice(&u[(n - 1) * l..n * l]);
    for i in (0..n.saturating_sub(1)).rev() {
        let table = slice.pairwise[i];
        let (cur, next) = bwd.split_at_mut((i + 1) * l);
        let cur = &mut cur[i * l..];
        let next = &next[..l];
        for lab in 0..l {
            for j in 0..l {
                scratch[j] = next[j] + table[lab * l + j];
            }
            let rec = tape.as_deref_mut().map(|t| (t, i * l + lab));
            cur[lab] = u[i * l + lab] + reduce_record(mode, scratch, rec, false);
        }
    }

    for k in 0..n * l {
        marg[k] = fwd[k] + bwd[k] - u[k];
    }
    mode.reduce(&fwd[(n - 1) * l..n * l])
}

#[inline]
fn reduce_record<T: Scalar>(
    mode: &Mode<T>,
    values: &[T],
    record: Option<(&mut ChainTape<T>, usize)>,
    forward_dir: bool,
) -> T {
    let l = values.len();
    match *mode {
        Mode::Max => {
            let best = argmax(values);
            if let Some((tape, row)) = record {
                if let TapeData::Argmax { forward, backward } = &mut tape.data {
                    let dst = if forward_dir { forward } else { backward };
                    dst[row] = best as u32;
                }
            }
            values[best]
        }
        Mode::Smoothed { gamma } => {
            let m = values[argmax(values)];
            match record {
                Some((tape, row)) => {
                    let TapeData::Weights { forward, backward } = &mut tape.data else {
                        return smoothed_max_value(values, gamma);
                    };
                    let dst = if forward_dir { forward } else { backward };
                    let w = &mut dst[row * l..(row + 1) * l];
                    let mut s = T::zero();
                    for (wj, &v) in w.iter_mut().zip(values) {
                        *wj = ((v - m) / gamma).exp();
                        s += *wj;
                    }
                    w.iter_mut().for_each(|x| *x /= s);
                    m + gamma * s.ln()
                }
                None => smoothed_max_value(values, gamma),
            }
        }
    }
}

/// Computes marginals, halves, energy and the tape for one chain.
pub fn chain_forward<T: Scalar>(
    slice: &ChainSlice<'_, T>,
    mode: &Mode<T>,
) -> (ChainMarginals<T>, ChainTape<T>) {
    let l = slice.num_labels;
    let n = slice.len();
    let mut fwd = vec![T::zero(); n * l];
    let mut bwd = vec![T::zero(); n * l];
    let mut marg = vec![T::zero(); n * l];
    let mut tape = ChainTape::empty(mode, n, l);
    let mut scratch = Vec::with_capacity(l);
    let energy = forward_into(
        slice,
        mode,
        &mut fwd,
        &mut bwd,
        &mut marg,
        Some(&mut tape),
        &mut scratch,
    );
    (
        ChainMarginals {
            num_labels: l,
            marginals: marg,
            energy,
            forward_half: fwd,
            backward_half: bwd,
        },
        tape,
    )
}

/// Marginals and energy only; no tape is recorded.
pub fn chain_marginals<T: Scalar>(slice: &ChainSlice<'_, T>, mode: &Mode<T>) -> ChainMarginals<T> {
    let l = slice.num_labels;
    let n = slice.len();
    let mut fwd = vec![T::zero(); n * l];
    let mut bwd = vec![T::zero(); n * l];
    let mut marg = vec![T::zero(); n * l];
    let mut scratch = Vec::with_capacity(l);
    let energy = forward_into(slice, mode, &mut fwd, &mut bwd, &mut marg, None, &mut scratch);
    ChainMarginals {
        num_labels: l,
        marginals: marg,
        energy,
        forward_half: fwd,
        backward_half: bwd,
    }
}

/// Gradient of `Σ_{i,l} grad_marginals[i][l] · m_i(l)` w.r.t. the chain's
/// unary `(n, L)` and pairwise `(n - 1, L, L)` entries.
///
/// In max mode the gradient follows the recorded argmax indices, which is the
/// exact gradient wherever the maxima are unique.
pub fn chain_backward<T: Scalar>(
    tape: &ChainTape<T>,
    grad_marginals: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let l = tape.num_labels;
    let n = tape.len;
    if grad_marginals.len() != n * l {
        return Err(Error::Shape(format!(
            "gradient has {} entries, tape expects {}",
            grad_marginals.len(),
            n * l
        )));
    }
    let mut grad_unary = vec![T::zero(); n * l];
    let mut grad_pairwise = vec![T::zero(); n.saturating_sub(1) * l * l];
    let mut scratch = Vec::new();
    backward_into(
        tape,
        grad_marginals,
        &mut grad_unary,
        &mut grad_pairwise,
        &mut scratch,
    );
    Ok((grad_unary, grad_pairwise))
}

/// Overwrites `grad_unary` and accumulates into `grad_pairwise`.
pub(crate) fn backward_into<T: Scalar>(
    tape: &ChainTape<T>,
    g: &[T],
    grad_unary: &mut [T],
    grad_pairwise: &mut [T],
    scratch: &mut Vec<T>,
) {
    let l = tape.num_labels;
    let n = tape.len;
    scratch.clear();
    scratch.extend_from_slice(g);
    scratch.extend_from_slice(g);
    let (gf, gb) = scratch.split_at_mut(n * l);

    match &tape.data {
        TapeData::Weights { forward, backward } => {
            for i in (1..n).rev() {
                for lab in 0..l {
                    let gi = gf[i * l + lab];
                    if gi == T::zero() {
                        continue;
                    }
                    let w = &forward[((i - 1) * l + lab) * l..((i - 1) * l + lab + 1) * l];
                    let gp = &mut grad_pairwise[(i - 1) * l * l..i * l * l];
                    for j in 0..l {
                        let c = w[j] * gi;
                        gf[(i - 1) * l + j] += c;
                        gp[j * l + lab] += c;
                    }
                }
            }
            for i in 0..n.saturating_sub(1) {
                for lab in 0..l {
                    let gi = gb[i * l + lab];
                    if gi == T::zero() {
                        continue;
                    }
                    let w = &backward[(i * l + lab) * l..(i * l + lab + 1) * l];
                    let gp = &mut grad_pairwise[i * l * l..(i + 1) * l * l];
                    for j in 0..l {
                        let c = w[j] * gi;
                        gb[(i + 1) * l + j] += c;
                        gp[lab * l + j] += c;
                    }
                }
            }
        }
        TapeData::Argmax { forward, backward } => {
            for i in (1..n).rev() {
                for lab in 0..l {
                    let gi = gf[i * l + lab];
                    let j = forward[(i - 1) * l + lab] as usize;
                    gf[(i - 1) * l + j] += gi;
                    grad_pairwise[(i - 1) * l * l + j * l + lab] += gi;
                }
            }
            for i in 0..n.saturating_sub(1) {
                for lab in 0..l {
                    let gi = gb[i * l + lab];
                    let j = backward[i * l + lab] as usize;
                    gb[(i + 1) * l + j] += gi;
                    grad_pairwise[i * l * l + lab * l + j] += gi;
                }
            }
        }
    }

    for k in 0..n * l {
        grad_unary[k] = gf[k] + gb[k] - g[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PSI: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
    const PHI: [f64; 4] = [0.0, 0.0, 0.0, 2.0];

    fn two_node() -> ChainSlice<'static, f64> {
        ChainSlice::from_flat(2, &PSI, &PHI).unwrap()
    }

    #[test]
    fn smoothed_max_values() {
        let (v, g) = smoothed_max(&[0.0, 0.0], 1.0);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, 0.5]);

        let (v, g) = smoothed_max(&[1.0f64, 0.0], 1.0);
        assert!((v - 1.313261687518223).abs() < 1e-12);
        assert!((g[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g[1] - 0.2689414213699951).abs() < 1e-12);

        let (v, g) = smoothed_max(&[1000.0, 0.0], 1.0);
        assert_eq!(v, 1000.0);
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn two_node_max() {
        let (m, tape) = chain_forward(&two_node(), &Mode::Max);
        assert_eq!(m.marginals, vec![0.0, 3.0, 1.0, 3.0]);
        assert_eq!(m.energy, 3.0);
        assert_eq!(
            tape.data,
            TapeData::Argmax {
                forward: vec![1, 1],
                backward: vec![0, 1]
            }
        );
    }

    #[test]
    fn two_node_smoothed_energy() {
        let (m, _) = chain_forward(&two_node(), &Mode::Smoothed { gamma: 1.0 });
        let expect = (1.0f64 + 1.0 + 1f64.exp() + 3f64.exp()).ln();
        assert!((m.energy - expect).abs() < 1e-12);
        assert!((m.energy - 3.210998).abs() < 1e-6);
    }

    #[test]
    fn single_node_chain() {
        let u = [2.0, 5.0];
        let s = ChainSlice::from_flat(2, &u, &[]).unwrap();
        let (m, tape) = chain_forward(&s, &Mode::Max);
        assert_eq!(m.marginals, vec![2.0, 5.0]);
        assert_eq!(m.energy, 5.0);
        let (gu, gp) = chain_backward(&tape, &[0.25, -1.5]).unwrap();
        assert_eq!(gu, vec![0.25, -1.5]);
        assert!(gp.is_empty());
    }

    #[test]
    fn zero_seed_zero_gradient() {
        let (_, tape) = chain_forward(&two_node(), &Mode::Smoothed { gamma: 0.7 });
        let (gu, gp) = chain_backward(&tape, &[0.0; 4]).unwrap();
        assert!(gu.iter().chain(&gp).all(|&x| x == 0.0));
    }

    #[test]
    fn weight_rows_are_distributions() {
        let u = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4, 1.5, 0.0, -2.0];
        let p = [
            0.2, -0.5, 1.0, 0.0, 0.3, -0.7, 1.1, 0.4, 0.9, -0.3, 0.6, 0.0, 0.8, -1.0, 0.2, 0.5,
            0.5, -0.1,
        ];
        let s = ChainSlice::from_flat(3, &u, &p).unwrap();
        let (_, tape) = chain_forward(&s, &Mode::Smoothed { gamma: 0.5 });
        let TapeData::Weights { forward, backward } = &tape.data else {
            panic!("expected weights")
        };
        for row in forward.chunks(3).chain(backward.chunks(3)) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (_, tape) = chain_forward(&two_node(), &Mode::Max);
        assert!(chain_backward(&tape, &[0.0; 3]).is_err());
        assert!(ChainSlice::from_flat(2, &PSI, &PHI[..3]).is_err());
    }

    #[test]
    fn invalid_gamma_rejected() {
        assert!(Mode::smoothed(0.0f64).is_err());
        assert!(Mode::smoothed(-1.0f64).is_err());
        assert!(Mode::smoothed(f64::NAN).is_err());
    }
}
