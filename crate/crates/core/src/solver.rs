//! Monotone fixed-point dual decomposition.
//!
//! The dual variables are folded into per-chain unary copies `ψ^t` that always
//! satisfy `Σ_{t ∈ T(i)} ψ_i^t = ψ_i`. One step recomputes all chain marginals
//! `m` (max-marginals or smoothed-max-marginals) and moves every copy toward
//! the average over its covering chains:
//!
//! `ψ_i^t ← ψ_i^t − α (m_i^t − mean_{t̄ ∈ T(i)} m_i^{t̄})`, with `α = 1 / max_t |V^t|`.
//!
//! With that step size the sum of chain energies never increases.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::chain_dp::{forward_into, ChainSlice, ChainTape, Mode};
use crate::error::{Error, Result};
use crate::model::{
    build_decomposition, check_potentials, energy, replicate_unaries, ChainField, Decomposition,
    Labeling, Potentials,
};
use crate::scalar::{argmax, softmax_in_place, Scalar};

/// A validated instance together with its chain decomposition.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub potentials: Potentials<T>,
    pub decomposition: Decomposition,
}

impl<T: Scalar> Problem<T> {
    pub fn new(potentials: Potentials<T>) -> Result<Self> {
        check_potentials(&potentials)?;
        let decomposition = build_decomposition(&potentials.grid)?;
        Ok(Self {
            potentials,
            decomposition,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.potentials.grid.num_labels
    }

    /// The slice of chain `c` under the given replicated unaries.
    pub fn chain_slice<'a>(&'a self, psi_t: &'a ChainField<T>, c: usize) -> ChainSlice<'a, T> {
        let chain = &self.decomposition.chains[c];
        ChainSlice {
            num_labels: self.num_labels(),
            unary: psi_t.chain(&self.decomposition, c),
            pairwise: chain
                .edges
                .iter()
                .map(|&e| self.potentials.edge_table(e, chain.slot))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualState<'p, T> {
    pub problem: &'p Problem<T>,
    pub psi_t: ChainField<T>,
    pub mode: Mode<T>,
}

/// Marginals of every chain plus the chain energies.
#[derive(Debug, Clone)]
pub struct MarginalField<T> {
    pub marginals: ChainField<T>,
    pub energies: Vec<T>,
}

impl<T: Scalar> MarginalField<T> {
    /// Sum of chain energies in ascending chain order.
    pub fn dual(&self) -> T {
        self.energies.iter().fold(T::zero(), |a, &e| a + e)
    }
}

/// Runs the DP of every chain in parallel. When `tapes` is given, each chain's
/// tape is recorded into it.
pub(crate) fn compute_field<T: Scalar>(
    problem: &Problem<T>,
    psi_t: &ChainField<T>,
    mode: &Mode<T>,
    tapes: Option<&mut Vec<ChainTape<T>>>,
) -> MarginalField<T> {
    let d = &problem.decomposition;
    let l = problem.num_labels();
    let mut marginals = ChainField::zeros(d);
    let outs = marginals.chains_mut(d);
    let energies: Vec<T> = match tapes {
        Some(tapes) => {
            tapes.clear();
            tapes.extend(d.chains.iter().map(|c| ChainTape::empty(mode, c.len(), l)));
            outs.into_par_iter()
                .zip(tapes.par_iter_mut())
                .enumerate()
                .map_init(Vec::new, |scratch, (c, (out, tape))| {
                    run_chain(problem, psi_t, mode, c, out, Some(tape), scratch)
                })
                .collect()
        }
        None => outs
            .into_par_iter()
            .enumerate()
            .map_init(Vec::new, |scratch, (c, out)| {
                run_chain(problem, psi_t, mode, c, out, None, scratch)
            })
            .collect(),
    };
    MarginalField {
        marginals,
        energies,
    }
}

fn run_chain<T: Scalar>(
    problem: &Problem<T>,
    psi_t: &ChainField<T>,
    mode: &Mode<T>,
    c: usize,
    out: &mut [T],
    tape: Option<&mut ChainTape<T>>,
    scratch: &mut Vec<T>,
) -> T {
    let slice = problem.chain_slice(psi_t, c);
    let mut fwd = vec![T::zero(); out.len()];
    let mut bwd = vec![T::zero(); out.len()];
    forward_into(&slice, mode, &mut fwd, &mut bwd, out, tape, scratch)
}

/// Mean over covering chains of each vertex's marginal row, `(V, L)`.
fn vertex_means<T: Scalar>(d: &Decomposition, field: &ChainField<T>) -> Vec<T> {
    let l = field.num_labels;
    let mut means = vec![T::zero(); d.grid.num_vertices() * l];
    means
        .par_chunks_mut(l)
        .enumerate()
        .for_each(|(i, row)| {
            field.vertex_sum(d, i, row);
            let n = T::of_usize(d.coverage[i].len());
            row.iter_mut().for_each(|x| *x /= n);
        });
    means
}

/// `ψ^t − step · (m^t − mean m)` over all positions.
pub(crate) fn updated_psi<T: Scalar>(
    d: &Decomposition,
    psi_t: &ChainField<T>,
    field: &MarginalField<T>,
    step: T,
) -> ChainField<T> {
    let l = psi_t.num_labels;
    let means = vertex_means(d, &field.marginals);
    let mut next = psi_t.clone();
    next.data
        .par_chunks_mut(l)
        .enumerate()
        .for_each(|(pos, row)| {
            let v = d.position_vertex[pos];
            let m = field.marginals.row(pos);
            let mean = &means[v * l..(v + 1) * l];
            for k in 0..l {
                row[k] -= step * (m[k] - mean[k]);
            }
        });
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub dual_before: f64,
    pub dual_after: f64,
    pub agreement_before: f64,
    pub agreement_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub all_agree: bool,
    pub fraction: f64,
    /// For each vertex, the argmax label chosen by each covering chain (ascending chain id).
    pub per_vertex_argmax: Vec<Vec<usize>>,
}

impl<'p, T: Scalar> DualState<'p, T> {
    /// Uniformly replicated unaries, the starting point of every solve.
    pub fn initial(problem: &'p Problem<T>, mode: Mode<T>) -> Self {
        Self {
            problem,
            psi_t: replicate_unaries(&problem.potentials, &problem.decomposition),
            mode,
        }
    }

    /// Builds a state from explicit replicated unaries, checking the sum constraint.
    pub fn from_parts(problem: &'p Problem<T>, psi_t: ChainField<T>, mode: Mode<T>) -> Result<Self> {
        let d = &problem.decomposition;
        if psi_t.data.len() != d.num_positions() * problem.num_labels() {
            return Err(Error::Shape(format!(
                "replicated unaries have {} entries, expected {}",
                psi_t.data.len(),
                d.num_positions() * problem.num_labels()
            )));
        }
        let state = Self {
            problem,
            psi_t,
            mode,
        };
        let err = state.sum_constraint_error();
        if err > 1e-9 * T::TOL_SCALE {
            return Err(Error::Shape(format!(
                "replicated unaries violate the sum constraint by {err}"
            )));
        }
        Ok(state)
    }

    pub fn decomposition(&self) -> &'p Decomposition {
        &self.problem.decomposition
    }

    pub fn marginals(&self) -> MarginalField<T> {
        compute_field(self.problem, &self.psi_t, &self.mode, None)
    }

    /// `max_{i,l} |Σ_{t ∈ T(i)} ψ_i^t(l) − ψ_i(l)|`.
    pub fn sum_constraint_error(&self) -> f64 {
        let d = self.decomposition();
        let l = self.problem.num_labels();
        let mut row = vec![T::zero(); l];
        let mut worst = 0.0f64;
        for i in 0..d.grid.num_vertices() {
            self.psi_t.vertex_sum(d, i, &mut row);
            for (s, &u) in row.iter().zip(self.problem.potentials.unary_row(i)) {
                worst = worst.max((*s - u).abs().as_f64());
            }
        }
        worst
    }
}

/// Sum of chain energies under the state's mode.
pub fn dual_objective<T: Scalar>(state: &DualState<'_, T>) -> T {
    state.marginals().dual()
}

/// One simultaneous update of every replicated unary with step `1 / max_t |V^t|`.
pub fn fpi_step<'p, T: Scalar>(state: &DualState<'p, T>) -> (DualState<'p, T>, StepDiagnostics) {
    let d = state.decomposition();
    let before = state.marginals();
    let psi_t = updated_psi(d, &state.psi_t, &before, d.step_size());
    let next = DualState {
        problem: state.problem,
        psi_t,
        mode: state.mode,
    };
    let after = next.marginals();
    let diag = StepDiagnostics {
        dual_before: before.dual().as_f64(),
        dual_after: after.dual().as_f64(),
        agreement_before: agreement_from(d, &before).fraction,
        agreement_after: agreement_from(d, &after).fraction,
    };
    (next, diag)
}

/// Corrections that equalize marginal rows: `Δ^t = −step (m^t − mean_t m^t)`.
pub fn equalizing_corrections<T: Scalar>(rows: &[&[T]], step: T) -> Vec<Vec<T>> {
    let l = rows.first().map_or(0, |r| r.len());
    let n = T::of_usize(rows.len());
    let mut mean = vec![T::zero(); l];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| -step * (v - m)).collect())
        .collect()
}

/// Optimal block update at a single vertex `k` (step size 1). Afterwards every
/// covering chain has the same marginal vector at `k`.
pub fn single_node_update<'p, T: Scalar>(state: &DualState<'p, T>, k: usize) -> DualState<'p, T> {
    let d = state.decomposition();
    let field = state.marginals();
    let covers = &d.coverage[k];
    let rows: Vec<&[T]> = covers
        .iter()
        .map(|&c| field.marginals.row(d.position_index(c)))
        .collect();
    let corr = equalizing_corrections(&rows, T::one());
    let mut psi_t = state.psi_t.clone();
    for (&c, delta) in covers.iter().zip(corr) {
        for (x, dx) in psi_t.row_mut(d.position_index(c)).iter_mut().zip(delta) {
            *x += dx;
        }
    }
    DualState {
        problem: state.problem,
        psi_t,
        mode: state.mode,
    }
}

pub fn agreement_from<T: Scalar>(d: &Decomposition, field: &MarginalField<T>) -> Agreement {
    let per_vertex_argmax: Vec<Vec<usize>> = d
        .coverage
        .iter()
        .map(|covers| {
            covers
                .iter()
                .map(|&c| argmax(field.marginals.row(d.position_index(c))))
                .collect()
        })
        .collect();
    let agreeing = per_vertex_argmax
        .iter()
        .filter(|a| a.windows(2).all(|w| w[0] == w[1]))
        .count();
    let total = per_vertex_argmax.len();
    Agreement {
        all_agree: agreeing == total,
        fraction: agreeing as f64 / total as f64,
        per_vertex_argmax,
    }
}

/// Whether all chains covering each vertex pick the same (lowest-index) argmax.
pub fn agreement<T: Scalar>(state: &DualState<'_, T>) -> Agreement {
    agreement_from(state.decomposition(), &state.marginals())
}

/// `Σ_{t ∈ T(i)} m_i^t` for every vertex, `(V, L)`.
pub fn summed_marginals<T: Scalar>(d: &Decomposition, field: &MarginalField<T>) -> Vec<T> {
    let l = field.marginals.num_labels;
    let mut out = vec![T::zero(); d.grid.num_vertices() * l];
    for (i, row) in out.chunks_mut(l).enumerate() {
        field.marginals.vertex_sum(d, i, row);
    }
    out
}

/// Per-vertex argmax of a `(V, L)` score table; ties go to the lowest label.
pub fn argmax_rows<T: Scalar>(scores: &[T], num_labels: usize) -> Labeling {
    Labeling::new(scores.chunks(num_labels).map(argmax).collect())
}

/// Row-wise softmax of a `(V, L)` score table.
pub fn softmax_rows<T: Scalar>(scores: &[T], num_labels: usize) -> Vec<T> {
    let mut out = scores.to_vec();
    out.chunks_mut(num_labels).for_each(softmax_in_place);
    out
}

pub fn decode_argmax<T: Scalar>(state: &DualState<'_, T>) -> Labeling {
    let d = state.decomposition();
    argmax_rows(&summed_marginals(d, &state.marginals()), state.problem.num_labels())
}

pub fn decode_softmax<T: Scalar>(state: &DualState<'_, T>) -> Vec<T> {
    let d = state.decomposition();
    softmax_rows(&summed_marginals(d, &state.marginals()), state.problem.num_labels())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig<T> {
    pub mode: Mode<T>,
    pub max_iters: usize,
    /// Largest fraction of disagreeing vertices still counted as agreement.
    pub agree_tol: f64,
    /// Stop when the dual improves by less than this (relative) over 5 rounds.
    pub dual_tol: f64,
}

impl<T: Scalar> Default for SolveConfig<T> {
    fn default() -> Self {
        Self {
            mode: Mode::Smoothed { gamma: T::one() },
            max_iters: 200,
            agree_tol: 0.0,
            dual_tol: 1e-7,
        }
    }
}

impl<T: Scalar> SolveConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if let Mode::Smoothed { gamma } = self.mode {
            Mode::smoothed(gamma)?;
        }
        if self.max_iters == 0 {
            return Err(Error::ZeroIterations);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub marginals_s: f64,
    pub update_s: f64,
    pub decode_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult<T> {
    pub labeling: Labeling,
    pub primal_energy: T,
    pub dual_bound: T,
    pub duality_gap: T,
    /// Number of marginal evaluations; equals the trace lengths.
    pub iterations: usize,
    pub converged: bool,
    pub dual_trace: Vec<T>,
    pub agreement_trace: Vec<f64>,
    pub timings: Timings,
}

const STAGNATION_WINDOW: usize = 5;

/// Fixed-point iterations until agreement, stagnation of the dual, or `max_iters`.
///
/// Each round computes all marginals, records the dual and agreement, and only
/// then updates. Agreement in max mode counts as convergence only when the
/// decoded labeling closes the gap; tie-broken argmaxes can agree on a
/// labeling that is not optimal for every chain.
pub fn solve<T: Scalar>(p: &Potentials<T>, cfg: &SolveConfig<T>) -> Result<SolveResult<T>> {
    cfg.validate()?;
    let problem = Problem::new(p.clone())?;
    solve_problem(&problem, cfg)
}

pub fn solve_problem<T: Scalar>(problem: &Problem<T>, cfg: &SolveConfig<T>) -> Result<SolveResult<T>> {
    cfg.validate()?;
    let d = &problem.decomposition;
    let l = problem.num_labels();
    let step: T = d.step_size();
    let mut timings = Timings::default();
    let mut state = DualState::initial(problem, cfg.mode);

    let t = Instant::now();
    let mut field = state.marginals();
    let mut dp_time = t.elapsed();
    let mut update_time = Duration::ZERO;
    let mut decode_time = Duration::ZERO;

    let mut dual_trace = Vec::new();
    let mut agreement_trace = Vec::new();
    let mut converged = false;
    let mut decoded: Option<(Labeling, T)> = None;

    for it in 0..cfg.max_iters {
        let dual = field.dual();
        let agree = agreement_from(d, &field);
        dual_trace.push(dual);
        agreement_trace.push(agree.fraction);

        if agree.fraction >= 1.0 - cfg.agree_tol {
            let t = Instant::now();
            let x = argmax_rows(&summed_marginals(d, &field), l);
            let e = energy(&problem.potentials, &x)?;
            decode_time += t.elapsed();
            let certified = match cfg.mode {
                Mode::Max => {
                    (dual - e).as_f64() <= 1e-9 * T::TOL_SCALE * dual.abs().as_f64().max(1.0)
                }
                Mode::Smoothed { .. } => true,
            };
            decoded = Some((x, e));
            if certified {
                converged = true;
                break;
            }
        }

        let n = dual_trace.len();
        if n > STAGNATION_WINDOW {
            let old = dual_trace[n - 1 - STAGNATION_WINDOW];
            let scale = dual.abs().as_f64().max(1.0);
            if (old - dual).as_f64() <= cfg.dual_tol * scale {
                break;
            }
        }
        if it + 1 == cfg.max_iters {
            break;
        }

        let t = Instant::now();
        state.psi_t = updated_psi(d, &state.psi_t, &field, step);
        update_time += t.elapsed();
        let t = Instant::now();
        field = state.marginals();
        dp_time += t.elapsed();
        decoded = None;
    }

    let (labeling, primal_energy) = match decoded {
        Some(v) => v,
        None => {
            let t = Instant::now();
            let x = argmax_rows(&summed_marginals(d, &field), l);
            let e = energy(&problem.potentials, &x)?;
            decode_time += t.elapsed();
            (x, e)
        }
    };
    let dual_bound = *dual_trace.last().expect("at least one round");
    timings.marginals_s = dp_time.as_secs_f64();
    timings.update_s = update_time.as_secs_f64();
    timings.decode_s = decode_time.as_secs_f64();
    Ok(SolveResult {
        labeling,
        primal_energy,
        dual_bound,
        duality_gap: dual_bound - primal_energy,
        iterations: dual_trace.len(),
        converged,
        dual_trace,
        agreement_trace,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridSpec, Pairwise};

    fn two_node() -> Potentials<f64> {
        let mut p = Potentials::zeros(GridSpec::new(2, 1, 2, &[1]), false);
        p.unary = vec![0.0, 1.0, 0.0, 0.0];
        p.pairwise = Pairwise::Dense(vec![0.0, 0.0, 0.0, 2.0]);
        p
    }

    /// 2x2 grid, stride 1; vertex 0 is covered by chain 0 (row 0) and chain 2 (column 0).
    fn two_chain_state(problem: &Problem<f64>) -> DualState<'_, f64> {
        let d = &problem.decomposition;
        let mut psi = ChainField::zeros(d);
        let c = &d.coverage[0];
        assert_eq!(c.len(), 2);
        psi.row_mut(d.position_index(c[0])).copy_from_slice(&[1.0, 0.0]);
        psi.row_mut(d.position_index(c[1])).copy_from_slice(&[0.0, 1.0]);
        DualState::from_parts(problem, psi, Mode::Max).unwrap()
    }

    fn two_chain_problem() -> Problem<f64> {
        let mut p = Potentials::zeros(GridSpec::new(2, 2, 2, &[1]), true);
        p.unary[0] = 1.0;
        p.unary[1] = 1.0;
        Problem::new(p).unwrap()
    }

    #[test]
    fn lemma_corrections_split_the_difference() {
        let corr = equalizing_corrections(&[&[1.0, 0.0][..], &[0.0, 1.0][..]], 1.0);
        assert_eq!(corr, vec![vec![-0.5, 0.5], vec![0.5, -0.5]]);
    }

    #[test]
    fn single_node_update_equalizes() {
        let problem = two_chain_problem();
        let state = two_chain_state(&problem);
        let d = &problem.decomposition;
        let before = state.marginals();
        let rows: Vec<_> = d.coverage[0]
            .iter()
            .map(|&c| before.marginals.row(d.position_index(c)).to_vec())
            .collect();
        assert_eq!(rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = agreement(&state);
        assert!(!a.all_agree);
        assert_eq!(a.per_vertex_argmax[0], vec![0, 1]);
        assert_eq!(a.fraction, 0.75);

        let next = single_node_update(&state, 0);
        let after = next.marginals();
        for &c in &d.coverage[0] {
            assert_eq!(after.marginals.row(d.position_index(c)), &[0.5, 0.5]);
        }
        assert_eq!(agreement(&next).per_vertex_argmax[0], vec![0, 0]);
        assert!(next.sum_constraint_error() < 1e-15);
    }

    #[test]
    fn single_cover_is_unchanged() {
        let problem = Problem::new(two_node()).unwrap();
        let state = DualState::initial(&problem, Mode::Max);
        let next = single_node_update(&state, 1);
        assert_eq!(next.psi_t, state.psi_t);
    }

    #[test]
    fn zero_potentials_zero_dual() {
        let p = Potentials::<f64>::zeros(GridSpec::new(3, 3, 3, &[1, 2]), true);
        let problem = Problem::new(p).unwrap();
        assert_eq!(dual_objective(&DualState::initial(&problem, Mode::Max)), 0.0);
    }

    #[test]
    fn agreeing_state_is_a_fixed_point() {
        let p = Potentials::<f64>::zeros(GridSpec::new(3, 3, 2, &[1]), true);
        let problem = Problem::new(p).unwrap();
        let state = DualState::initial(&problem, Mode::Max);
        let (next, diag) = fpi_step(&state);
        assert_eq!(next.psi_t, state.psi_t);
        assert_eq!(diag.dual_before, diag.dual_after);
    }

    #[test]
    fn decode_tie_goes_low() {
        assert_eq!(argmax_rows(&[2.0, 3.5, 1.0, 1.0, 1.0, 0.0], 3).labels, vec![1, 0]);
        let p = softmax_rows(&[0.0, 0.0, 0.0, 3f64.ln(), 0.0, f64::NEG_INFINITY], 3);
        for (a, b) in p.iter().zip([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.75, 0.25, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tree_converges_in_one_round() {
        let r = solve(
            &two_node(),
            &SolveConfig {
                mode: Mode::Max,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.labeling.labels, vec![1, 1]);
        assert_eq!(r.primal_energy, 3.0);
        assert_eq!(r.duality_gap, 0.0);
    }

    #[test]
    fn bad_configs_rejected() {
        let p = two_node();
        let mut cfg = SolveConfig::<f64> {
            mode: Mode::Smoothed { gamma: 0.0 },
            ..Default::default()
        };
        assert!(matches!(solve(&p, &cfg), Err(Error::InvalidGamma(_))));
        cfg.mode = Mode::Max;
        cfg.max_iters = 0;
        assert!(matches!(solve(&p, &cfg), Err(Error::ZeroIterations)));
    }
}
