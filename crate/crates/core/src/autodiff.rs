//! Reverse-mode differentiation through unrolled fixed-point iterations.
//!
//! The forward pass replicates the unaries, applies `K` simultaneous updates and
//! decodes the final summed marginals with a softmax. The update is linear in
//! the marginals, so its adjoint is `ḡ_m = −α (ḡ_ψ' − mean_{T(i)} ḡ_ψ')` plus
//! the identity path `ḡ_ψ += ḡ_ψ'`. Marginals are differentiated with the
//! per-chain tapes; pairwise gradients from every layer are accumulated into
//! the original (dense or tied) tables.

use rayon::prelude::*;

use crate::chain_dp::{backward_into, chain_forward, ChainTape, Mode};
use crate::error::{Error, Result};
use crate::generate::{generate_random, random_labeling, Distribution};
use crate::model::{replicate_unaries, ChainField, GridSpec, Labeling, Pairwise, Potentials};
use crate::solver::{compute_field, softmax_rows, summed_marginals, updated_psi, Problem};
use crate::scalar::Scalar;

/// Whether chain tapes are kept from the forward pass or rebuilt during backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapePolicy {
    #[default]
    Store,
    /// Keep only the replicated unaries of each layer and rerun the DP in backward.
    Recompute,
}

#[derive(Debug, Clone)]
enum LayerTape<T> {
    Stored(Vec<ChainTape<T>>),
    Recompute(ChainField<T>),
}

#[derive(Debug, Clone)]
pub struct UnrolledTape<'p, T> {
    pub problem: &'p Problem<T>,
    pub mode: Mode<T>,
    /// One entry per update step.
    iterations: Vec<LayerTape<T>>,
    /// DP of the final state, feeding the softmax decode.
    output: LayerTape<T>,
    pub probs: Vec<T>,
}

impl<'p, T: Scalar> UnrolledTape<'p, T> {
    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }

    /// Bytes held by stored chain tapes and replicated unaries.
    pub fn size_bytes(&self) -> usize {
        let layer = |t: &LayerTape<T>| match t {
            LayerTape::Stored(v) => v.iter().map(ChainTape::size_bytes).sum::<usize>(),
            LayerTape::Recompute(f) => f.data.len() * T::WIDTH.bytes(),
        };
        self.iterations.iter().map(layer).sum::<usize>() + layer(&self.output)
    }

    fn layer_tapes(&self, layer: &LayerTape<T>) -> Vec<ChainTape<T>> {
        match layer {
            LayerTape::Stored(v) => v.clone(),
            LayerTape::Recompute(psi_t) => (0..self.problem.decomposition.chains.len())
                .into_par_iter()
                .map(|c| chain_forward(&self.problem.chain_slice(psi_t, c), &self.mode).1)
                .collect(),
        }
    }
}

/// Gradients w.r.t. the original potentials; `grad_pairwise` has the layout of
/// `Potentials::pairwise` (per edge when dense, per shared table when tied).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair<T> {
    pub grad_unary: Vec<T>,
    pub grad_pairwise: Vec<T>,
}

fn record_layer<T: Scalar>(
    problem: &Problem<T>,
    psi_t: &ChainField<T>,
    mode: &Mode<T>,
    policy: TapePolicy,
) -> (crate::solver::MarginalField<T>, LayerTape<T>) {
    match policy {
        TapePolicy::Store => {
            let mut tapes = Vec::new();
            let field = compute_field(problem, psi_t, mode, Some(&mut tapes));
            (field, LayerTape::Stored(tapes))
        }
        TapePolicy::Recompute => (
            compute_field(problem, psi_t, mode, None),
            LayerTape::Recompute(psi_t.clone()),
        ),
    }
}

/// `K` fixed-point updates followed by a softmax decode of the summed marginals.
pub fn forward_unrolled<'p, T: Scalar>(
    problem: &'p Problem<T>,
    iterations: usize,
    mode: Mode<T>,
    policy: TapePolicy,
) -> Result<(Vec<T>, UnrolledTape<'p, T>)> {
    if let Mode::Smoothed { gamma } = mode {
        Mode::smoothed(gamma)?;
    }
    let d = &problem.decomposition;
    let step: T = d.step_size();
    let mut psi_t = replicate_unaries(&problem.potentials, d);
    let mut layers = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (field, layer) = record_layer(problem, &psi_t, &mode, policy);
        psi_t = updated_psi(d, &psi_t, &field, step);
        layers.push(layer);
    }
    let (field, output) = record_layer(problem, &psi_t, &mode, policy);
    let probs = softmax_rows(&summed_marginals(d, &field), problem.num_labels());
    let tape = UnrolledTape {
        problem,
        mode,
        iterations: layers,
        output,
        probs: probs.clone(),
    };
    Ok((probs, tape))
}

pub const PROB_CLAMP: f64 = 1e-15;

/// Mean negative log-likelihood of `target`, and its gradient w.r.t. `probs`.
///
/// Probabilities are clamped to `[1e-15, 1 - 1e-15]` before the log; clamped
/// entries get zero gradient.
pub fn cross_entropy_loss<T: Scalar>(
    probs: &[T],
    num_labels: usize,
    target: &Labeling,
) -> Result<(T, Vec<T>)> {
    let nv = probs.len() / num_labels;
    if target.labels.len() != nv || probs.len() != nv * num_labels {
        return Err(Error::Shape(format!(
            "{} probability rows for a target of {} vertices",
            nv,
            target.labels.len()
        )));
    }
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let n = T::of_usize(nv);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); probs.len()];
    for (i, &t) in target.labels.iter().enumerate() {
        if t >= num_labels {
            return Err(Error::LabelOutOfRange {
                vertex: i,
                label: t,
                num_labels,
            });
        }
        let p = probs[i * num_labels + t];
        let pc = p.max(lo).min(hi);
        loss -= pc.ln();
        if p > lo && p < hi {
            grad[i * num_labels + t] = -T::one() / (p * n);
        }
    }
    Ok((loss / n, grad))
}

/// Exact reverse-mode gradient of `Σ seed · probs` w.r.t. the original potentials.
pub fn backward_unrolled<T: Scalar>(tape: &UnrolledTape<'_, T>, seed: &[T]) -> Result<GradientPair<T>> {
    let problem = tape.problem;
    let d = &problem.decomposition;
    let l = problem.num_labels();
    let nv = d.grid.num_vertices();
    if seed.len() != nv * l {
        return Err(Error::Shape(format!(
            "seed has {} entries, expected {}",
            seed.len(),
            nv * l
        )));
    }

    // Softmax adjoint: ḡ_s = p ⊙ (ḡ_p − <p, ḡ_p>).
    let mut grad_scores = vec![T::zero(); nv * l];
    for i in 0..nv {
        let p = &tape.probs[i * l..(i + 1) * l];
        let g = &seed[i * l..(i + 1) * l];
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for k in 0..l {
            grad_scores[i * l + k] = p[k] * (g[k] - dot);
        }
    }

    let mut grad_marg = ChainField::zeros(d);
    for (pos, row) in grad_marg.data.chunks_mut(l).enumerate() {
        let v = d.position_vertex[pos];
        row.copy_from_slice(&grad_scores[v * l..(v + 1) * l]);
    }

    let mut grad_pairwise = vec![T::zero(); problem.potentials.pairwise.data().len()];
    let mut grad_psi = ChainField::zeros(d);
    backprop_layer(tape, &tape.output, &grad_marg, &mut grad_psi, &mut grad_pairwise);

    let step: T = d.step_size();
    for layer in tape.iterations.iter().rev() {
        // ψ' = ψ − α (m − mean m): identity path plus the marginal path.
        let mut means = vec![T::zero(); nv * l];
        for (i, row) in means.chunks_mut(l).enumerate() {
            grad_psi.vertex_sum(d, i, row);
            let n = T::of_usize(d.coverage[i].len());
            row.iter_mut().for_each(|x| *x /= n);
        }
        for (pos, row) in grad_marg.data.chunks_mut(l).enumerate() {
            let v = d.position_vertex[pos];
            let gp = grad_psi.row(pos);
            for k in 0..l {
                row[k] = -step * (gp[k] - means[v * l + k]);
            }
        }
        let mut layer_grad = ChainField::zeros(d);
        backprop_layer(tape, layer, &grad_marg, &mut layer_grad, &mut grad_pairwise);
        for (a, &b) in grad_psi.data.iter_mut().zip(&layer_grad.data) {
            *a += b;
        }
    }

    let mut grad_unary = vec![T::zero(); nv * l];
    for (i, row) in grad_unary.chunks_mut(l).enumerate() {
        grad_psi.vertex_sum(d, i, row);
        let n = T::of_usize(d.coverage[i].len());
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(GradientPair {
        grad_unary,
        grad_pairwise,
    })
}

/// Backpropagates `grad_marg` through one layer of chain DPs, writing the
/// unary adjoint into `grad_psi` and accumulating pairwise adjoints.
fn backprop_layer<T: Scalar>(
    tape: &UnrolledTape<'_, T>,
    layer: &LayerTape<T>,
    grad_marg: &ChainField<T>,
    grad_psi: &mut ChainField<T>,
    grad_pairwise: &mut [T],
) {
    let problem = tape.problem;
    let d = &problem.decomposition;
    let l = problem.num_labels();
    let tapes = tape.layer_tapes(layer);
    let outs = grad_psi.chains_mut(d);
    let chain_pairwise: Vec<Vec<T>> = outs
        .into_par_iter()
        .zip(tapes.par_iter())
        .enumerate()
        .map_init(Vec::new, |scratch, (c, (out, t))| {
            let mut gp = vec![T::zero(); t.len.saturating_sub(1) * l * l];
            backward_into(t, grad_marg.chain(d, c), out, &mut gp, scratch);
            gp
        })
        .collect();
    let ll = l * l;
    let tied = problem.potentials.pairwise.is_tied();
    for (chain, gp) in d.chains.iter().zip(&chain_pairwise) {
        for (k, &e) in chain.edges.iter().enumerate() {
            let dst = if tied { chain.slot } else { e };
            for (a, &b) in grad_pairwise[dst * ll..(dst + 1) * ll]
                .iter_mut()
                .zip(&gp[k * ll..(k + 1) * ll])
            {
                *a += b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Every entry, in parameter order.
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self, tolerance: f64) -> impl Iterator<Item = &FdEntry> {
        self.entries.iter().filter(move |e| e.rel_err >= tolerance)
    }
}

/// Central differences of `f` at `params`, compared entrywise with `analytic`
/// using `|a − n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&[T]) -> T,
    params: &[T],
    analytic: &[T],
    h: T,
) -> Result<FdReport> {
    if h.is_nan() || h <= T::zero() {
        return Err(Error::InvalidStep(h.as_f64()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    for k in 0..params.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = f(&x);
        x[k] = orig - h;
        let down = f(&x);
        x[k] = orig;
        let numeric = ((up - down) / (h + h)).as_f64();
        let a = analytic[k].as_f64();
        let rel_err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel_err);
        entries.push(FdEntry {
            index: k,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(FdReport {
        max_rel_err,
        entries,
    })
}

/// Flattens potentials as `[unary..., pairwise...]`.
pub fn flatten_params<T: Scalar>(p: &Potentials<T>) -> Vec<T> {
    let mut v = p.unary.clone();
    v.extend_from_slice(p.pairwise.data());
    v
}

pub fn unflatten_params<T: Scalar>(template: &Potentials<T>, params: &[T]) -> Potentials<T> {
    let nu = template.unary.len();
    let data = params[nu..].to_vec();
    Potentials {
        grid: template.grid.clone(),
        unary: params[..nu].to_vec(),
        pairwise: match template.pairwise {
            Pairwise::Dense(_) => Pairwise::Dense(data),
            Pairwise::Tied(_) => Pairwise::Tied(data),
        },
    }
}

/// Cross-entropy loss of the unrolled pipeline at the given potentials.
pub fn unrolled_loss<T: Scalar>(
    p: &Potentials<T>,
    iterations: usize,
    mode: Mode<T>,
    target: &Labeling,
) -> Result<T> {
    let problem = Problem::new(p.clone())?;
    let (probs, _) = forward_unrolled(&problem, iterations, mode, TapePolicy::Store)?;
    Ok(cross_entropy_loss(&probs, p.grid.num_labels, target)?.0)
}

/// Loss and analytic gradient of the unrolled pipeline.
pub fn unrolled_loss_and_grad<T: Scalar>(
    p: &Potentials<T>,
    iterations: usize,
    mode: Mode<T>,
    target: &Labeling,
) -> Result<(T, GradientPair<T>)> {
    let problem = Problem::new(p.clone())?;
    let (probs, tape) = forward_unrolled(&problem, iterations, mode, TapePolicy::Store)?;
    let (loss, seed) = cross_entropy_loss(&probs, p.grid.num_labels, target)?;
    Ok((loss, backward_unrolled(&tape, &seed)?))
}

/// One configuration of the gradient check matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    pub strides: Vec<usize>,
    pub iterations: usize,
    /// `None` selects max mode.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub h: f64,
    pub tied: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub case: GradcheckCase,
    pub loss: f64,
    pub report: FdReport,
}

/// Runs the finite-difference check of the unrolled loss for one case.
///
/// The instance comes from the standard-normal generator at `case.seed`
/// (Potts with strength 0.5 when tied, plus a normal perturbation) and the
/// target from `random_labeling(case.seed + 1)`.
pub fn gradcheck(case: &GradcheckCase) -> Result<GradcheckOutcome> {
    let grid = GridSpec::new(case.height, case.width, case.num_labels, &case.strides);
    let p: Potentials<f64> = if case.tied {
        let mut p = generate_random(
            case.seed,
            &grid,
            Distribution::Potts {
                strength: 0.5,
                repulsive: false,
            },
        );
        let noise = generate_random::<f64>(case.seed ^ 0x5eed, &grid, Distribution::Normal);
        let data = p.pairwise.data_mut();
        for (k, x) in data.iter_mut().enumerate() {
            *x += 0.3 * noise.pairwise.data()[k];
        }
        p
    } else {
        generate_random(case.seed, &grid, Distribution::Normal)
    };
    let target = random_labeling(case.seed + 1, &grid);
    let mode = match case.gamma {
        Some(g) => Mode::smoothed(g)?,
        None => Mode::Max,
    };
    let (loss, grad) = unrolled_loss_and_grad(&p, case.iterations, mode, &target)?;
    let mut analytic = grad.grad_unary;
    analytic.extend(grad.grad_pairwise);
    let params = flatten_params(&p);
    let f = |x: &[f64]| {
        unrolled_loss(&unflatten_params(&p, x), case.iterations, mode, &target)
            .expect("perturbed instance stays valid")
    };
    let report = finite_diff_check(f, &params, &analytic, case.h)?;
    Ok(GradcheckOutcome {
        case: case.clone(),
        loss,
        report,
    })
}

/// The smoothed-mode matrix: `K ∈ {0, 1, 5}` by `γ ∈ {0.5, 1, 2}` on dense 3×3
/// grids with two labels, plus dense and tied 4×4 grids with three labels.
pub fn default_gradcheck_matrix(h: f64) -> Vec<GradcheckCase> {
    let base = GradcheckCase {
        height: 3,
        width: 3,
        num_labels: 2,
        strides: vec![1, 2],
        iterations: 0,
        gamma: Some(1.0),
        seed: 0,
        h,
        tied: false,
    };
    let mut cases = Vec::new();
    for (i, k) in [0, 1, 5].into_iter().enumerate() {
        for (j, gamma) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            cases.push(GradcheckCase {
                iterations: k,
                gamma: Some(gamma),
                seed: (3 * i + j) as u64,
                ..base.clone()
            });
        }
    }
    let big = GradcheckCase {
        height: 4,
        width: 4,
        num_labels: 3,
        ..base
    };
    for (k, tied) in [(1, false), (5, false), (2, true)] {
        cases.push(GradcheckCase {
            iterations: k,
            seed: 100 + k as u64,
            tied,
            ..big.clone()
        });
    }
    cases
}

/// Max-mode cases on random normal instances, which are tie-free almost surely.
pub fn max_mode_gradcheck_matrix(h: f64) -> Vec<GradcheckCase> {
    [0, 1, 5]
        .into_iter()
        .map(|k| GradcheckCase {
            height: 3,
            width: 3,
            num_labels: 2,
            strides: vec![1, 2],
            iterations: k,
            gamma: None,
            seed: 200 + k as u64,
            h,
            tied: false,
        })
        .collect()
}
