//! Timing harness for the chain DP and full solver iterations.

use std::time::Instant;

use serde::Serialize;

use crate::chain_dp::{chain_marginals, ChainSlice, Mode};
use crate::generate::{generate_random, Distribution, InstanceRng};
use crate::model::GridSpec;
use crate::parallel::with_workers;
use crate::solver::{solve_problem, Problem, SolveConfig, SolveResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainTiming {
    pub length: usize,
    /// Minimum over repeats of the mean time of one forward-backward pass.
    pub nanos: f64,
}

/// Times forward-backward passes over random chains of each length.
pub fn time_chain_dp(
    lengths: &[usize],
    num_labels: usize,
    mode: Mode<f64>,
    repeats: usize,
    seed: u64,
) -> Vec<ChainTiming> {
    let mut rng = InstanceRng::new(seed);
    lengths
        .iter()
        .map(|&n| {
            let unary: Vec<f64> = (0..n * num_labels).map(|_| rng.normal()).collect();
            let pairwise: Vec<f64> = (0..n.saturating_sub(1) * num_labels * num_labels)
                .map(|_| rng.normal())
                .collect();
            let slice = ChainSlice::from_flat(num_labels, &unary, &pairwise).expect("consistent shapes");
            // Enough passes per sample that one sample is well above timer resolution.
            let inner = (1 << 16) / (n * num_labels * num_labels).max(1) + 1;
            let mut best = f64::INFINITY;
            let mut sink = 0.0;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                for _ in 0..inner {
                    sink += chain_marginals(&slice, &mode).energy;
                }
                best = best.min(t.elapsed().as_nanos() as f64 / inner as f64);
            }
            std::hint::black_box(sink);
            ChainTiming {
                length: n,
                nanos: best,
            }
        })
        .collect()
}

/// Least-squares slope of `log nanos` against `log length`.
pub fn power_law_exponent(points: &[ChainTiming]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.length as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.nanos.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTiming {
    pub size: usize,
    pub workers: usize,
    /// Seconds per solver iteration (marginals plus update).
    pub seconds_per_iter: f64,
}

/// Standard-normal `size×size` problem with strides `{1, 2}`.
pub fn bench_problem(size: usize, num_labels: usize, seed: u64) -> Problem<f64> {
    let g = GridSpec::new(size, size, num_labels, &[1, 2]);
    Problem::new(generate_random(seed, &g, Distribution::Normal)).expect("generated instance is valid")
}

/// Runs `iters` solver iterations with no early stopping under `workers` threads.
pub fn run_fixed_iterations(
    problem: &Problem<f64>,
    mode: Mode<f64>,
    iters: usize,
    workers: usize,
) -> SolveResult<f64> {
    let cfg = SolveConfig {
        mode,
        max_iters: iters,
        agree_tol: -1.0,
        dual_tol: -1.0,
    };
    with_workers(Some(workers), || solve_problem(problem, &cfg)).expect("valid config")
}

pub fn time_iterations(
    problem: &Problem<f64>,
    mode: Mode<f64>,
    iters: usize,
    workers: usize,
) -> IterationTiming {
    let t = Instant::now();
    let r = run_fixed_iterations(problem, mode, iters, workers);
    IterationTiming {
        size: problem.potentials.grid.height,
        workers,
        seconds_per_iter: t.elapsed().as_secs_f64() / r.iterations.max(1) as f64,
    }
}

/// True when every numeric output matches bit for bit.
pub fn bitwise_equal(a: &SolveResult<f64>, b: &SolveResult<f64>) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.labeling == b.labeling
        && a.iterations == b.iterations
        && a.converged == b.converged
        && a.primal_energy.to_bits() == b.primal_energy.to_bits()
        && a.dual_bound.to_bits() == b.dual_bound.to_bits()
        && bits(&a.dual_trace) == bits(&b.dual_trace)
        && bits(&a.agreement_trace) == bits(&b.agreement_trace)
}

/// Two-column `size nanoseconds` table for plotting.
pub fn plot_table(points: &[ChainTiming]) -> String {
    points
        .iter()
        .map(|p| format!("{} {:.1}\n", p.length, p.nanos))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_exact_power_law() {
        let pts: Vec<ChainTiming> = [64usize, 128, 256, 512]
            .iter()
            .map(|&n| ChainTiming {
                length: n,
                nanos: 3.0 * (n as f64).powf(1.5),
            })
            .collect();
        assert!((power_law_exponent(&pts) - 1.5).abs() < 1e-12);
        assert_eq!(plot_table(&pts[..1]), "64 1536.0\n");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let p = bench_problem(6, 3, 2);
        let a = run_fixed_iterations(&p, Mode::Smoothed { gamma: 1.0 }, 4, 1);
        let b = run_fixed_iterations(&p, Mode::Smoothed { gamma: 1.0 }, 4, 3);
        assert_eq!(a.iterations, 4);
        assert!(bitwise_equal(&a, &b));
    }
}
