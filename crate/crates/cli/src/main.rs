use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ddcrf::autodiff::{
    default_gradcheck_matrix, gradcheck, max_mode_gradcheck_matrix, GradcheckCase,
};
use ddcrf::bench::{
    bench_problem, bitwise_equal, plot_table, power_law_exponent, run_fixed_iterations,
    time_chain_dp, time_iterations,
};
use ddcrf::generate::{generate_random, Distribution};
use ddcrf::io::{
    load_problem, save_problem, write_label_image, ConfigEcho, FileKind, ResultReport,
};
use ddcrf::oracle::brute_force_map;
use ddcrf::parallel::{with_workers, WORKERS_ENV};
use ddcrf::{solve, GridSpec, Mode, Potentials, Scalar, SolveConfig};

const EXIT_IO: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser)]
#[command(name = "ddcrf", version, about = "Dual-decomposition MAP inference on grid CRFs")]
struct Cli {
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fixed-point solver and write a result report.
    Solve(SolveArgs),
    /// Compare unrolled gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare the solver against exhaustive enumeration.
    Oracle(OracleArgs),
    /// Time chain DPs and solver iterations.
    Bench(BenchArgs),
    /// Write a random problem file.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Max,
    Smoothed,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Normal,
    Potts,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Precision {
    F64,
    F32,
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Problem file (text or binary); overrides the generator flags.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size as HEIGHTxWIDTH.
    #[arg(long, default_value = "4x4", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 3)]
    labels: usize,
    #[arg(long, default_value = "1,2", value_delimiter = ',')]
    strides: Vec<usize>,
    #[arg(long, value_enum, default_value = "normal")]
    dist: DistArg,
    /// Potts diagonal strength.
    #[arg(long, default_value_t = 2.0)]
    potts_strength: f64,
    /// Potts with a negative diagonal.
    #[arg(long)]
    repulsive: bool,
}

impl InstanceArgs {
    fn grid(&self) -> GridSpec {
        GridSpec::new(self.size.0, self.size.1, self.labels, &self.strides)
    }

    fn distribution(&self) -> Distribution {
        match self.dist {
            DistArg::Normal => Distribution::Normal,
            DistArg::Potts => Distribution::Potts {
                strength: self.potts_strength,
                repulsive: self.repulsive,
            },
        }
    }

    fn load<T: Scalar>(&self) -> ddcrf::Result<(Potentials<T>, String)> {
        match &self.problem {
            Some(path) => Ok((load_problem(path)?, path.display().to_string())),
            None => {
                let g = self.grid();
                g.validate()?;
                let source = format!(
                    "generated seed={} size={}x{} labels={} strides={:?} dist={}",
                    self.seed,
                    g.height,
                    g.width,
                    g.num_labels,
                    g.strides,
                    match self.distribution() {
                        Distribution::Normal => "normal".to_string(),
                        Distribution::Potts { strength, repulsive } => {
                            format!("potts({strength}, {})", if repulsive { "repulsive" } else { "attractive" })
                        }
                    }
                );
                Ok((generate_random(self.seed, &g, self.distribution()), source))
            }
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "max")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Relative dual improvement over 5 rounds below which the solve stops.
    #[arg(long, default_value_t = 1e-7)]
    dual_tol: f64,
}

impl SolverArgs {
    fn config<T: Scalar>(&self) -> ddcrf::Result<SolveConfig<T>> {
        let mode = match self.mode {
            ModeArg::Max => Mode::Max,
            ModeArg::Smoothed => Mode::smoothed(T::of(self.gamma))?,
        };
        let cfg = SolveConfig {
            mode,
            max_iters: self.iters,
            agree_tol: 0.0,
            dual_tol: self.dual_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Exit with status 2 unless the solve converges.
    #[arg(long)]
    require_converged: bool,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Labeling as a portable graymap.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "smoothed")]
    mode: ModeArg,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Unrolled iteration counts; replaces the default matrix when given.
    #[arg(long, value_delimiter = ',')]
    iters: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share pairwise tables per direction and stride.
    #[arg(long)]
    tied: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Number of generated instances, seeds `seed..seed+batch`.
    #[arg(long, default_value_t = 1)]
    batch: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Chain lengths for the single-chain timing.
    #[arg(long, default_value = "64,128,256,512,1024", value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    labels: usize,
    #[arg(long, default_value_t = 15)]
    repeats: usize,
    /// Square grid sizes for the full-iteration timing.
    #[arg(long, default_value = "64,128", value_delimiter = ',')]
    grids: Vec<usize>,
    /// Worker counts compared on every grid.
    #[arg(long = "worker-counts", default_value = "1,4", value_delimiter = ',')]
    worker_counts: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, value_enum, default_value = "smoothed")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two-column `length nanoseconds` data for plotting.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Output path; `.bin`/`.ddcr` write the binary container.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn mode_of(m: ModeArg, gamma: f64) -> ddcrf::Result<Mode<f64>> {
    match m {
        ModeArg::Max => Ok(Mode::Max),
        ModeArg::Smoothed => Mode::smoothed(gamma),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ddcrf::Error> for Failure {
    fn from(e: ddcrf::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

fn cmd_solve(args: &SolveArgs, workers: Option<usize>) -> Result<u8, Failure> {
    match args.precision {
        Precision::F64 => solve_with::<f64>(args, workers),
        Precision::F32 => solve_with::<f32>(args, workers),
    }
}

fn solve_with<T: Scalar>(args: &SolveArgs, workers: Option<usize>) -> Result<u8, Failure> {
    let (p, source) = args.instance.load::<T>()?;
    let cfg = args.solver.config::<T>()?;
    let result = with_workers(workers, || solve(&p, &cfg))?;
    let report = ResultReport::new(ConfigEcho::new(&cfg, workers, source), &p.grid, &result);
    match &args.report {
        Some(path) => fs::write(path, report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    if let Some(path) = &args.image {
        write_label_image(&p.grid, &result.labeling, path)?;
    }
    eprintln!(
        "converged={} iterations={} primal={:.9} dual={:.9} gap={:.3e}",
        report.converged, report.iterations, report.primal_energy, report.dual_bound, report.duality_gap
    );
    if args.require_converged && !result.converged {
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs, workers: Option<usize>) -> Result<u8, Failure> {
    let custom = args.iters.is_some() || args.gamma.is_some() || args.size.is_some() || args.labels.is_some() || args.tied;
    let cases: Vec<GradcheckCase> = if custom {
        let (height, width) = args.size.unwrap_or((3, 3));
        let gammas: Vec<Option<f64>> = match args.mode {
            ModeArg::Max => vec![None],
            ModeArg::Smoothed => args
                .gamma
                .clone()
                .unwrap_or_else(|| vec![0.5, 1.0, 2.0])
                .into_iter()
                .map(Some)
                .collect(),
        };
        let mut out = Vec::new();
        for &k in args.iters.as_deref().unwrap_or(&[0, 1, 5]) {
            for &gamma in &gammas {
                out.push(GradcheckCase {
                    height,
                    width,
                    num_labels: args.labels.unwrap_or(2),
                    strides: vec![1, 2].into_iter().filter(|&s| s < height.max(width)).collect(),
                    iterations: k,
                    gamma,
                    seed: args.seed,
                    h: args.h,
                    tied: args.tied,
                });
            }
        }
        out
    } else {
        match args.mode {
            ModeArg::Max => max_mode_gradcheck_matrix(args.h),
            ModeArg::Smoothed => default_gradcheck_matrix(args.h),
        }
    };

    println!("{:<7} {:>2} {:>2} {:<10} {:>6} {:>12}  status", "grid", "L", "K", "mode", "params", "max_rel_err");
    let mut failed = 0;
    for c in &cases {
        let out = with_workers(workers, || gradcheck(c))?;
        let bad: Vec<_> = out.report.failures(args.tolerance).collect();
        println!(
            "{:<7} {:>2} {:>2} {:<10} {:>6} {:>12.3e}  {}",
            format!("{}x{}", c.height, c.width),
            c.num_labels,
            c.iterations,
            c.gamma.map_or("max".to_string(), |g| format!("γ={g}")),
            out.report.entries.len(),
            out.report.max_rel_err,
            if bad.is_empty() { "ok" } else { "FAIL" }
        );
        for e in &bad {
            println!(
                "    entry {:>4}: analytic {:+.9e} numeric {:+.9e} rel_err {:.3e}",
                e.index, e.analytic, e.numeric, e.rel_err
            );
        }
        failed += usize::from(!bad.is_empty());
    }
    println!(
        "{} of {} cases under tolerance {:e} (h = {:e})",
        cases.len() - failed,
        cases.len(),
        args.tolerance,
        args.h
    );
    Ok(if failed == 0 { 0 } else { EXIT_GRADCHECK })
}

fn cmd_oracle(args: &OracleArgs, workers: Option<usize>) -> Result<u8, Failure> {
    let cfg = args.solver.config::<f64>()?;
    let mut violations = 0;
    let mut mismatches = 0;
    let batch = if args.instance.problem.is_some() { 1 } else { args.batch.max(1) };
    println!(
        "{:<8} {:>14} {:>14} {:>14} {:>9} {:>6} {:>6}",
        "instance", "oracle_map", "dual", "primal", "converged", "bound", "equal"
    );
    for k in 0..batch {
        let inst = InstanceArgs {
            seed: args.instance.seed + k,
            ..args.instance.clone()
        };
        let (p, _) = inst.load::<f64>()?;
        let (_, best) = brute_force_map(&p)?;
        let r = with_workers(workers, || solve(&p, &cfg))?;
        let min_dual = r.dual_trace.iter().copied().fold(f64::INFINITY, f64::min);
        let bound_ok = min_dual >= best - 1e-9;
        // A converged max-mode solve certifies optimality, so it must match the oracle.
        let checked = r.converged && matches!(cfg.mode, Mode::Max);
        let equal = !checked
            || ((r.primal_energy - best).abs() <= 1e-9 && (r.dual_bound - best).abs() <= 1e-9);
        violations += usize::from(!bound_ok);
        mismatches += usize::from(!equal);
        println!(
            "{:<8} {:>14.9} {:>14.9} {:>14.9} {:>9} {:>6} {:>6}",
            inst.seed,
            best,
            r.dual_bound,
            r.primal_energy,
            r.converged,
            if bound_ok { "ok" } else { "FAIL" },
            if !checked { "-" } else if equal { "ok" } else { "FAIL" }
        );
    }
    println!("{batch} instances, {violations} bound violations, {mismatches} equality failures");
    Ok(if violations > 0 || mismatches > 0 { EXIT_INVARIANT } else { 0 })
}

fn cmd_bench(args: &BenchArgs) -> Result<u8, Failure> {
    let mode = mode_of(args.mode, 1.0)?;
    let pts = time_chain_dp(&args.lengths, args.labels, mode, args.repeats, args.seed);
    println!("single-chain forward/backward, L = {}", args.labels);
    println!("{:>8} {:>14}", "length", "nanoseconds");
    for p in &pts {
        println!("{:>8} {:>14.1}", p.length, p.nanos);
    }
    if pts.len() >= 2 {
        println!("power-law exponent: {:.3}", power_law_exponent(&pts));
    }
    if let Some(path) = &args.plot {
        fs::write(path, plot_table(&pts))?;
    }

    let mut table = String::new();
    let mut deterministic = true;
    let _ = writeln!(table, "{:>6} {:>8} {:>14} {:>8}", "grid", "workers", "s/iteration", "speedup");
    for &size in &args.grids {
        let problem = bench_problem(size, args.labels, args.seed);
        let reference = run_fixed_iterations(&problem, mode, args.iters, 1);
        let mut base = None;
        for &w in &args.worker_counts {
            let timing = time_iterations(&problem, mode, args.iters, w);
            let speedup = *base.get_or_insert(timing.seconds_per_iter) / timing.seconds_per_iter;
            let _ = writeln!(
                table,
                "{:>6} {:>8} {:>14.6} {:>8.2}",
                size, w, timing.seconds_per_iter, speedup
            );
            deterministic &= bitwise_equal(&reference, &run_fixed_iterations(&problem, mode, args.iters, w));
        }
    }
    println!("\nfull iterations ({} per run), {} available cores", args.iters, std::thread::available_parallelism().map_or(1, |n| n.get()));
    print!("{table}");
    println!("results identical across worker counts: {deterministic}");
    Ok(if deterministic { 0 } else { EXIT_INVARIANT })
}

fn cmd_generate(args: &GenerateArgs) -> Result<u8, Failure> {
    let kind = FileKind::from_path(&args.out);
    match args.precision {
        Precision::F64 => {
            let (p, _) = args.instance.load::<f64>()?;
            save_problem(&p, &args.out, kind)?;
        }
        Precision::F32 => {
            let (p, _) = args.instance.load::<f32>()?;
            save_problem(&p, &args.out, kind)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers.filter(|&n| n > 0);
    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a, workers),
        Command::Gradcheck(a) => cmd_gradcheck(a, workers),
        Command::Oracle(a) => cmd_oracle(a, workers),
        Command::Bench(a) => cmd_bench(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
