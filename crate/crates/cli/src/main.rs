//! Command-line front end: assemble finite-element eigenproblems, compute
//! eigenvalues by spectrum slicing, query eigenvalue counts, benchmark a
//! refinement sweep and export matrices.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 factorization
//! failure, 3 I/O failure. Output schemas are documented in the README;
//! all floating-point values print with 17 significant digits so they
//! round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use h2slice_core::h2::{self, TruncationControl};
use h2slice_core::mesh::Geometry;
use h2slice_core::problem::{build_problem, Problem, ProblemConfig};
use h2slice_core::slicing::{self, SliceError, SliceOptions};

mod output;

use output::{fmt_f64, JsonObject};

#[derive(Parser)]
#[command(name = "h2slice", version, about = "Eigenvalues of symmetric-definite pencils by slicing the spectrum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a problem and optionally write mesh and matrix files.
    Assemble(AssembleArgs),
    /// Compute selected eigenvalues.
    Eig(EigArgs),
    /// Count the eigenvalues below a shift.
    Nu(NuArgs),
    /// Time one count evaluation per refinement level.
    Bench(BenchArgs),
    /// Assemble and write the hierarchical matrix in binary form.
    Export(ExportArgs),
    /// Load a binary matrix dump and print its statistics.
    Import(ImportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GeometryArg {
    #[value(name = "unit_square")]
    UnitSquare,
    #[value(name = "unit_circle")]
    UnitCircle,
    #[value(name = "l_shape")]
    LShape,
    #[value(name = "u_shape")]
    UShape,
}

impl From<GeometryArg> for Geometry {
    fn from(g: GeometryArg) -> Geometry {
        match g {
            GeometryArg::UnitSquare => Geometry::UnitSquare,
            GeometryArg::UnitCircle => Geometry::UnitCircle,
            GeometryArg::LShape => Geometry::LShape,
            GeometryArg::UShape => Geometry::UShape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

/// Flags shared by every problem-building subcommand.
#[derive(Args, Debug, Clone)]
struct ProblemArgs {
    #[arg(long, value_enum)]
    geometry: GeometryArg,
    /// Number of regular refinements of the base mesh.
    #[arg(long, default_value_t = 0)]
    refine: usize,
    /// Admissibility parameter.
    #[arg(long, default_value_t = h2slice_core::cluster::DEFAULT_ETA)]
    eta: f64,
    /// Maximum cluster size at the leaves.
    #[arg(long, default_value_t = h2slice_core::cluster::DEFAULT_LEAF_SIZE)]
    leaf_size: usize,
}

impl ProblemArgs {
    fn build(&self) -> Result<Problem, CliError> {
        if self.eta <= 0.0 {
            return Err(CliError::Config("eta must be positive".into()));
        }
        if self.leaf_size == 0 {
            return Err(CliError::Config("leaf-size must be at least 1".into()));
        }
        let cfg = ProblemConfig {
            geometry: self.geometry.into(),
            refinements: self.refine,
            eta: self.eta,
            leaf_size: self.leaf_size,
        };
        build_problem(&cfg).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Args, Debug, Clone)]
struct SolveArgs {
    /// Blockwise compression tolerance.
    #[arg(long, default_value_t = 1e-8)]
    eps_comp: f64,
    /// Width of the final eigenvalue intervals.
    #[arg(long, default_value_t = 1e-5)]
    eps_ev: f64,
    /// Solve (A - lambda B) x = 0 with the mass matrix instead of A - lambda I.
    #[arg(long)]
    generalized: bool,
    /// Worker threads; defaults to H2SLICE_WORKERS or 1.
    #[arg(long)]
    workers: Option<usize>,
    /// Rank cap for adaptive truncation.
    #[arg(long, default_value_t = h2::DEFAULT_MAX_RANK)]
    max_rank: usize,
    /// Recorded in the output; random data is only used by test tooling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print zeros instead of wall-clock fields (byte-reproducible output).
    #[arg(long)]
    omit_timings: bool,
}

impl SolveArgs {
    fn control(&self) -> Result<TruncationControl, CliError> {
        if !(self.eps_comp > 0.0 && self.eps_comp < 1.0) {
            return Err(CliError::Config("eps-comp must be in (0,1)".into()));
        }
        if !(self.eps_ev > 0.0 && self.eps_ev < 1.0) {
            return Err(CliError::Config("eps-ev must be in (0,1)".into()));
        }
        if self.max_rank == 0 {
            return Err(CliError::Config("max-rank must be at least 1".into()));
        }
        let mut control = TruncationControl::weighted(self.eps_comp);
        control.max_rank = self.max_rank;
        Ok(control)
    }

    fn workers(&self) -> usize {
        self.workers
            .or_else(|| {
                std::env::var("H2SLICE_WORKERS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(1)
            .max(1)
    }

    fn time_ms(&self, seconds: f64) -> f64 {
        if self.omit_timings {
            0.0
        } else {
            seconds * 1e3
        }
    }
}

#[derive(Args, Debug)]
struct AssembleArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Write the mesh in plain-text form.
    #[arg(long)]
    out_mesh: Option<String>,
    /// Write the stiffness matrix in MatrixMarket form.
    #[arg(long)]
    out_stiffness: Option<String>,
    /// Write the mass matrix in MatrixMarket form.
    #[arg(long)]
    out_mass: Option<String>,
}

#[derive(Args, Debug)]
struct EigArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Number of smallest eigenvalues (shorthand for --index-lo 1 --index-hi COUNT).
    #[arg(long, conflicts_with_all = ["index_lo", "index_hi"])]
    count: Option<usize>,
    #[arg(long, requires = "index_hi")]
    index_lo: Option<usize>,
    #[arg(long, requires = "index_lo")]
    index_hi: Option<usize>,
    /// Target eigenvalues per scheduler task (fix it to make runs
    /// bit-identical across worker counts).
    #[arg(long)]
    task_granularity: Option<usize>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    output_format: OutputFormat,
}

#[derive(Args, Debug)]
struct NuArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Shift at which to count eigenvalues.
    #[arg(long, allow_hyphen_values = true)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Comma-separated refinement levels to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    refine_list: Vec<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Output path for the binary matrix dump.
    #[arg(long)]
    out: String,
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// Path of a binary matrix dump.
    #[arg(long = "in")]
    input: String,
    /// Apply the matrix to a deterministic vector and print the result's
    /// checksum and first entries.
    #[arg(long)]
    check_matvec: bool,
}

enum CliError {
    Config(String),
    Factorization(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(1),
            CliError::Factorization(_) => ExitCode::from(2),
            CliError::Io(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Factorization(m) | CliError::Io(m) => m,
        }
    }
}

fn slice_error(e: SliceError) -> CliError {
    match e {
        SliceError::FactorizationFailed { .. } | SliceError::BoundsSearchFailed => {
            CliError::Factorization(e.to_string())
        }
        other => CliError::Config(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Assemble(args) => cmd_assemble(args),
        Command::Eig(args) => cmd_eig(args),
        Command::Nu(args) => cmd_nu(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Export(args) => cmd_export(args),
        Command::Import(args) => cmd_import(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn cmd_assemble(args: AssembleArgs) -> Result<(), CliError> {
    let prob = args.problem.build()?;
    if let Some(path) = &args.out_mesh {
        let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::Io(e.to_string()))?);
        prob.mesh.write_text(&mut w).map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(path) = &args.out_stiffness {
        let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::Io(e.to_string()))?);
        prob.stiffness
            .write_matrix_market(&mut w)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(path) = &args.out_mass {
        let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::Io(e.to_string()))?);
        prob.mass
            .write_matrix_market(&mut w)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let stats = prob.btree.stats();
    let storage = prob.matrix.storage_report();
    let mut obj = JsonObject::new();
    obj.push_str("geometry", Geometry::from(args.problem.geometry).name());
    obj.push_usize("refinements", args.problem.refine);
    obj.push_usize("n", prob.dim());
    obj.push_usize("vertices", prob.mesh.vertices.len());
    obj.push_usize("triangles", prob.mesh.triangles.len());
    obj.push_usize("nnz_stiffness", prob.stiffness.nnz());
    obj.push_raw("block_tree", &stats.to_json());
    obj.push_usize("storage_entries", storage.total);
    println!("{}", obj.finish());
    Ok(())
}

fn resolve_range(args: &EigArgs, n: usize) -> Result<(usize, usize), CliError> {
    let (lo, hi) = match (args.count, args.index_lo, args.index_hi) {
        (Some(c), _, _) => (1, c),
        (None, Some(lo), Some(hi)) => (lo, hi),
        _ => (1, 8),
    };
    if lo < 1 || lo > hi || hi > n {
        return Err(CliError::Config(format!(
            "invalid index range {lo}..={hi} for dimension {n}"
        )));
    }
    Ok((lo, hi))
}

fn config_json(problem: &ProblemArgs, solve: &SolveArgs, lo: usize, hi: usize, workers: usize) -> String {
    let mut obj = JsonObject::new();
    obj.push_str("geometry", Geometry::from(problem.geometry).name());
    obj.push_usize("refinements", problem.refine);
    obj.push_f64("eta", problem.eta);
    obj.push_usize("leaf_size", problem.leaf_size);
    obj.push_f64("eps_comp", solve.eps_comp);
    obj.push_f64("eps_ev", solve.eps_ev);
    obj.push_bool("generalized", solve.generalized);
    obj.push_usize("index_lo", lo);
    obj.push_usize("index_hi", hi);
    obj.push_usize("workers", workers);
    obj.push_usize("max_rank", solve.max_rank);
    obj.push_usize("seed", solve.seed as usize);
    obj.finish()
}

fn cmd_eig(args: EigArgs) -> Result<(), CliError> {
    if args.count == Some(0) {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let control = args.solve.control()?;
    let prob = args.problem.build()?;
    let n = prob.dim();
    let (lo, hi) = resolve_range(&args, n)?;
    let workers = args.solve.workers();
    let pencil = prob.pencil(args.solve.generalized).map_err(slice_error)?;
    let opts = SliceOptions {
        eps_ev: args.solve.eps_ev,
        control,
        workers,
        task_granularity: args.task_granularity,
    };
    let t0 = Instant::now();
    let run = slicing::compute_eigenvalues(&pencil, lo, hi, &opts).map_err(slice_error)?;
    let t_total = t0.elapsed().as_secs_f64();

    let mut failed = false;
    let mut max_rank = 0usize;
    let eval_times = &run.nu_eval_times;
    let mean = if eval_times.is_empty() {
        0.0
    } else {
        eval_times.iter().sum::<f64>() / eval_times.len() as f64
    };
    let std = if eval_times.len() < 2 {
        0.0
    } else {
        (eval_times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / (eval_times.len() - 1) as f64)
            .sqrt()
    };

    let mut records = Vec::new();
    for o in &run.outcomes {
        match &o.result {
            Ok(r) => {
                max_rank = max_rank.max(r.max_rank_seen);
                records.push((o.index, Ok(r.clone())));
            }
            Err(e) => {
                failed = true;
                records.push((o.index, Err(e.to_string())));
            }
        }
    }

    match args.output_format {
        OutputFormat::Json => {
            let mut results = String::from("[");
            for (i, (index, rec)) in records.iter().enumerate() {
                if i > 0 {
                    results.push(',');
                }
                let mut obj = JsonObject::new();
                obj.push_usize("index", *index);
                match rec {
                    Ok(r) => {
                        obj.push_f64("lower", r.lower);
                        obj.push_f64("upper", r.upper);
                        obj.push_f64("value", r.estimate);
                        obj.push_usize("nu_evals", r.nu_evaluations);
                        obj.push_f64("time_ms", args.solve.time_ms(r.wall_time.as_secs_f64()));
                    }
                    Err(msg) => obj.push_str("error", msg),
                }
                results.push_str(&obj.finish());
            }
            results.push(']');
            let mut totals = JsonObject::new();
            totals.push_usize("n", n);
            totals.push_f64("t_total_ms", args.solve.time_ms(t_total));
            totals.push_f64("t_per_slice_mean_ms", args.solve.time_ms(mean));
            totals.push_f64("t_per_slice_std_ms", args.solve.time_ms(std));
            totals.push_usize("max_rank", max_rank);
            let mut top = JsonObject::new();
            top.push_raw("config", &config_json(&args.problem, &args.solve, lo, hi, workers));
            top.push_usize("n", n);
            top.push_raw("results", &results);
            top.push_raw("totals", &totals.finish());
            println!("{}", top.finish());
        }
        OutputFormat::Csv => {
            println!("index,lower,upper,value,nu_evals,time_ms");
            for (index, rec) in &records {
                match rec {
                    Ok(r) => println!(
                        "{},{},{},{},{},{}",
                        index,
                        fmt_f64(r.lower),
                        fmt_f64(r.upper),
                        fmt_f64(r.estimate),
                        r.nu_evaluations,
                        fmt_f64(args.solve.time_ms(r.wall_time.as_secs_f64()))
                    ),
                    Err(msg) => println!("{},,,error: {msg},,", index),
                }
            }
            println!(
                "totals,{},{},{},{},{}",
                n,
                fmt_f64(args.solve.time_ms(t_total)),
                fmt_f64(args.solve.time_ms(mean)),
                fmt_f64(args.solve.time_ms(std)),
                max_rank
            );
        }
    }
    if failed {
        return Err(CliError::Factorization("one or more tasks failed".into()));
    }
    Ok(())
}

fn cmd_nu(args: NuArgs) -> Result<(), CliError> {
    let control = args.solve.control()?;
    let prob = args.problem.build()?;
    let pencil = prob.pencil(args.solve.generalized).map_err(slice_error)?;
    let t0 = Instant::now();
    let eval = slicing::nu(&pencil, args.sigma, &control).map_err(slice_error)?;
    let dt = t0.elapsed().as_secs_f64();
    println!("{}", eval.count);
    println!("time_ms {}", fmt_f64(args.solve.time_ms(dt)));
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let control = args.solve.control()?;
    if args.refine_list.is_empty() {
        return Err(CliError::Config("refine-list must not be empty".into()));
    }
    println!("n,t_single_slice_s,storage_entries,max_rank");
    for &r in &args.refine_list {
        let mut pargs = args.problem.clone();
        pargs.refine = r;
        let prob = pargs.build()?;
        let pencil = prob.pencil(args.solve.generalized).map_err(slice_error)?;
        // canonical interior shift: a quarter of the mean diagonal value
        let sigma = {
            let a = &prob.stiffness;
            let trace: f64 = (0..a.dim()).map(|i| a.get(i, i)).sum();
            0.25 * trace / a.dim() as f64
        };
        let mut best_rank = 0;
        let mut times = Vec::new();
        for _ in 0..3 {
            let t0 = Instant::now();
            let eval = slicing::nu(&pencil, sigma, &control).map_err(slice_error)?;
            times.push(t0.elapsed().as_secs_f64());
            best_rank = best_rank.max(eval.max_rank);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        let storage = prob.matrix.storage_report();
        println!(
            "{},{},{},{}",
            prob.dim(),
            fmt_f64(if args.solve.omit_timings { 0.0 } else { median }),
            storage.total,
            best_rank
        );
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let prob = args.problem.build()?;
    let file = File::create(&args.out).map_err(|e| CliError::Io(e.to_string()))?;
    let mut w = BufWriter::new(file);
    h2::io::write_h2(&prob.matrix, &mut w).map_err(|e| CliError::Io(e.to_string()))?;
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let mut obj = JsonObject::new();
    obj.push_usize("n", prob.dim());
    obj.push_str("path", &args.out);
    obj.push_usize("storage_entries", prob.matrix.storage_report().total);
    println!("{}", obj.finish());
    Ok(())
}

fn cmd_import(args: ImportArgs) -> Result<(), CliError> {
    let file = File::open(&args.input).map_err(|e| CliError::Io(e.to_string()))?;
    let mut r = BufReader::new(file);
    let m = h2::io::read_h2(&mut r).map_err(|e| CliError::Io(e.to_string()))?;
    let storage = m.storage_report();
    let mut obj = JsonObject::new();
    obj.push_usize("n", m.dim());
    obj.push_bool("symmetric", m.symmetric);
    obj.push_usize("max_rank", m.max_rank());
    obj.push_usize("coupling_entries", storage.coupling_entries);
    obj.push_usize("nearfield_entries", storage.nearfield_entries);
    obj.push_usize("basis_entries", storage.basis_entries);
    obj.push_usize("storage_entries", storage.total);
    println!("{}", obj.finish());
    if args.check_matvec {
        let n = m.dim();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = m.matvec(&x);
        let checksum: f64 = y.iter().sum();
        println!("matvec_checksum {}", fmt_f64(checksum));
        for (i, v) in y.iter().take(4).enumerate() {
            println!("y[{i}] {}", fmt_f64(*v));
        }
    }
    Ok(())
}
