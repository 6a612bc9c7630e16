//! `winolab` — kernel generation, planning, convolution on tensor files,
//! complexity sweeps, and verification runs.
//!
//! Exit codes: 0 success, 1 usage or domain error, 2 verification failure,
//! 3 I/O error. Every subcommand is deterministic for a fixed flag set and
//! seed; the version banner on stdout can be silenced with `--quiet`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winolab_core::engines::{self, ConvSpec};
use winolab_core::kerngen::{self, KernelJson};
use winolab_core::planner::{self, Plan};
use winolab_core::tensor::Tensor;
use winolab_core::wten;
use winolab_core::{
    count_mults_with, measure_error, AnalysisError, EngineKind, NestedCounting, OlaCounting,
    Precision, RatMat,
};

#[derive(Parser)]
#[command(
    name = "winolab",
    version,
    about = "Fast convolution from small Winograd kernels: overlap-add, nesting, and strided plans"
)]
struct Cli {
    /// Suppress the version banner.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the transform triple (AT, G, BT) of a Winograd kernel F(m, r).
    GenKernel(GenKernelArgs),
    /// Decompose a (filter, stride) problem into a kernel expression tree.
    Plan(PlanArgs),
    /// Convolve an input tensor file with a filter tensor file.
    Conv(ConvArgs),
    /// Tabulate multiplications per output across filters, kernels, methods.
    Cost(CostArgs),
    /// Check every engine against the brute-force reference on random data.
    Verify(VerifyArgs),
    /// Measure floating-point error of the engines against an f64 reference.
    Error(ErrorArgs),
}

#[derive(Args)]
struct GenKernelArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    r: usize,
    /// Output format: text (rational + decimal) or json.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct PlanArgs {
    /// Filter size: a side length (`5`) or rectangular (`7x5`).
    #[arg(long)]
    filter: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Kernel as `m,r`.
    #[arg(long, default_value = "3,3", value_parser = parse_kernel)]
    kernel: (usize, usize),
    /// Print the reverse-Polish serialization instead of the tree.
    #[arg(long)]
    rpn: bool,
    /// Print the plan as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ConvArgs {
    /// Engine: native, direct_winograd, ola, nested, or plan.
    #[arg(long, value_parser = parse_engine)]
    engine: EngineKind,
    /// Input tensor (.wten or .csv).
    #[arg(long)]
    input: PathBuf,
    /// Filter tensor (.wten or .csv).
    #[arg(long)]
    filter: PathBuf,
    /// Output tensor path (.wten or .csv).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Kernel as `m,r` (required by every engine except native).
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<(usize, usize)>,
    /// Force a nesting depth instead of the smallest covering depth.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct CostArgs {
    /// Filter side(s); repeat the flag for several. Default: 3 through 12.
    #[arg(long = "filter")]
    filters: Vec<usize>,
    /// Kernel(s) as `m,r`; repeatable. Default: 2,2 3,3 4,4 6,3.
    #[arg(long = "kernel", value_parser = parse_kernel)]
    kernels: Vec<(usize, usize)>,
    /// Method(s); repeatable. Default: direct_winograd, ola, nested.
    #[arg(long = "method", value_parser = parse_engine)]
    methods: Vec<EngineKind>,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Write the sweep as CSV to this path instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Nested counting convention: `same` (every level the same kernel) or
    /// `mixed` (depth-2 with a trimmed outer kernel).
    #[arg(long, default_value = "same", value_parser = parse_nested_counting)]
    nested_counting: NestedCounting,
    /// Charge overlap-add's trailing short block a trimmed kernel.
    #[arg(long)]
    ola_exact: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct ErrorArgs {
    #[arg(long, default_value_t = 9)]
    filter: usize,
    /// Kernel(s) as `m,r`; repeatable. Default: 2,2 3,3 4,4.
    #[arg(long = "kernel", value_parser = parse_kernel)]
    kernels: Vec<(usize, usize)>,
    /// Method(s); repeatable. Default: nested, direct_winograd.
    #[arg(long = "method", value_parser = parse_engine)]
    methods: Vec<EngineKind>,
    /// Precision: 32 or 64.
    #[arg(long, default_value_t = 32)]
    precision: u32,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    dims: usize,
}

fn parse_kernel(s: &str) -> Result<(usize, usize), String> {
    let (m, r) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `m,r`, got `{s}`"))?;
    let m = m.trim().parse().map_err(|e| format!("bad m: {e}"))?;
    let r = r.trim().parse().map_err(|e| format!("bad r: {e}"))?;
    Ok((m, r))
}

fn parse_engine(s: &str) -> Result<EngineKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_nested_counting(s: &str) -> Result<NestedCounting, String> {
    match s {
        "same" => Ok(NestedCounting::SameKernel),
        "mixed" => Ok(NestedCounting::MixedOuter),
        other => Err(format!("expected `same` or `mixed`, got `{other}`")),
    }
}

/// Errors carrying their process exit code.
enum Failure {
    /// Domain/usage problems: exit 1.
    Usage(String),
    /// A verification run found mismatches: exit 2.
    Verification(String),
    /// File-system problems: exit 3.
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Io(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Verification(m) | Failure::Io(m) => m,
        }
    }
}

macro_rules! usage_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(
    winolab_core::KernelError,
    winolab_core::EngineError,
    winolab_core::PlanError,
    AnalysisError,
    winolab_core::TensorError
);

impl From<wten::WtenError> for Failure {
    fn from(e: wten::WtenError) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pager/`head` closes the pipe, like other
    // line-oriented Unix tools, instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    init_thread_pool();
    if !cli.quiet {
        println!("winolab {}", env!("CARGO_PKG_VERSION"));
    }

    let result = match cli.cmd {
        Cmd::GenKernel(a) => cmd_gen_kernel(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Conv(a) => cmd_conv(a),
        Cmd::Cost(a) => cmd_cost(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Error(a) => cmd_error(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// `WINOLAB_THREADS` caps the rayon pool used by `verify` and `error`.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("WINOLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// gen-kernel

fn format_rat_matrix(name: &str, mat: &RatMat) -> String {
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(mat.rows());
    let mut width = 0;
    for i in 0..mat.rows() {
        let mut row = Vec::with_capacity(mat.cols());
        for j in 0..mat.cols() {
            let s = mat.get(i, j).to_string();
            width = width.max(s.len());
            row.push(s);
        }
        cells.push(row);
    }
    let mut out = format!("{name} ({}x{}):\n", mat.rows(), mat.cols());
    for row in &cells {
        out.push_str("  [");
        for (j, cell) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{cell:>width$}");
        }
        out.push_str("]\n");
    }
    out
}

fn format_float_matrix(mat: &RatMat) -> String {
    let f = mat.to_float::<f64>();
    let mut out = String::new();
    for i in 0..f.rows() {
        out.push_str("  [");
        for j in 0..f.cols() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", f.get(i, j));
        }
        out.push_str("]\n");
    }
    out
}

fn cmd_gen_kernel(a: GenKernelArgs) -> Result<(), Failure> {
    let k = kerngen::generate_kernel(a.m, a.r)?;
    match a.format.as_str() {
        "json" => {
            let json = KernelJson::from(&k);
            println!("{}", serde_json::to_string_pretty(&json).expect("kernel serializes"));
        }
        "text" => {
            let pts: Vec<String> = k.points.iter().map(|p| p.to_string()).collect();
            println!("F({}, {}): l = {}, points [{}]", k.m, k.r, k.l, pts.join(", "));
            for (name, mat) in [("AT", &k.at), ("G", &k.g), ("BT", &k.bt)] {
                print!("{}", format_rat_matrix(name, mat));
                print!("{}", format_float_matrix(mat));
            }
        }
        other => {
            return Err(Failure::Usage(format!("unknown format `{other}` (text|json)")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plan

fn parse_filter_size(s: &str) -> Result<(usize, Option<usize>), Failure> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| Failure::Usage(format!("bad filter size `{t}`: {e}")))
    };
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, Some(parse(b)?))),
        None => Ok((parse(s)?, None)),
    }
}

fn cmd_plan(a: PlanArgs) -> Result<(), Failure> {
    let (rows, cols) = parse_filter_size(&a.filter)?;
    let (m, r) = a.kernel;
    let make = |len: usize| -> Result<Plan, Failure> {
        Ok(planner::resolve_lengths(&planner::decompose(len, a.stride, m, r)?)?)
    };
    let row_plan = make(rows)?;
    match cols {
        None => {
            if a.rpn {
                println!("{}", planner::to_rpn_string(&row_plan));
            } else if a.json {
                println!("{}", serde_json::to_string_pretty(&row_plan).expect("plan serializes"));
            } else {
                println!("{row_plan}");
            }
        }
        Some(c) => {
            let col_plan = make(c)?;
            if a.rpn {
                println!("rows: {}", planner::to_rpn_string(&row_plan));
                println!("cols: {}", planner::to_rpn_string(&col_plan));
            } else if a.json {
                let both = serde_json::json!({ "rows": row_plan, "cols": col_plan });
                println!("{}", serde_json::to_string_pretty(&both).expect("plans serialize"));
            } else {
                println!("rows: {row_plan}");
                println!("cols: {col_plan}");
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv

/// Lift bare tensors into the channeled layout the engines expect.
/// Returns the channeled pair plus the number of leading channel axes the
/// *input* actually had, so the output can be written at the same rank.
fn normalize_ranks(x: Tensor, w: Tensor) -> Result<(Tensor, Tensor, bool), Failure> {
    // The filter file decides the spatial rank: rank 1/2 = bare (single
    // channel), rank 3 = [Cout, Cin, r], rank 4 = [Cout, Cin, h, w].
    let (w, dims) = match w.rank() {
        1 => {
            let shape = vec![1, 1, w.shape()[0]];
            (w.reshaped(shape)?, 1)
        }
        2 => {
            let shape = vec![1, 1, w.shape()[0], w.shape()[1]];
            (w.reshaped(shape)?, 2)
        }
        3 => (w, 1),
        4 => (w, 2),
        n => return Err(Failure::Usage(format!("filter rank {n} unsupported (1-4)"))),
    };
    let (x, bare_input) = match (x.rank(), dims) {
        (1, 1) => {
            let shape = vec![1, x.shape()[0]];
            (x.reshaped(shape)?, true)
        }
        (2, 1) => (x, false), // already [Cin, W]
        (2, 2) => {
            let shape = vec![1, x.shape()[0], x.shape()[1]];
            (x.reshaped(shape)?, true)
        }
        (3, 2) => (x, false), // already [Cin, H, W]
        (n, d) => {
            return Err(Failure::Usage(format!(
                "input rank {n} does not fit a {d}-D filter"
            )));
        }
    };
    Ok((x, w, bare_input))
}

fn cmd_conv(a: ConvArgs) -> Result<(), Failure> {
    let x = wten::read_tensor(&a.input)?;
    let w = wten::read_tensor(&a.filter)?;
    let (x, w, bare_input) = normalize_ranks(x, w)?;
    let spec = ConvSpec::infer(&x, &w, a.stride)?;

    let kernel = match a.kernel {
        Some((m, r)) => Some(kerngen::generate_kernel(m, r)?.to_float()),
        None => None,
    };
    if a.engine != EngineKind::Native && kernel.is_none() {
        return Err(Failure::Usage(format!(
            "engine `{}` needs --kernel m,r",
            a.engine
        )));
    }

    let y = match a.engine {
        EngineKind::Plan => {
            planner::plan_convolve(&x, &w, &spec, kernel.as_ref().expect("checked above"))?
        }
        kind => engines::convolve(kind, &x, &w, &spec, kernel.as_ref(), a.depth)?,
    };

    let y = if bare_input {
        // Single-channel in, single-channel out: drop the channel axis again.
        let spatial = y.shape()[1..].to_vec();
        y.reshaped(spatial)?
    } else {
        y
    };
    wten::write_tensor(&a.output, &y)?;
    println!("wrote {} shape {:?}", a.output.display(), y.shape());
    Ok(())
}

// ---------------------------------------------------------------------------
// cost

fn cmd_cost(a: CostArgs) -> Result<(), Failure> {
    let filters = if a.filters.is_empty() { (3..=12).collect() } else { a.filters.clone() };
    let kernels = if a.kernels.is_empty() {
        vec![(2, 2), (3, 3), (4, 4), (6, 3)]
    } else {
        a.kernels.clone()
    };
    let methods = if a.methods.is_empty() {
        vec![EngineKind::DirectWinograd, EngineKind::Ola, EngineKind::Nested]
    } else {
        a.methods.clone()
    };
    let ola = if a.ola_exact { OlaCounting::ExactBlocks } else { OlaCounting::FullBlocks };

    let mut reports = Vec::new();
    for &filter in &filters {
        for &(m, r) in &kernels {
            for &method in &methods {
                match count_mults_with(method, filter, m, r, a.dims, a.stride, a.nested_counting, ola)
                {
                    Ok(rep) => reports.push(rep),
                    Err(_) => continue, // cell has no algorithm under this convention
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(Failure::Usage("no valid (filter, kernel, method) cells".into()));
    }

    let single_cell = filters.len() == 1 && kernels.len() == 1 && a.csv.is_none();
    if single_cell {
        for rep in &reports {
            let mpo = *rep.mults_per_output.numer() as f64 / *rep.mults_per_output.denom() as f64;
            print!(
                "{:<16} F({},{}) R={} dims={} stride={}: {} mults / {} outputs = {mpo} per output",
                rep.method.to_string(),
                rep.kernel_m,
                rep.kernel_r,
                rep.filter_side,
                rep.dims,
                rep.stride,
                rep.mults_per_tile,
                rep.outputs_per_tile,
            );
            match rep.adds_per_output {
                Some(adds) => {
                    println!(" ({} adds per output)", *adds.numer() as f64 / *adds.denom() as f64)
                }
                None => println!(),
            }
        }
        let find = |kind| reports.iter().find(|rep| rep.method == kind);
        if let (Some(o), Some(n)) = (find(EngineKind::Ola), find(EngineKind::Nested)) {
            let ratio = o.mults_per_output / n.mults_per_output;
            println!(
                "ola/nested ratio: {} = {}",
                ratio,
                *ratio.numer() as f64 / *ratio.denom() as f64
            );
        }
    } else {
        let csv = winolab_core::to_csv(&reports);
        match &a.csv {
            Some(path) => {
                std::fs::write(path, &csv).map_err(|e| Failure::Io(e.to_string()))?;
                println!("wrote {} ({} rows)", path.display(), reports.len());
            }
            None => print!("{csv}"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

struct VerifyCell {
    label: &'static str,
    m: usize,
    r: usize,
    filter: usize,
    stride: usize,
}

fn verify_grid() -> Vec<VerifyCell> {
    let mut cells = Vec::new();
    for &(m, r) in &[(2usize, 2usize), (3, 3), (4, 4), (6, 3)] {
        for filter in 3..=12 {
            cells.push(VerifyCell { label: "ola", m, r, filter, stride: 1 });
            cells.push(VerifyCell { label: "nested", m, r, filter, stride: 1 });
            cells.push(VerifyCell { label: "plan", m, r, filter, stride: 1 });
            if filter <= r {
                cells.push(VerifyCell { label: "direct", m, r, filter, stride: 1 });
            }
            for stride in 2..=3 {
                cells.push(VerifyCell { label: "stride", m, r, filter, stride });
                cells.push(VerifyCell { label: "plan", m, r, filter, stride });
            }
        }
    }
    cells
}

fn run_verify_cell(cell: &VerifyCell, trials: usize, seed: u64) -> Result<f64, Failure> {
    use winolab_core::tensor::TensorOf;
    let kernel = kerngen::generate_kernel(cell.m, cell.r)?.to_float();
    let out = 6usize;
    let side = (out - 1) * cell.stride + cell.filter;
    let cell_seed = seed
        ^ (cell.m as u64) << 40
        ^ (cell.r as u64) << 32
        ^ (cell.filter as u64) << 16
        ^ (cell.stride as u64) << 8
        ^ cell.label.len() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = random_tensor(&mut rng, vec![1, side, side]);
        let w = random_tensor(&mut rng, vec![1, 1, cell.filter, cell.filter]);
        let spec = ConvSpec::infer(&x, &w, cell.stride)?;
        let reference = engines::direct_conv(&x, &w, &spec)?;
        let y: TensorOf<f64> = match cell.label {
            "ola" => engines::ola_conv(&x, &w, &spec, &kernel)?,
            "nested" => engines::nested_conv(&x, &w, &spec, &kernel, None)?,
            "direct" => engines::winograd_conv(&x, &w, &spec, &kernel)?,
            "stride" => engines::strided_conv(&x, &w, &spec, &kernel)?,
            "plan" => planner::plan_convolve(&x, &w, &spec, &kernel)?,
            other => unreachable!("unknown cell label {other}"),
        };
        let scale = reference.max_abs();
        for (a, b) in y.data().iter().zip(reference.data()) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    use rayon::prelude::*;
    let cells = verify_grid();
    let results: Vec<(String, Result<f64, Failure>)> = cells
        .par_iter()
        .map(|cell| {
            let id = format!(
                "engine={} kernel=F({},{}) filter={} stride={}",
                cell.label, cell.m, cell.r, cell.filter, cell.stride
            );
            (id, run_verify_cell(cell, a.trials, a.seed))
        })
        .collect();

    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for (id, res) in &results {
        match res {
            Ok(err) => {
                worst = worst.max(*err);
                let status = if *err <= a.tolerance { "ok  " } else { "FAIL" };
                if *err > a.tolerance {
                    failures += 1;
                }
                println!("{status} {id} max_rel={err:.3e}");
            }
            Err(f) => {
                failures += 1;
                println!("FAIL {id} error={}", f.message());
            }
        }
    }
    println!(
        "verified {} cells x {} trials (seed {}): {} failures, worst max_rel={worst:.3e}, tolerance {:e}",
        results.len(),
        a.trials,
        a.seed,
        failures,
        a.tolerance
    );
    if failures > 0 {
        return Err(Failure::Verification(format!(
            "{failures} of {} cells exceeded tolerance {:e}",
            results.len(),
            a.tolerance
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// error

fn cmd_error(a: ErrorArgs) -> Result<(), Failure> {
    use rayon::prelude::*;
    let precision = match a.precision {
        32 => Precision::F32,
        64 => Precision::F64,
        other => return Err(Failure::Usage(format!("precision {other} (expected 32 or 64)"))),
    };
    let kernels = if a.kernels.is_empty() { vec![(2, 2), (3, 3), (4, 4)] } else { a.kernels.clone() };
    let methods = if a.methods.is_empty() {
        vec![EngineKind::Nested, EngineKind::DirectWinograd]
    } else {
        a.methods.clone()
    };

    let jobs: Vec<(EngineKind, (usize, usize))> = methods
        .iter()
        .flat_map(|&method| kernels.iter().map(move |&k| (method, k)))
        .collect();
    let reports: Vec<_> = jobs
        .par_iter()
        .map(|&(method, (m, r))| {
            measure_error(method, a.filter, m, r, a.dims, precision, a.trials, a.seed)
        })
        .collect::<Result<Vec<_>, _>>()?;

    for rep in &reports {
        println!(
            "method={} kernel=F({},{}) filter={} dims={} precision={} trials={}: max_rel={:.6e} mean_rel={:.6e}",
            rep.method,
            rep.kernel_m,
            rep.kernel_r,
            rep.filter_side,
            rep.dims,
            rep.precision,
            rep.trials,
            rep.max_rel,
            rep.mean_rel
        );
    }
    Ok(())
}
