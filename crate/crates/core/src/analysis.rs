//! Analytic multiplication-cost model and floating-point error measurement.
//!
//! Multiplication counts follow minimal-filtering accounting: only general
//! (data-by-data) products count; multiplications by constant transform
//! entries do not. The per-axis closed forms are
//!
//! * native: `R` per output;
//! * direct Winograd: one kernel `F(m, max(R, r))`, `l_eff / m` per output;
//! * overlap-add: `ceil(R / r)` blocks of `l` products per `m` outputs;
//! * nested: `l^d` products per `O_d` distinct outputs at the covering
//!   depth `d`;
//! * stride `S`: the resolved plan's terms, `sum_t n_t * l^(d_t)` products
//!   per shared `M` outputs.
//!
//! 2D costs are per-axis costs squared. Every closed form here is
//! cross-checked in the test suites against the engines' instrumentation
//! counter — exact integer equality, no tolerances.
//!
//! Addition counts (`adds_per_output`) are reported for stride-1 methods with
//! the filter transform amortized away: input and inverse transforms cost
//! `nnz(row) - 1` adds per produced element, overlap-add pays block
//! accumulation, and the native method pays its `R^dims - 1` accumulation.

use num_rational::Rational64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engines::{self, ConvSpec, EngineError, EngineKind};
use crate::kerngen::{generate_kernel, KernelError};
use crate::planner::{self, PlanError, PlanNode};
use crate::tensor::{Scalar, Tensor, TensorOf};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Which per-level kernels a nested cost assumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NestedCounting {
    /// Every level applies the same `F(m, r)` (coverage `r^d`).
    #[default]
    SameKernel,
    /// Depth-2 nesting with a trimmed outer kernel `F(m, ceil(R / r))`.
    MixedOuter,
}

/// How overlap-add charges its blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OlaCounting {
    /// All `ceil(R / r)` blocks cost the full `l` products.
    #[default]
    FullBlocks,
    /// The trailing short block runs a trimmed kernel `F(m, R mod r)`.
    ExactBlocks,
}

/// Cost of one convolution method on one (filter, kernel, dims) cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub method: EngineKind,
    pub filter_side: usize,
    pub kernel_m: usize,
    pub kernel_r: usize,
    pub dims: usize,
    pub stride: usize,
    /// General multiplications per tile (all `dims` axes combined).
    pub mults_per_tile: u64,
    /// Outputs one tile produces (all axes combined).
    pub outputs_per_tile: u64,
    pub mults_per_output: Rational64,
    /// Additions per output for stride-1 methods, filter transform amortized.
    pub adds_per_output: Option<Rational64>,
    /// Per-axis factors (`mults_per_tile = axis_mults^dims`).
    pub axis_mults: u64,
    pub axis_outputs: u64,
}

fn pow_u64(base: u64, exp: usize) -> u64 {
    base.checked_pow(exp as u32).expect("cost overflow")
}

/// Count multiplications with the default conventions
/// ([`NestedCounting::SameKernel`], [`OlaCounting::FullBlocks`]).
pub fn count_mults(
    method: EngineKind,
    filter_side: usize,
    m: usize,
    r: usize,
    dims: usize,
    stride: usize,
) -> Result<CostReport, AnalysisError> {
    count_mults_with(
        method,
        filter_side,
        m,
        r,
        dims,
        stride,
        NestedCounting::SameKernel,
        OlaCounting::FullBlocks,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn count_mults_with(
    method: EngineKind,
    filter_side: usize,
    m: usize,
    r: usize,
    dims: usize,
    stride: usize,
    nested: NestedCounting,
    ola: OlaCounting,
) -> Result<CostReport, AnalysisError> {
    if filter_side == 0 || m == 0 || r == 0 {
        return Err(AnalysisError::Unsupported(format!(
            "degenerate cell: R={filter_side}, kernel F({m},{r})"
        )));
    }
    if !(1..=2).contains(&dims) {
        return Err(AnalysisError::Unsupported(format!("{dims} spatial dims")));
    }
    if stride == 0 {
        return Err(AnalysisError::Unsupported("stride 0".into()));
    }
    let l = m + r - 1;

    let (axis_mults, axis_outputs, adds): (u64, u64, Option<Rational64>) = match (method, stride) {
        (EngineKind::Native, _) => {
            let per_out = pow_u64(filter_side as u64, dims);
            let adds = Rational64::from_integer(per_out as i64 - 1);
            // A native "tile" is a single output.
            (filter_side as u64, 1, Some(adds))
        }
        (EngineKind::DirectWinograd, 1) => {
            let r_eff = filter_side.max(r);
            let l_eff = m + r_eff - 1;
            let adds = transform_adds_per_output(m, r_eff, 1, dims, 1)?;
            (l_eff as u64, m as u64, Some(adds))
        }
        (EngineKind::Ola, 1) => {
            let blocks = filter_side.div_ceil(r);
            let axis_mults = match ola {
                OlaCounting::FullBlocks => (blocks * l) as u64,
                OlaCounting::ExactBlocks => {
                    let last = filter_side - r * (blocks - 1);
                    ((blocks - 1) * l + (m + last - 1)) as u64
                }
            };
            let adds = ola_adds_per_output(m, r, filter_side, dims)?;
            (axis_mults, m as u64, Some(adds))
        }
        (EngineKind::Nested | EngineKind::Plan, 1) => {
            let depth = engines::covering_depth(filter_side, r)?;
            if depth >= 2 && m < r {
                return Err(PlanError::HolesAtDepth { m, r }.into());
            }
            match nested {
                NestedCounting::SameKernel => {
                    let axis_mults = pow_u64(l as u64, depth);
                    let outputs = planner::distinct_outputs(m, r, depth) as u64;
                    let adds = transform_adds_per_output(m, r, depth, dims, depth)?;
                    (axis_mults, outputs, Some(adds))
                }
                NestedCounting::MixedOuter => {
                    if depth > 2 {
                        return Err(AnalysisError::Unsupported(
                            "mixed-outer counting is defined for depth 2".into(),
                        ));
                    }
                    if depth == 1 {
                        let adds = transform_adds_per_output(m, r, 1, dims, 1)?;
                        (l as u64, m as u64, Some(adds))
                    } else {
                        let r_out = filter_side.div_ceil(r);
                        let l_out = m + r_out - 1;
                        let outputs = planner::distinct_outputs(m, r, 2) as u64;
                        ((l * l_out) as u64, outputs, None)
                    }
                }
            }
        }
        (EngineKind::Nested | EngineKind::Plan, s) => {
            if filter_side < s {
                return Err(PlanError::StrideExceedsFilter { filter: filter_side, stride: s }
                    .into());
            }
            let plan = planner::resolve_lengths(&planner::decompose(filter_side, s, m, r)?)?;
            let PlanNode::Sum { terms } = &plan.node else {
                return Err(AnalysisError::Unsupported("stride plan is not a Sum".into()));
            };
            let mut axis_mults = 0u64;
            for term in terms {
                let (n, depth) = match &term.node {
                    PlanNode::Repeat { n, child } => (*n as u64, term_depth(child)?),
                    other => (1, term_depth_node(other)?),
                };
                axis_mults += n * pow_u64(l as u64, depth);
            }
            let outputs = plan.resolved_len()? as u64;
            (axis_mults, outputs, None)
        }
        (other, s) => {
            return Err(AnalysisError::Unsupported(format!(
                "method {other} at stride {s}"
            )));
        }
    };

    let mults_per_tile = pow_u64(axis_mults, dims);
    let outputs_per_tile = pow_u64(axis_outputs, dims);
    Ok(CostReport {
        method,
        filter_side,
        kernel_m: m,
        kernel_r: r,
        dims,
        stride,
        mults_per_tile,
        outputs_per_tile,
        mults_per_output: Rational64::new(mults_per_tile as i64, outputs_per_tile as i64),
        adds_per_output: adds,
        axis_mults,
        axis_outputs,
    })
}

fn term_depth(plan: &planner::Plan) -> Result<usize, AnalysisError> {
    term_depth_node(&plan.node)
}

fn term_depth_node(node: &PlanNode) -> Result<usize, AnalysisError> {
    match node {
        PlanNode::Leaf { .. } => Ok(1),
        PlanNode::Nest { levels, .. } => Ok(*levels),
        _ => Err(AnalysisError::Unsupported("nested Sum/Repeat in stride term".into())),
    }
}

/// Input + inverse transform adds per output for a depth-`depth` nest of
/// `F(m, r)` applied on `dims` axes. `out_depth` is the depth whose distinct
/// output count divides the tile (same as `depth` for plain nesting).
fn transform_adds_per_output(
    m: usize,
    r: usize,
    depth: usize,
    dims: usize,
    out_depth: usize,
) -> Result<Rational64, AnalysisError> {
    let k = generate_kernel(m, r)?;
    let l = k.l;
    let nnz = |mat: &crate::kerngen::RatMat| -> usize {
        let mut n = 0;
        for i in 0..mat.rows() {
            for j in 0..mat.cols() {
                if !num_traits::Zero::is_zero(mat.get(i, j)) {
                    n += 1;
                }
            }
        }
        n
    };
    let bt_adds = nnz(&k.bt) - l;
    let at_adds = nnz(&k.at) - m;

    // Walk the tile's axes: BT leaves extents at l, each AT application
    // shrinks one axis to m; adds per application = (nnz - rows) * other-axes
    // volume.
    let rank = depth * dims;
    let mut sizes = vec![l; rank];
    let mut adds: u64 = 0;
    for t in 0..rank {
        let others: u64 = sizes
            .iter()
            .enumerate()
            .filter(|&(u, _)| u != t)
            .map(|(_, &s)| s as u64)
            .product();
        adds += bt_adds as u64 * others;
    }
    for t in (0..rank).rev() {
        let others: u64 = sizes
            .iter()
            .enumerate()
            .filter(|&(u, _)| u != t)
            .map(|(_, &s)| s as u64)
            .product();
        adds += at_adds as u64 * others;
        sizes[t] = m;
    }
    let outputs = pow_u64(planner::distinct_outputs(m, r, out_depth) as u64, dims);
    Ok(Rational64::new(adds as i64, outputs as i64))
}

/// Overlap-add adds per output: every block pays the depth-1 transform adds,
/// plus element-wise accumulation of the `blocks^dims` partial outputs.
fn ola_adds_per_output(
    m: usize,
    r: usize,
    filter_side: usize,
    dims: usize,
) -> Result<Rational64, AnalysisError> {
    let per_tile_one_block = transform_adds_per_output(m, r, 1, dims, 1)?
        * Rational64::from_integer(pow_u64(m as u64, dims) as i64);
    let blocks = pow_u64(filter_side.div_ceil(r) as u64, dims);
    let acc = (blocks - 1) * pow_u64(m as u64, dims);
    let total = per_tile_one_block * Rational64::from_integer(blocks as i64)
        + Rational64::from_integer(acc as i64);
    Ok(total / Rational64::from_integer(pow_u64(m as u64, dims) as i64))
}

/// Exact multiplication total a full engine run must report: tiles are
/// counted per axis with `ceil`, channels multiply. For stride plans the
/// per-axis output extent must be a multiple of the plan's `M` for the
/// closed form to be exact.
pub fn predicted_total_mults(report: &CostReport, out_spatial: &[usize], cin: usize, cout: usize) -> u64 {
    let mut total = 1u64;
    for &out in out_spatial {
        let tiles = (out as u64).div_ceil(report.axis_outputs);
        total *= tiles * report.axis_mults;
    }
    total * (cin * cout) as u64
}

/// Ratio of baseline to candidate multiplications per output (both at
/// stride 1, default conventions).
pub fn speedup_ratio(
    filter_side: usize,
    m: usize,
    r: usize,
    baseline: EngineKind,
    candidate: EngineKind,
    dims: usize,
) -> Result<Rational64, AnalysisError> {
    let b = count_mults(baseline, filter_side, m, r, dims, 1)?;
    let c = count_mults(candidate, filter_side, m, r, dims, 1)?;
    Ok(b.mults_per_output / c.mults_per_output)
}

/// Cost reports for the cross product of filters, kernels, and methods at
/// stride 1. Cells with no valid algorithm (for example nesting an `m < r`
/// kernel past its coverage) are skipped.
pub fn sweep(
    filters: &[usize],
    kernels: &[(usize, usize)],
    methods: &[EngineKind],
    dims: usize,
) -> Vec<CostReport> {
    let mut out = Vec::new();
    for &filter in filters {
        for &(m, r) in kernels {
            for &method in methods {
                if let Ok(report) = count_mults(method, filter, m, r, dims, 1) {
                    out.push(report);
                }
            }
        }
    }
    out
}

/// Fixed CSV schema for sweep output.
pub const CSV_HEADER: &str =
    "method,filter_side,kernel_m,kernel_r,dims,mults_per_tile,outputs_per_tile,mults_per_output";

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for rep in reports {
        let ratio = *rep.mults_per_output.numer() as f64 / *rep.mults_per_output.denom() as f64;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            rep.method,
            rep.filter_side,
            rep.kernel_m,
            rep.kernel_r,
            rep.dims,
            rep.mults_per_tile,
            rep.outputs_per_tile,
            ratio
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Floating-point error measurement.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// Error statistics of a method against the f64 native reference.
#[derive(Clone, Debug)]
pub struct ErrorReport {
    pub method: EngineKind,
    pub kernel_m: usize,
    pub kernel_r: usize,
    pub filter_side: usize,
    pub dims: usize,
    pub precision: Precision,
    pub trials: usize,
    /// Max over trials of `max|y - ref| / max|ref|`.
    pub max_rel: f64,
    /// Mean over trials of the same per-trial statistic.
    pub mean_rel: f64,
}

/// Measure a method's output error against the native f64 reference on
/// unit-scale random inputs (stride 1, single channel).
///
/// For `DirectWinograd` the kernel is enlarged to `F(m, max(R, r))` — that is
/// the whole point of measuring it: one big kernel versus a composition of
/// small ones.
#[allow(clippy::too_many_arguments)]
pub fn measure_error(
    method: EngineKind,
    filter_side: usize,
    m: usize,
    r: usize,
    dims: usize,
    precision: Precision,
    trials: usize,
    seed: u64,
) -> Result<ErrorReport, AnalysisError> {
    let kernel_r = if method == EngineKind::DirectWinograd { filter_side.max(r) } else { r };
    let exact = generate_kernel(m, kernel_r)?;
    let k64 = exact.to_float();
    let k32 = exact.to_float_as::<f32>();

    let extent = filter_side + 7;
    let shape_x: Vec<usize> = std::iter::once(1).chain(vec![extent; dims]).collect();
    let shape_w: Vec<usize> = [1, 1].into_iter().chain(vec![filter_side; dims]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for _ in 0..trials {
        let x = random_tensor(&mut rng, &shape_x);
        let w = random_tensor(&mut rng, &shape_w);
        let spec = ConvSpec::infer(&x, &w, 1)?;
        let reference = engines::direct_conv(&x, &w, &spec)?;

        let candidate: Tensor = match precision {
            Precision::F64 => run_method(method, &x, &w, &spec, &k64)?,
            Precision::F32 => {
                let x32: TensorOf<f32> = x.cast();
                let w32: TensorOf<f32> = w.cast();
                run_method(method, &x32, &w32, &spec, &k32)?.cast()
            }
        };
        let scale = reference.max_abs();
        let mut worst = 0.0f64;
        for (a, b) in candidate.data().iter().zip(reference.data()) {
            worst = worst.max((a - b).abs());
        }
        let rel = worst / scale;
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(ErrorReport {
        method,
        kernel_m: m,
        kernel_r,
        filter_side,
        dims,
        precision,
        trials,
        max_rel,
        mean_rel: sum_rel / trials.max(1) as f64,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run_method<S: Scalar>(
    method: EngineKind,
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &crate::kerngen::FloatKernelOf<S>,
) -> Result<TensorOf<S>, AnalysisError> {
    Ok(match method {
        EngineKind::Native => engines::direct_conv(x, w, spec)?,
        EngineKind::DirectWinograd => engines::winograd_conv(x, w, spec, kernel)?,
        EngineKind::Ola => engines::ola_conv(x, w, spec, kernel)?,
        EngineKind::Nested => engines::nested_conv(x, w, spec, kernel, None)?,
        EngineKind::Plan => planner::plan_convolve(x, w, spec, kernel)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn ola_nine_by_nine_needs_25_mults_per_output() {
        let rep = count_mults(EngineKind::Ola, 9, 3, 3, 2, 1).unwrap();
        assert_eq!(rep.mults_per_output, ratio(25, 1));
        assert_eq!(rep.mults_per_tile, 225);
        assert_eq!(rep.outputs_per_tile, 9);
    }

    #[test]
    fn nested_nine_by_nine_needs_625_over_81() {
        let rep = count_mults(EngineKind::Nested, 9, 3, 3, 2, 1).unwrap();
        assert_eq!(rep.mults_per_output, ratio(625, 81));
        assert_eq!(rep.mults_per_tile, 625);
        assert_eq!(rep.outputs_per_tile, 81);
    }

    #[test]
    fn speedup_anchors() {
        let s99 = speedup_ratio(9, 3, 3, EngineKind::Ola, EngineKind::Nested, 2).unwrap();
        assert_eq!(s99, ratio(81, 25)); // 3.24
        let s55 = speedup_ratio(5, 3, 3, EngineKind::Ola, EngineKind::Nested, 2).unwrap();
        assert_eq!(s55, ratio(36, 25)); // 1.44
    }

    #[test]
    fn direct_cost_equals_kernel_cost_when_filter_fits() {
        for filter in 1..=4 {
            let direct = count_mults(EngineKind::DirectWinograd, filter, 4, 4, 2, 1).unwrap();
            assert_eq!(direct.axis_mults, 7, "F(4,4) l=7 regardless of R={filter}");
            assert_eq!(direct.axis_outputs, 4);
        }
        // Beyond r the kernel grows with the filter.
        let direct = count_mults(EngineKind::DirectWinograd, 9, 4, 4, 2, 1).unwrap();
        assert_eq!(direct.axis_mults, 12); // F(4,9): l = 12.
    }

    #[test]
    fn mixed_outer_matches_ola_for_f63_on_5x5() {
        let same = count_mults(EngineKind::Nested, 5, 6, 3, 2, 1).unwrap();
        assert_eq!(same.mults_per_output, ratio(64 * 64, 21 * 21));
        let mixed = count_mults_with(
            EngineKind::Nested,
            5,
            6,
            3,
            2,
            1,
            NestedCounting::MixedOuter,
            OlaCounting::FullBlocks,
        )
        .unwrap();
        let ola = count_mults(EngineKind::Ola, 5, 6, 3, 2, 1).unwrap();
        // 56/21 = 16/6 = 8/3 per axis: identical cost.
        assert_eq!(mixed.mults_per_output, ola.mults_per_output);
        assert!(same.mults_per_output > ola.mults_per_output);
    }

    #[test]
    fn stride_cost_follows_the_plan() {
        // R=5, S=2, F(2,2): Nest^2 (9 mults) + 2x Leaf (3 mults each) per
        // M=4 outputs -> 15/4 per axis.
        let rep = count_mults(EngineKind::Plan, 5, 2, 2, 1, 2).unwrap();
        assert_eq!(rep.axis_mults, 15);
        assert_eq!(rep.axis_outputs, 4);
        assert_eq!(rep.mults_per_output, ratio(15, 4));
        // 2D squares per-axis factors.
        let rep2 = count_mults(EngineKind::Nested, 5, 2, 2, 2, 2).unwrap();
        assert_eq!(rep2.mults_per_tile, 225);
        assert_eq!(rep2.outputs_per_tile, 16);
    }

    #[test]
    fn unsupported_cells_error() {
        assert!(matches!(
            count_mults(EngineKind::Ola, 5, 2, 2, 2, 2),
            Err(AnalysisError::Unsupported(_))
        ));
        assert!(count_mults(EngineKind::Nested, 7, 2, 3, 1, 1).is_err());
        assert!(count_mults(EngineKind::Plan, 2, 2, 2, 1, 3).is_err());
    }

    #[test]
    fn f23_adds_per_output_match_hand_count() {
        // BT has 8 nonzeros over 4 rows, AT 6 over 2: (8-4) + (6-2) = 8 adds
        // per 2 outputs.
        let rep = count_mults(EngineKind::DirectWinograd, 3, 2, 3, 1, 1).unwrap();
        assert_eq!(rep.adds_per_output, Some(ratio(4, 1)));
        let native = count_mults(EngineKind::Native, 3, 2, 3, 2, 1).unwrap();
        assert_eq!(native.adds_per_output, Some(ratio(8, 1)));
    }

    #[test]
    fn sweep_covers_valid_cells_and_csv_schema_is_stable() {
        let reports = sweep(
            &[3, 5, 9],
            &[(3, 3)],
            &[EngineKind::Native, EngineKind::Ola, EngineKind::Nested],
            2,
        );
        assert_eq!(reports.len(), 9);
        let csv = to_csv(&reports);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.clone().count(), 9);
        assert!(lines.any(|l| l.starts_with("nested,9,3,3,2,625,81,")));
    }

    #[test]
    fn error_measurement_is_deterministic_and_sane() {
        let a = measure_error(EngineKind::Nested, 4, 2, 2, 1, Precision::F64, 5, 7).unwrap();
        let b = measure_error(EngineKind::Nested, 4, 2, 2, 1, Precision::F64, 5, 7).unwrap();
        assert_eq!(a.max_rel.to_bits(), b.max_rel.to_bits());
        assert!(a.max_rel < 1e-12, "f64 nested error {}", a.max_rel);

        let f32_err = measure_error(EngineKind::Nested, 4, 2, 2, 1, Precision::F32, 5, 7).unwrap();
        assert!(f32_err.max_rel > a.max_rel);
        assert!(f32_err.max_rel < 1e-3);
    }
}
