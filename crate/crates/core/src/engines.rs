//! Convolution engines: native sliding window, tiled Winograd, overlap-add
//! Winograd, nested Winograd, and polyphase stride decomposition.
//!
//! All engines compute *valid* cross-correlation (no filter flip, no implicit
//! input padding) on channeled tensors: inputs are `[Cin, spatial...]`,
//! filters `[Cout, Cin, spatial...]`, outputs `[Cout, spatial...]`, with one or
//! two spatial axes. Channel accumulation happens in the transform domain, so
//! a `Cin`-channel tile costs `Cin` element-wise products but a single inverse
//! transform.
//!
//! Every Winograd variant is a special case of one tiled core
//! ([`nested_conv`] with per-axis nesting depths): plain tiling is depth 1,
//! overlap-add runs the depth-1 core once per filter block, and stride `S`
//! splits into `S` phases per axis that re-enter the stride-1 engines. The
//! degeneracies the tests rely on (single-block OLA == tiled Winograd ==
//! depth-1 nested) are therefore identities of code, not of tolerance.

use std::fmt;
use std::str::FromStr;

use crate::counter;
use crate::kerngen::FloatKernelOf;
use crate::tensor::{advance, ewmm, mode_product, Scalar, TensorError, TensorOf};

/// Which engine a caller wants; `Plan` defers to the planner's executor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EngineKind {
    Native,
    DirectWinograd,
    Ola,
    Nested,
    Plan,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [
        EngineKind::Native,
        EngineKind::DirectWinograd,
        EngineKind::Ola,
        EngineKind::Nested,
        EngineKind::Plan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Native => "native",
            EngineKind::DirectWinograd => "direct_winograd",
            EngineKind::Ola => "ola",
            EngineKind::Nested => "nested",
            EngineKind::Plan => "plan",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, EngineError> {
        match s {
            "native" => Ok(EngineKind::Native),
            "direct_winograd" | "direct-winograd" | "direct" => Ok(EngineKind::DirectWinograd),
            "ola" => Ok(EngineKind::Ola),
            "nested" => Ok(EngineKind::Nested),
            "plan" => Ok(EngineKind::Plan),
            other => Err(EngineError::UnknownEngine(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("unknown engine {0:?}")]
    UnknownEngine(String),
    #[error("bad convolution spec: {0}")]
    BadSpec(String),
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("engine requires stride 1, spec has stride {0}")]
    StrideNotOne(usize),
    #[error("filter extent {filter} exceeds kernel tap count {r}")]
    FilterExceedsKernel { filter: usize, r: usize },
    #[error("depth {depth} covers {covered} taps, filter needs {filter}")]
    DepthTooShallow { depth: usize, covered: usize, filter: usize },
    #[error("kernel F({m},{r}) cannot nest beyond depth 1: m < r leaves output holes")]
    HolesAtDepth { m: usize, r: usize },
    #[error("no nesting depth of F(m,1) kernels covers a filter of extent {0}")]
    CoverageImpossible(usize),
    #[error("nesting depth must be at least 1")]
    ZeroDepth,
    #[error("engine {0} needs a Winograd kernel")]
    MissingKernel(EngineKind),
    #[error("engine kind `plan` is executed by the planner, not the engine dispatcher")]
    PlanViaPlanner,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Geometry of one convolution problem.
///
/// `input` and `filter` hold per-axis spatial extents (length 1 or 2 — the
/// height axis first for 2D). A single `stride` applies to every spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub input: Vec<usize>,
    pub filter: Vec<usize>,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvSpec {
    pub fn new(
        input: Vec<usize>,
        filter: Vec<usize>,
        stride: usize,
        cin: usize,
        cout: usize,
    ) -> Result<Self, EngineError> {
        let spec = ConvSpec { input, filter, stride, cin, cout };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), EngineError> {
        let dims = self.input.len();
        if dims == 0 || dims > 2 {
            return Err(EngineError::BadSpec(format!("{dims} spatial axes, supported: 1 or 2")));
        }
        if self.filter.len() != dims {
            return Err(EngineError::BadSpec(format!(
                "filter rank {} != input rank {dims}",
                self.filter.len()
            )));
        }
        if self.stride == 0 {
            return Err(EngineError::BadSpec("stride must be at least 1".into()));
        }
        if self.cin == 0 || self.cout == 0 {
            return Err(EngineError::BadSpec("channel counts must be at least 1".into()));
        }
        for a in 0..dims {
            if self.filter[a] == 0 {
                return Err(EngineError::BadSpec(format!("filter extent 0 on axis {a}")));
            }
            if self.input[a] < self.filter[a] {
                return Err(EngineError::BadSpec(format!(
                    "input extent {} shorter than filter extent {} on axis {a}",
                    self.input[a], self.filter[a]
                )));
            }
        }
        Ok(())
    }

    /// Derive the `ConvSpec` from channeled tensors: `x` is `[Cin, spatial...]`,
    /// `w` is `[Cout, Cin, spatial...]`.
    pub fn infer<S: Scalar>(
        x: &TensorOf<S>,
        w: &TensorOf<S>,
        stride: usize,
    ) -> Result<Self, EngineError> {
        if x.rank() < 2 || x.rank() > 3 {
            return Err(EngineError::BadSpec(format!(
                "input rank {} (want [Cin, W] or [Cin, H, W])",
                x.rank()
            )));
        }
        if w.rank() != x.rank() + 1 {
            return Err(EngineError::BadSpec(format!(
                "filter rank {} does not match input rank {}",
                w.rank(),
                x.rank()
            )));
        }
        if w.shape()[1] != x.shape()[0] {
            return Err(EngineError::BadSpec(format!(
                "filter expects {} input channels, input has {}",
                w.shape()[1],
                x.shape()[0]
            )));
        }
        ConvSpec::new(
            x.shape()[1..].to_vec(),
            w.shape()[2..].to_vec(),
            stride,
            x.shape()[0],
            w.shape()[0],
        )
    }

    pub fn dims(&self) -> usize {
        self.input.len()
    }

    /// Output extent along `axis`: `(input - filter) / stride + 1`.
    pub fn out_extent(&self, axis: usize) -> usize {
        (self.input[axis] - self.filter[axis]) / self.stride + 1
    }

    pub fn out_spatial(&self) -> Vec<usize> {
        (0..self.dims()).map(|a| self.out_extent(a)).collect()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.cout];
        s.extend(self.out_spatial());
        s
    }

    fn validate_tensors<S: Scalar>(
        &self,
        x: &TensorOf<S>,
        w: &TensorOf<S>,
    ) -> Result<(), EngineError> {
        self.check()?;
        let mut xs = vec![self.cin];
        xs.extend_from_slice(&self.input);
        if x.shape() != xs.as_slice() {
            return Err(EngineError::ShapeMismatch {
                what: "input",
                expected: xs,
                got: x.shape().to_vec(),
            });
        }
        let mut ws = vec![self.cout, self.cin];
        ws.extend_from_slice(&self.filter);
        if w.shape() != ws.as_slice() {
            return Err(EngineError::ShapeMismatch {
                what: "filter",
                expected: ws,
                got: w.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Smallest nesting depth whose coverage `r^depth` reaches `filter` taps.
pub fn covering_depth(filter: usize, r: usize) -> Result<usize, EngineError> {
    if filter <= r {
        return Ok(1);
    }
    if r <= 1 {
        return Err(EngineError::CoverageImpossible(filter));
    }
    let mut depth = 1;
    let mut covered = r;
    while covered < filter {
        covered *= r;
        depth += 1;
    }
    Ok(depth)
}

/// Reference engine: sliding-window multiply-accumulate at any stride.
///
/// Accumulation is hierarchical — innermost the channel sum per tap, then per
/// filter row, then across rows. The `F(1, r)` kernels produce bit-identical
/// results only against this grouping, and the equality tests depend on it.
pub fn direct_conv<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    let mut y = TensorOf::zeros(spec.out_shape());
    let s = spec.stride;
    match spec.dims() {
        1 => {
            let (h, r) = (spec.input[0], spec.filter[0]);
            let out = spec.out_extent(0);
            for co in 0..spec.cout {
                for i in 0..out {
                    let mut total = S::zero();
                    for j in 0..r {
                        let mut cell = S::zero();
                        for ci in 0..spec.cin {
                            cell = cell + x.data()[ci * h + i * s + j]
                                * w.data()[(co * spec.cin + ci) * r + j];
                        }
                        total = total + cell;
                    }
                    y.data_mut()[co * out + i] = total;
                }
            }
        }
        2 => {
            let (h, wd) = (spec.input[0], spec.input[1]);
            let (r, c) = (spec.filter[0], spec.filter[1]);
            let (oh, ow) = (spec.out_extent(0), spec.out_extent(1));
            for co in 0..spec.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut total = S::zero();
                        for fr in 0..r {
                            let mut row = S::zero();
                            for fc in 0..c {
                                let mut cell = S::zero();
                                for ci in 0..spec.cin {
                                    let xv = x.data()
                                        [(ci * h + oy * s + fr) * wd + ox * s + fc];
                                    let wv = w.data()
                                        [((co * spec.cin + ci) * r + fr) * c + fc];
                                    cell = cell + xv * wv;
                                }
                                row = row + cell;
                            }
                            total = total + row;
                        }
                        y.data_mut()[(co * oh + oy) * ow + ox] = total;
                    }
                }
            }
        }
        _ => unreachable!("spec.check bounds dims"),
    }
    let spatial_out: u64 = spec.out_spatial().iter().product::<usize>() as u64;
    let taps: u64 = spec.filter.iter().product::<usize>() as u64;
    counter::add(spatial_out * taps * (spec.cin * spec.cout) as u64);
    Ok(y)
}

/// Plain tiled Winograd at stride 1: the filter must fit the kernel
/// (`filter extent <= r` on every axis).
pub fn winograd_conv<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    if spec.stride != 1 {
        return Err(EngineError::StrideNotOne(spec.stride));
    }
    for &f in &spec.filter {
        if f > kernel.r {
            return Err(EngineError::FilterExceedsKernel { filter: f, r: kernel.r });
        }
    }
    let levels: Vec<Vec<&FloatKernelOf<S>>> =
        (0..spec.dims()).map(|_| vec![kernel]).collect();
    nested_core(x, w, &vec![0; spec.dims()], &spec.out_spatial(), spec, &levels)
}

/// Overlap-add Winograd at stride 1: the filter is cut into `ceil(R / r)`
/// blocks of `r` taps per axis (last block zero-padded), each block runs the
/// tiled engine against a shifted input view, and the partial outputs add up.
pub fn ola_conv<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    if spec.stride != 1 {
        return Err(EngineError::StrideNotOne(spec.stride));
    }
    let dims = spec.dims();
    let r = kernel.r;
    let blocks: Vec<usize> = spec.filter.iter().map(|&f| f.div_ceil(r)).collect();
    let out = spec.out_spatial();
    let mut y = TensorOf::zeros(spec.out_shape());
    let mut blk = vec![0usize; dims];
    loop {
        // Extent of this block's filter piece on each axis (last block short).
        let extents: Vec<usize> =
            (0..dims).map(|a| (spec.filter[a] - blk[a] * r).min(r)).collect();
        let wb = extract_filter_block(w, spec, &blk, r, &extents);
        let origins: Vec<usize> = blk.iter().map(|&b| b * r).collect();
        let levels: Vec<Vec<&FloatKernelOf<S>>> = (0..dims).map(|_| vec![kernel]).collect();
        let block_spec = ConvSpec {
            input: spec.input.clone(),
            filter: extents,
            stride: 1,
            cin: spec.cin,
            cout: spec.cout,
        };
        let part = nested_core(x, &wb, &origins, &out, &block_spec, &levels)?;
        y.add_assign(&part)?;
        let extents_done = !advance_mixed(&mut blk, &blocks);
        if extents_done {
            break;
        }
    }
    Ok(y)
}

/// Nested Winograd at stride 1. `depth` forces the nesting depth on every
/// axis; `None` picks the smallest depth that covers each filter axis.
/// Depths beyond 1 require `m >= r`, otherwise the slice outputs have holes.
pub fn nested_conv<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
    depth: Option<usize>,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    if spec.stride != 1 {
        return Err(EngineError::StrideNotOne(spec.stride));
    }
    let mut levels: Vec<Vec<&FloatKernelOf<S>>> = Vec::with_capacity(spec.dims());
    for a in 0..spec.dims() {
        let d = match depth {
            Some(0) => return Err(EngineError::ZeroDepth),
            Some(d) => {
                let covered = kernel.r.checked_pow(d as u32).unwrap_or(usize::MAX);
                if covered < spec.filter[a] {
                    return Err(EngineError::DepthTooShallow {
                        depth: d,
                        covered,
                        filter: spec.filter[a],
                    });
                }
                d
            }
            None => covering_depth(spec.filter[a], kernel.r)?,
        };
        if d >= 2 && kernel.m < kernel.r {
            return Err(EngineError::HolesAtDepth { m: kernel.m, r: kernel.r });
        }
        levels.push(vec![kernel; d]);
    }
    nested_core(x, w, &vec![0; spec.dims()], &spec.out_spatial(), spec, &levels)
}

/// Depth-2 nesting with different kernels per level (`inner` at level 0).
/// Both kernels must produce the same output count `m`; coverage is
/// `inner.r * outer.r` taps per axis.
pub fn nested_conv_mixed<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    inner: &FloatKernelOf<S>,
    outer: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    if spec.stride != 1 {
        return Err(EngineError::StrideNotOne(spec.stride));
    }
    if inner.m != outer.m {
        return Err(EngineError::BadSpec(format!(
            "mixed nesting needs equal m, got {} and {}",
            inner.m, outer.m
        )));
    }
    if inner.m < inner.r {
        return Err(EngineError::HolesAtDepth { m: inner.m, r: inner.r });
    }
    for &f in &spec.filter {
        if f > inner.r * outer.r {
            return Err(EngineError::DepthTooShallow {
                depth: 2,
                covered: inner.r * outer.r,
                filter: f,
            });
        }
    }
    let levels: Vec<Vec<&FloatKernelOf<S>>> =
        (0..spec.dims()).map(|_| vec![inner, outer]).collect();
    nested_core(x, w, &vec![0; spec.dims()], &spec.out_spatial(), spec, &levels)
}

/// Nested engine with an explicit depth per spatial axis (the planner's
/// stride-1 execution path).
pub(crate) fn nested_conv_depths<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
    depths: &[usize],
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    if spec.stride != 1 {
        return Err(EngineError::StrideNotOne(spec.stride));
    }
    debug_assert_eq!(depths.len(), spec.dims());
    let mut levels: Vec<Vec<&FloatKernelOf<S>>> = Vec::with_capacity(depths.len());
    for &d in depths {
        if d == 0 {
            return Err(EngineError::ZeroDepth);
        }
        if d >= 2 && kernel.m < kernel.r {
            return Err(EngineError::HolesAtDepth { m: kernel.m, r: kernel.r });
        }
        levels.push(vec![kernel; d]);
    }
    nested_core(x, w, &vec![0; spec.dims()], &spec.out_spatial(), spec, &levels)
}

/// How a strided engine runs its stride-1 phase convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PhaseDispatch {
    /// Tiled Winograd where the phase filter fits the kernel, nested otherwise.
    Auto,
    /// Tiled Winograd only (fails on phase filters longer than `r`).
    Winograd,
    /// Overlap-add.
    Ola,
}

/// Polyphase stride decomposition: downsample input and filter into
/// `stride` phases per axis, run each phase as a stride-1 convolution, and
/// sum. `R mod S` phases get `floor(R/S) + 1` taps, the rest `floor(R/S)`.
pub fn strided_conv<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, EngineError> {
    strided_conv_via(x, w, spec, kernel, PhaseDispatch::Auto)
}

pub(crate) fn strided_conv_via<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
    dispatch: PhaseDispatch,
) -> Result<TensorOf<S>, EngineError> {
    spec.validate_tensors(x, w)?;
    let s = spec.stride;
    for (a, &f) in spec.filter.iter().enumerate() {
        if f < s {
            return Err(EngineError::BadSpec(format!(
                "stride {s} exceeds filter extent {f} on axis {a}: a phase would be empty"
            )));
        }
    }
    if s == 1 {
        return run_phase(x, w, spec, kernel, dispatch);
    }
    let dims = spec.dims();
    let mut y = TensorOf::zeros(spec.out_shape());
    let mut t = vec![0usize; dims];
    loop {
        let xp = downsample(x, 1, s, &t);
        let wp = downsample(w, 2, s, &t);
        let phase_spec = ConvSpec::new(
            xp.shape()[1..].to_vec(),
            wp.shape()[2..].to_vec(),
            1,
            spec.cin,
            spec.cout,
        )?;
        let part = run_phase(&xp, &wp, &phase_spec, kernel, dispatch)?;
        add_cropped(&mut y, &part);
        if !advance(&mut t, s) {
            break;
        }
    }
    Ok(y)
}

fn run_phase<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
    dispatch: PhaseDispatch,
) -> Result<TensorOf<S>, EngineError> {
    match dispatch {
        PhaseDispatch::Auto => nested_conv(x, w, spec, kernel, None),
        PhaseDispatch::Winograd => winograd_conv(x, w, spec, kernel),
        PhaseDispatch::Ola => ola_conv(x, w, spec, kernel),
    }
}

/// Engine dispatcher over channeled tensors. `EngineKind::Plan` belongs to
/// the planner's executor and is rejected here. For stride >= 2 the Winograd
/// kinds run the polyphase decomposition with phases dispatched to the
/// requested stride-1 engine.
pub fn convolve<S: Scalar>(
    kind: EngineKind,
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: Option<&FloatKernelOf<S>>,
    depth: Option<usize>,
) -> Result<TensorOf<S>, EngineError> {
    if kind == EngineKind::Native {
        return direct_conv(x, w, spec);
    }
    if kind == EngineKind::Plan {
        return Err(EngineError::PlanViaPlanner);
    }
    let kernel = kernel.ok_or(EngineError::MissingKernel(kind))?;
    if spec.stride != 1 {
        let dispatch = match kind {
            EngineKind::DirectWinograd => PhaseDispatch::Winograd,
            EngineKind::Ola => PhaseDispatch::Ola,
            _ => PhaseDispatch::Auto,
        };
        return strided_conv_via(x, w, spec, kernel, dispatch);
    }
    match kind {
        EngineKind::DirectWinograd => winograd_conv(x, w, spec, kernel),
        EngineKind::Ola => ola_conv(x, w, spec, kernel),
        EngineKind::Nested => nested_conv(x, w, spec, kernel, depth),
        EngineKind::Native | EngineKind::Plan => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// The shared tiled/nested core.

/// Per-axis nesting geometry for a fixed ladder of kernels (level 0 inner).
struct AxisGeom {
    /// Source-digit weight per level: product of inner kernels' `r`.
    weights: Vec<usize>,
    /// Distinct outputs one slice produces; also the slice advance.
    slice_out: usize,
    /// Lexicographically-first digit tuple for each output position.
    canonical: Vec<Vec<usize>>,
}

fn axis_geom<S: Scalar>(levels: &[&FloatKernelOf<S>]) -> Result<AxisGeom, EngineError> {
    let depth = levels.len();
    debug_assert!(depth >= 1);
    let mut weights = Vec::with_capacity(depth);
    let mut pow = 1usize;
    for k in levels {
        weights.push(pow);
        pow *= k.r;
    }
    let tile_m: Vec<usize> = levels.iter().map(|k| k.m).collect();

    // Enumerate digit tuples in lexicographic order (level 0 first) and keep
    // the first tuple that lands on each output position. The nested identity
    // makes every later duplicate equal in exact arithmetic; discarding them
    // is the "redundant terms" step.
    let max_pos: usize = tile_m.iter().zip(&weights).map(|(&m, &w)| (m - 1) * w).sum();
    let mut canonical: Vec<Option<Vec<usize>>> = vec![None; max_pos + 1];
    let mut digits = vec![0usize; depth];
    loop {
        let pos: usize = digits.iter().zip(&weights).map(|(&d, &w)| d * w).sum();
        if canonical[pos].is_none() {
            canonical[pos] = Some(digits.clone());
        }
        if !advance_mixed(&mut digits, &tile_m) {
            break;
        }
    }
    let mut out = Vec::with_capacity(max_pos + 1);
    for c in canonical {
        match c {
            Some(digits) => out.push(digits),
            None => {
                // A hole: positions are not contiguous. Callers rule this out
                // (m >= r for every inner level), so surface it loudly.
                let k0 = levels[0];
                return Err(EngineError::HolesAtDepth { m: k0.m, r: k0.r });
            }
        }
    }
    Ok(AxisGeom { weights, slice_out: max_pos + 1, canonical: out })
}

/// Odometer over mixed per-digit extents; the last digit varies fastest, so
/// tuples appear in lexicographic order on (digit 0, digit 1, ...).
fn advance_mixed(idx: &mut [usize], extents: &[usize]) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < extents[i] {
            return true;
        }
        idx[i] = 0;
    }
    false
}

/// One combined tile axis: which spatial axis it belongs to, its source-digit
/// weight, and the kernel whose transforms apply along it.
struct TileAxis<'k, S> {
    spatial: usize,
    weight: usize,
    kernel: &'k FloatKernelOf<S>,
}

/// The tiled core every Winograd engine runs on.
///
/// * `origins` shifts all input reads per axis (overlap-add block offset).
/// * `out` is the number of outputs to produce per axis.
/// * `levels[a]` lists the kernels nested along spatial axis `a`, level 0
///   (innermost digit) first; plain tiling is a single level.
///
/// Reads past the input's end are zeros; every output index is written by
/// exactly one slice. Filter tiles are transformed once per channel pair, so
/// the counted multiplications per slice are exactly `prod(l_j)` per channel
/// pair — the quantity the cost model reasons about.
fn nested_core<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    origins: &[usize],
    out: &[usize],
    spec: &ConvSpec,
    levels: &[Vec<&FloatKernelOf<S>>],
) -> Result<TensorOf<S>, EngineError> {
    let dims = spec.dims();
    debug_assert_eq!(levels.len(), dims);
    debug_assert_eq!(origins.len(), dims);

    let geoms = levels
        .iter()
        .map(|lv| axis_geom(lv))
        .collect::<Result<Vec<_>, _>>()?;
    for (a, lv) in levels.iter().enumerate() {
        let slots: usize = lv.iter().map(|k| k.r).product();
        if spec.filter[a] > slots {
            return Err(EngineError::DepthTooShallow {
                depth: lv.len(),
                covered: slots,
                filter: spec.filter[a],
            });
        }
    }

    // Flattened tile axes: all levels of spatial axis 0, then axis 1.
    let mut axes: Vec<TileAxis<S>> = Vec::new();
    for (a, lv) in levels.iter().enumerate() {
        for (j, k) in lv.iter().enumerate() {
            axes.push(TileAxis { spatial: a, weight: geoms[a].weights[j], kernel: k });
        }
    }
    let tile_shape_l: Vec<usize> = axes.iter().map(|t| t.kernel.l).collect();
    let tile_shape_r: Vec<usize> = axes.iter().map(|t| t.kernel.r).collect();

    // Transform every (cout, cin) filter tile once: reorder digits, zero-pad,
    // then G along every axis.
    let mut w_tiles: Vec<TensorOf<S>> = Vec::with_capacity(spec.cout * spec.cin);
    for co in 0..spec.cout {
        for ci in 0..spec.cin {
            let mut tile = TensorOf::zeros(tile_shape_r.clone());
            let mut idx = vec![0usize; axes.len()];
            loop {
                let mut src = vec![0usize; dims];
                for (t, &d) in axes.iter().zip(&idx) {
                    src[t.spatial] += d * t.weight;
                }
                if (0..dims).all(|a| src[a] < spec.filter[a]) {
                    let mut flat = (co * spec.cin + ci) * spec.filter.iter().product::<usize>();
                    let mut mul = 1;
                    for a in (0..dims).rev() {
                        flat += src[a] * mul;
                        mul *= spec.filter[a];
                    }
                    tile.set(&idx, w.data()[flat]);
                }
                if !advance_mixed(&mut idx, &tile_shape_r) {
                    break;
                }
            }
            for t in (0..axes.len()).rev() {
                tile = mode_product(&tile, &axes[t].kernel.g, t)?;
            }
            w_tiles.push(tile);
        }
    }

    let mut out_shape = vec![spec.cout];
    out_shape.extend_from_slice(out);
    let mut y = TensorOf::zeros(out_shape);
    let slices: Vec<usize> =
        (0..dims).map(|a| out[a].div_ceil(geoms[a].slice_out)).collect();
    let x_strides: Vec<usize> = {
        // Strides over [Cin, spatial...].
        let mut s = vec![0usize; dims + 1];
        let mut mul = 1usize;
        for a in (0..dims).rev() {
            s[a + 1] = mul;
            mul *= spec.input[a];
        }
        s[0] = mul;
        s
    };
    let out_strides: Vec<usize> = {
        let mut s = vec![0usize; dims + 1];
        let mut mul = 1usize;
        for a in (0..dims).rev() {
            s[a + 1] = mul;
            mul *= out[a];
        }
        s[0] = mul;
        s
    };

    let mut slice_idx = vec![0usize; dims];
    let mut x_tiles: Vec<TensorOf<S>> = Vec::with_capacity(spec.cin);
    loop {
        let base: Vec<usize> = (0..dims)
            .map(|a| origins[a] + slice_idx[a] * geoms[a].slice_out)
            .collect();

        // Input tiles for this slice, BT-transformed, one per input channel.
        x_tiles.clear();
        for ci in 0..spec.cin {
            let mut tile = TensorOf::zeros(tile_shape_l.clone());
            let mut idx = vec![0usize; axes.len()];
            loop {
                let mut src = base.clone();
                for (t, &d) in axes.iter().zip(&idx) {
                    src[t.spatial] += d * t.weight;
                }
                if (0..dims).all(|a| src[a] < spec.input[a]) {
                    let mut flat = ci * x_strides[0];
                    for a in 0..dims {
                        flat += src[a] * x_strides[a + 1];
                    }
                    tile.set(&idx, x.data()[flat]);
                }
                if !advance_mixed(&mut idx, &tile_shape_l) {
                    break;
                }
            }
            for t in (0..axes.len()).rev() {
                tile = mode_product(&tile, &axes[t].kernel.bt, t)?;
            }
            x_tiles.push(tile);
        }

        for co in 0..spec.cout {
            let mut acc: Option<TensorOf<S>> = None;
            for ci in 0..spec.cin {
                let prod = ewmm(&x_tiles[ci], &w_tiles[co * spec.cin + ci])?;
                match &mut acc {
                    None => acc = Some(prod),
                    Some(a) => a.add_assign(&prod)?,
                }
            }
            let mut res = acc.expect("cin >= 1");
            for t in (0..axes.len()).rev() {
                res = mode_product(&res, &axes[t].kernel.at, t)?;
            }

            // Scatter the distinct output positions of this slice.
            let bounds: Vec<usize> = (0..dims)
                .map(|a| geoms[a].slice_out.min(out[a] - slice_idx[a] * geoms[a].slice_out))
                .collect();
            let mut pos = vec![0usize; dims];
            let mut combined = Vec::with_capacity(axes.len());
            loop {
                combined.clear();
                for a in 0..dims {
                    combined.extend_from_slice(&geoms[a].canonical[pos[a]]);
                }
                let v = res.get(&combined);
                let mut flat = co * out_strides[0];
                for a in 0..dims {
                    flat += (slice_idx[a] * geoms[a].slice_out + pos[a]) * out_strides[a + 1];
                }
                y.data_mut()[flat] = v;
                if !advance_mixed(&mut pos, &bounds) {
                    break;
                }
            }
        }
        if !advance_mixed(&mut slice_idx, &slices) {
            break;
        }
    }
    Ok(y)
}

/// Pull one overlap-add filter block out of `w`: taps `[b*r, b*r + extent)`
/// per axis, reshaped to `[Cout, Cin, extents...]`.
fn extract_filter_block<S: Scalar>(
    w: &TensorOf<S>,
    spec: &ConvSpec,
    blk: &[usize],
    r: usize,
    extents: &[usize],
) -> TensorOf<S> {
    let dims = spec.dims();
    let mut shape = vec![spec.cout, spec.cin];
    shape.extend_from_slice(extents);
    let mut out = TensorOf::zeros(shape);
    let mut idx = vec![0usize; dims + 2];
    let extents_full: Vec<usize> = {
        let mut e = vec![spec.cout, spec.cin];
        e.extend_from_slice(extents);
        e
    };
    loop {
        let mut src = Vec::with_capacity(dims + 2);
        src.push(idx[0]);
        src.push(idx[1]);
        for a in 0..dims {
            src.push(blk[a] * r + idx[a + 2]);
        }
        out.set(&idx, w.get(&src));
        if !advance_mixed(&mut idx, &extents_full) {
            break;
        }
    }
    out
}

/// Downsample every spatial axis of a channeled tensor by `stride`, starting
/// at per-axis offsets `t`. `lead` is the number of leading channel axes
/// (1 for inputs, 2 for filters).
pub(crate) fn downsample<S: Scalar>(
    src: &TensorOf<S>,
    lead: usize,
    stride: usize,
    t: &[usize],
) -> TensorOf<S> {
    let dims = src.rank() - lead;
    let mut shape: Vec<usize> = src.shape()[..lead].to_vec();
    for (a, &ta) in t.iter().enumerate().take(dims) {
        let full = src.shape()[lead + a];
        shape.push((full - ta).div_ceil(stride));
    }
    let mut out = TensorOf::zeros(shape.clone());
    let mut idx = vec![0usize; src.rank()];
    loop {
        let mut sidx = idx.clone();
        for a in 0..dims {
            sidx[lead + a] = t[a] + idx[lead + a] * stride;
        }
        out.set(&idx, src.get(&sidx));
        if !advance_mixed(&mut idx, &shape) {
            break;
        }
    }
    out
}

/// `y += part`, cropping `part` to `y`'s extents (phase convolutions may
/// produce a few extra trailing outputs).
pub(crate) fn add_cropped<S: Scalar>(y: &mut TensorOf<S>, part: &TensorOf<S>) {
    debug_assert_eq!(y.rank(), part.rank());
    let shape = y.shape().to_vec();
    let mut idx = vec![0usize; shape.len()];
    loop {
        let flat = y.flat_index(&idx);
        y.data_mut()[flat] = y.data()[flat] + part.get(&idx);
        if !advance_mixed(&mut idx, &shape) {
            break;
        }
    }
}
