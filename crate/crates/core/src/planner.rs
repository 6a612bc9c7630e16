//! Decomposition of an arbitrary (filter length, stride) convolution into an
//! expression tree over one small Winograd kernel, plus serialization (JSON
//! and RPN) and an executor that drives the engines.
//!
//! The grammar has four node kinds:
//!
//! * `Leaf` — one kernel application `F(m, r)` handling a sub-filter of
//!   `effective_r <= r` taps.
//! * `Nest { levels }` — the kernel nested on itself `levels` times, covering
//!   `r^levels` taps and producing `O_levels` outputs per slice.
//! * `Sum { terms }` — polyphase stride decomposition: term `t` convolves
//!   input phase `t` with filter phase `t`, and the outputs add up.
//! * `Repeat { n }` — bookkeeping wrapper giving a short Sum term the shared
//!   output length: the child slides over the whole signal, `n = M / len`.
//!
//! [`decompose`] builds the tree for a problem, [`resolve_lengths`] computes
//! per-node output lengths bottom-up (inserting `Repeat`s so every `Sum` term
//! agrees on `M = lcm` of term lengths), and [`execute_plan`] runs it.

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::engines::{
    self, add_cropped, downsample, ConvSpec, EngineError,
};
use crate::kerngen::FloatKernelOf;
use crate::tensor::{Scalar, TensorOf};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("filter length must be at least 1")]
    EmptyFilter,
    #[error("kernel sizes must be at least 1, got F({m}, {r})")]
    BadKernel { m: usize, r: usize },
    #[error("stride must be at least 1")]
    BadStride,
    #[error("stride {stride} exceeds filter length {filter}: a phase would own no taps")]
    StrideExceedsFilter { filter: usize, stride: usize },
    #[error("nesting F(m,1) kernels never covers a filter of length {0}")]
    CoverageImpossible(usize),
    #[error("F({m},{r}) cannot nest (m < r leaves output holes); no plan exists for this filter")]
    HolesAtDepth { m: usize, r: usize },
    #[error("plan node carries F({plan_m},{plan_r}) but the kernel is F({kernel_m},{kernel_r})")]
    KernelMismatch { plan_m: usize, plan_r: usize, kernel_m: usize, kernel_r: usize },
    #[error("plan does not fit the problem: {0}")]
    Mismatch(String),
    #[error("malformed plan: {0}")]
    Malformed(String),
    #[error("RPN token {index}: {token:?} needs {needed} operands, stack has {available}")]
    RpnUnderflow { index: usize, token: String, needed: usize, available: usize },
    #[error("RPN ends with {0} trees on the stack, expected exactly 1")]
    RpnTrailing(usize),
    #[error("cannot parse RPN token {0:?}")]
    RpnBadToken(String),
    #[error("2D problems with unequal filter extents need one plan per axis")]
    AxesNeedOwnPlans,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One node of a decomposition tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanNode {
    Leaf { m: usize, r: usize, effective_r: usize },
    Nest { levels: usize, child: Box<Plan> },
    Sum { terms: Vec<Plan> },
    Repeat { n: usize, child: Box<Plan> },
}

/// A decomposition tree with an optional resolved output length per node
/// (populated by [`resolve_lengths`]).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    #[serde(flatten)]
    pub node: PlanNode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_len: Option<usize>,
}

impl Plan {
    fn new(node: PlanNode) -> Self {
        Plan { node, output_len: None }
    }

    /// The resolved per-slice output length; errors before resolution.
    pub fn resolved_len(&self) -> Result<usize, PlanError> {
        self.output_len.ok_or_else(Plan::unresolved)
    }

    fn unresolved() -> PlanError {
        PlanError::Malformed("plan has no resolved lengths; call resolve_lengths".into())
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            PlanNode::Leaf { m, r, effective_r } => {
                if *effective_r == *r {
                    write!(f, "F({m},{r})")?;
                } else {
                    write!(f, "F({m},{r})[{effective_r} taps]")?;
                }
            }
            PlanNode::Nest { levels, child } => write!(f, "Nest^{levels}({child})")?,
            PlanNode::Sum { terms } => {
                write!(f, "Sum(")?;
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")?;
            }
            PlanNode::Repeat { n, child } => write!(f, "{n}x{child}")?,
        }
        if let Some(len) = self.output_len {
            write!(f, "<{len}>")?;
        }
        Ok(())
    }
}

/// Distinct outputs one slice of a depth-`d` nest produces:
/// `O_1 = m`, `O_d = (m-1) r^(d-1) + O_(d-1)`.
pub fn distinct_outputs(m: usize, r: usize, depth: usize) -> usize {
    assert!(depth >= 1 && m >= 1 && r >= 1);
    let mut o = m;
    let mut pow = 1usize;
    for _ in 1..depth {
        pow *= r;
        o += (m - 1) * pow;
    }
    o
}

/// Build the decomposition tree for a 1D problem: `filter_len` taps at
/// `stride`, over the kernel `F(m, r)`.
///
/// Stride `S >= 2` becomes a `Sum` of `S` stride-1 phase plans (phase `t`
/// owns `ceil((filter_len - t) / S)` taps, so the longer phases come first);
/// a stride-1 filter longer than `r` becomes a `Nest` of the smallest
/// covering depth; anything else is a single `Leaf`.
///
/// ```
/// use winolab_core::{decompose, resolve_lengths, planner::to_rpn_string};
/// let plan = resolve_lengths(&decompose(5, 2, 2, 2).unwrap()).unwrap();
/// assert_eq!(to_rpn_string(&plan), "K2,2 NEST2 K2,2 REP2 SUM2");
/// ```
pub fn decompose(filter_len: usize, stride: usize, m: usize, r: usize) -> Result<Plan, PlanError> {
    if m == 0 || r == 0 {
        return Err(PlanError::BadKernel { m, r });
    }
    if filter_len == 0 {
        return Err(PlanError::EmptyFilter);
    }
    if stride == 0 {
        return Err(PlanError::BadStride);
    }
    if stride > 1 {
        if filter_len < stride {
            return Err(PlanError::StrideExceedsFilter { filter: filter_len, stride });
        }
        let terms = (0..stride)
            .map(|t| decompose((filter_len - t).div_ceil(stride), 1, m, r))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(Plan::new(PlanNode::Sum { terms }));
    }
    if filter_len <= r {
        return Ok(Plan::new(PlanNode::Leaf { m, r, effective_r: filter_len }));
    }
    if r <= 1 {
        return Err(PlanError::CoverageImpossible(filter_len));
    }
    if m < r {
        return Err(PlanError::HolesAtDepth { m, r });
    }
    let levels = engines::covering_depth(filter_len, r)?;
    let child = Plan::new(PlanNode::Leaf { m, r, effective_r: r });
    Ok(Plan::new(PlanNode::Nest { levels, child: Box::new(child) }))
}

/// Resolve per-node output lengths bottom-up. `Sum` terms are equalized to
/// `M = lcm(term lengths)` by wrapping short terms in `Repeat { M / len }`.
/// Idempotent on already-resolved plans.
pub fn resolve_lengths(plan: &Plan) -> Result<Plan, PlanError> {
    let node = match &plan.node {
        PlanNode::Leaf { m, r, effective_r } => {
            let resolved = Plan {
                node: PlanNode::Leaf { m: *m, r: *r, effective_r: *effective_r },
                output_len: Some(*m),
            };
            return Ok(resolved);
        }
        PlanNode::Nest { levels, child } => {
            if *levels < 2 {
                return Err(PlanError::Malformed(format!(
                    "Nest must have at least 2 levels, got {levels}"
                )));
            }
            let child = resolve_lengths(child)?;
            let PlanNode::Leaf { m, r, .. } = child.node else {
                return Err(PlanError::Malformed(
                    "Nest child must be a Leaf (a kernel ladder nests one kernel)".into(),
                ));
            };
            if m < r {
                return Err(PlanError::HolesAtDepth { m, r });
            }
            let len = distinct_outputs(m, r, *levels);
            PlanNode::Nest { levels: *levels, child: Box::new(child) }
                .with_len(len)
        }
        PlanNode::Repeat { n, child } => {
            if *n == 0 {
                return Err(PlanError::Malformed("Repeat count must be at least 1".into()));
            }
            let child = resolve_lengths(child)?;
            let len = n * child.resolved_len()?;
            PlanNode::Repeat { n: *n, child: Box::new(child) }.with_len(len)
        }
        PlanNode::Sum { terms } => {
            if terms.is_empty() {
                return Err(PlanError::Malformed("Sum must have at least one term".into()));
            }
            let resolved = terms
                .iter()
                .map(resolve_lengths)
                .collect::<Result<Vec<_>, _>>()?;
            let mut m_len = 1usize;
            for t in &resolved {
                m_len = m_len.lcm(&t.resolved_len()?);
            }
            let wrapped = resolved
                .into_iter()
                .map(|t| {
                    let len = t.resolved_len()?;
                    if len == m_len {
                        Ok(t)
                    } else {
                        Ok(Plan {
                            node: PlanNode::Repeat { n: m_len / len, child: Box::new(t) },
                            output_len: Some(m_len),
                        })
                    }
                })
                .collect::<Result<Vec<_>, PlanError>>()?;
            PlanNode::Sum { terms: wrapped }.with_len(m_len)
        }
    };
    Ok(node)
}

impl PlanNode {
    fn with_len(self, len: usize) -> Plan {
        Plan { node: self, output_len: Some(len) }
    }
}

// ---------------------------------------------------------------------------
// RPN serialization.

/// Post-order (reverse Polish) token for plan trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpnToken {
    /// Push a leaf kernel application.
    Kernel { m: usize, r: usize },
    /// Pop one tree, nest it `levels` deep.
    Nest { levels: usize },
    /// Pop one tree, repeat it `n` times.
    Repeat { n: usize },
    /// Pop `arity` trees, sum them (first-popped is the *last* term).
    Sum { arity: usize },
}

impl fmt::Display for RpnToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpnToken::Kernel { m, r } => write!(f, "K{m},{r}"),
            RpnToken::Nest { levels } => write!(f, "NEST{levels}"),
            RpnToken::Repeat { n } => write!(f, "REP{n}"),
            RpnToken::Sum { arity } => write!(f, "SUM{arity}"),
        }
    }
}

impl FromStr for RpnToken {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let bad = || PlanError::RpnBadToken(s.to_string());
        if let Some(rest) = s.strip_prefix("NEST") {
            return rest.parse().map(|levels| RpnToken::Nest { levels }).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("REP") {
            return rest.parse().map(|n| RpnToken::Repeat { n }).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("SUM") {
            return rest.parse().map(|arity| RpnToken::Sum { arity }).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix('K') {
            let (m, r) = rest.split_once(',').ok_or_else(bad)?;
            let m = m.parse().map_err(|_| bad())?;
            let r = r.parse().map_err(|_| bad())?;
            return Ok(RpnToken::Kernel { m, r });
        }
        Err(bad())
    }
}

/// Post-order token stream for a plan. `Leaf.effective_r` and resolved
/// lengths are derived data and are not part of the vocabulary; parsing
/// restores them via [`resolve_lengths`].
pub fn to_rpn(plan: &Plan) -> Vec<RpnToken> {
    fn walk(plan: &Plan, out: &mut Vec<RpnToken>) {
        match &plan.node {
            PlanNode::Leaf { m, r, .. } => out.push(RpnToken::Kernel { m: *m, r: *r }),
            PlanNode::Nest { levels, child } => {
                walk(child, out);
                out.push(RpnToken::Nest { levels: *levels });
            }
            PlanNode::Repeat { n, child } => {
                walk(child, out);
                out.push(RpnToken::Repeat { n: *n });
            }
            PlanNode::Sum { terms } => {
                for t in terms {
                    walk(t, out);
                }
                out.push(RpnToken::Sum { arity: terms.len() });
            }
        }
    }
    let mut out = Vec::new();
    walk(plan, &mut out);
    out
}

/// Rebuild a plan from a post-order token stream (lengths unresolved).
pub fn parse_rpn(tokens: &[RpnToken]) -> Result<Plan, PlanError> {
    let mut stack: Vec<Plan> = Vec::new();
    for (index, tok) in tokens.iter().enumerate() {
        let underflow = |needed: usize, available: usize| PlanError::RpnUnderflow {
            index,
            token: tok.to_string(),
            needed,
            available,
        };
        match *tok {
            RpnToken::Kernel { m, r } => {
                if m == 0 || r == 0 {
                    return Err(PlanError::BadKernel { m, r });
                }
                stack.push(Plan::new(PlanNode::Leaf { m, r, effective_r: r }));
            }
            RpnToken::Nest { levels } => {
                let child = stack.pop().ok_or_else(|| underflow(1, 0))?;
                if !matches!(child.node, PlanNode::Leaf { .. }) {
                    return Err(PlanError::Malformed(
                        "NEST applies to a kernel leaf".into(),
                    ));
                }
                stack.push(Plan::new(PlanNode::Nest { levels, child: Box::new(child) }));
            }
            RpnToken::Repeat { n } => {
                let child = stack.pop().ok_or_else(|| underflow(1, 0))?;
                stack.push(Plan::new(PlanNode::Repeat { n, child: Box::new(child) }));
            }
            RpnToken::Sum { arity } => {
                if arity == 0 {
                    return Err(PlanError::Malformed("SUM0 has no terms".into()));
                }
                if stack.len() < arity {
                    return Err(underflow(arity, stack.len()));
                }
                let terms = stack.split_off(stack.len() - arity);
                stack.push(Plan::new(PlanNode::Sum { terms }));
            }
        }
    }
    match stack.len() {
        1 => Ok(stack.pop().unwrap()),
        n => Err(PlanError::RpnTrailing(n)),
    }
}

/// Space-separated RPN rendering, e.g. `"K2,2 NEST2 K2,2 REP2 SUM2"`.
pub fn to_rpn_string(plan: &Plan) -> String {
    to_rpn(plan)
        .iter()
        .map(RpnToken::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse a space-separated RPN string.
pub fn plan_from_rpn_str(s: &str) -> Result<Plan, PlanError> {
    let tokens = s
        .split_whitespace()
        .map(RpnToken::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        return Err(PlanError::RpnTrailing(0));
    }
    parse_rpn(&tokens)
}

// ---------------------------------------------------------------------------
// Execution.

/// Decompose, resolve, and execute in one call; 2D problems get an
/// independent plan per axis, so rectangular filters are fine.
pub fn plan_convolve<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, PlanError> {
    let plans = spec
        .filter
        .iter()
        .map(|&f| resolve_lengths(&decompose(f, spec.stride, kernel.m, kernel.r)?))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Plan> = plans.iter().collect();
    execute_axis_plans(&refs, x, w, spec, kernel)
}

/// Execute one plan, applied to every spatial axis. 2D filters must be
/// square for this entry point; use [`execute_axis_plans`] otherwise.
pub fn execute_plan<S: Scalar>(
    plan: &Plan,
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, PlanError> {
    if spec.dims() == 2 && spec.filter[0] != spec.filter[1] {
        return Err(PlanError::AxesNeedOwnPlans);
    }
    let refs: Vec<&Plan> = (0..spec.dims()).map(|_| plan).collect();
    execute_axis_plans(&refs, x, w, spec, kernel)
}

/// Execute per-axis plans against channeled tensors.
pub fn execute_axis_plans<S: Scalar>(
    plans: &[&Plan],
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    spec: &ConvSpec,
    kernel: &FloatKernelOf<S>,
) -> Result<TensorOf<S>, PlanError> {
    if plans.len() != spec.dims() {
        return Err(PlanError::Mismatch(format!(
            "{} plans for {} spatial axes",
            plans.len(),
            spec.dims()
        )));
    }
    for plan in plans {
        check_kernel(plan, kernel)?;
    }
    if spec.stride == 1 {
        let depths = plans
            .iter()
            .zip(&spec.filter)
            .map(|(p, &f)| stride1_depth(p, f, kernel))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(engines::nested_conv_depths(x, w, spec, kernel, &depths)?);
    }

    // Stride S: every axis plan must be a Sum with S terms; phase (t_0, t_1)
    // pairs input/filter phase t with term t of the matching axis.
    let s = spec.stride;
    let dims = spec.dims();
    let mut term_lists: Vec<&[Plan]> = Vec::with_capacity(dims);
    for (a, plan) in plans.iter().enumerate() {
        let PlanNode::Sum { terms } = &plan.node else {
            return Err(PlanError::Mismatch(format!(
                "stride {s} needs a Sum plan on axis {a}, got {plan}"
            )));
        };
        if terms.len() != s {
            return Err(PlanError::Mismatch(format!(
                "axis {a}: Sum has {} terms for stride {s}",
                terms.len()
            )));
        }
        if spec.filter[a] < s {
            return Err(PlanError::StrideExceedsFilter { filter: spec.filter[a], stride: s });
        }
        term_lists.push(terms);
    }

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
        let sub: Vec<&Plan> = (0..dims)
            .map(|a| strip_repeat(&term_lists[a][t[a]]))
            .collect();
        let part = execute_axis_plans(&sub, &xp, &wp, &phase_spec, kernel)?;
        add_cropped(&mut y, &part);
        if !crate::tensor::advance(&mut t, s) {
            break;
        }
    }
    Ok(y)
}

/// `Repeat` is bookkeeping: execution slides the child across the full
/// signal, so the wrapper unwraps transparently.
fn strip_repeat(plan: &Plan) -> &Plan {
    match &plan.node {
        PlanNode::Repeat { child, .. } => strip_repeat(child),
        _ => plan,
    }
}

fn check_kernel(plan: &Plan, kernel: &FloatKernelOf<impl Scalar>) -> Result<(), PlanError> {
    match &plan.node {
        PlanNode::Leaf { m, r, .. } => {
            if *m != kernel.m || *r != kernel.r {
                return Err(PlanError::KernelMismatch {
                    plan_m: *m,
                    plan_r: *r,
                    kernel_m: kernel.m,
                    kernel_r: kernel.r,
                });
            }
            Ok(())
        }
        PlanNode::Nest { child, .. } | PlanNode::Repeat { child, .. } => {
            check_kernel(child, kernel)
        }
        PlanNode::Sum { terms } => terms.iter().try_for_each(|t| check_kernel(t, kernel)),
    }
}

/// Depth a stride-1 node prescribes, validated against the actual filter.
fn stride1_depth(
    plan: &Plan,
    filter: usize,
    kernel: &FloatKernelOf<impl Scalar>,
) -> Result<usize, PlanError> {
    match &strip_repeat(plan).node {
        PlanNode::Leaf { r, .. } => {
            if filter > *r {
                return Err(PlanError::Mismatch(format!(
                    "Leaf covers {r} taps, filter has {filter}"
                )));
            }
            Ok(1)
        }
        PlanNode::Nest { levels, .. } => {
            let covered = kernel.r.checked_pow(*levels as u32).unwrap_or(usize::MAX);
            if filter > covered {
                return Err(PlanError::Mismatch(format!(
                    "Nest^{levels} covers {covered} taps, filter has {filter}"
                )));
            }
            Ok(*levels)
        }
        PlanNode::Sum { .. } => Err(PlanError::Mismatch(
            "Sum node at stride 1 has no execution meaning".into(),
        )),
        PlanNode::Repeat { .. } => unreachable!("strip_repeat removed wrappers"),
    }
}
