//! Fast short-convolution engines built from small Winograd kernels.
//!
//! The crate has three layers:
//!
//! * **Kernel generation** ([`kerngen`]): exact-rational construction of the
//!   minimal-filtering triple `(AT, G, BT)` for `F(m, r)` via polynomial
//!   interpolation, plus self-verification of the algebraic identity
//!   `AT * ((BT * x) .* (G * w)) == corr(x, w)`.
//! * **Engines** ([`engines`]): a native sliding-window reference, plain tiled
//!   Winograd, overlap-add Winograd for filters longer than `r`, *nested*
//!   Winograd (the kernel applied to itself across one or more levels), and a
//!   polyphase decomposition for strided convolution. All engines are generic
//!   over `f32`/`f64` and share one tiled core, so degenerate configurations
//!   (single block, depth 1) agree bit for bit.
//! * **Planning and analysis** ([`planner`], [`analysis`]): decomposition of an
//!   arbitrary (filter length, stride) problem into an expression tree over one
//!   kernel, RPN/JSON serialization of that tree, an executor, and an analytic
//!   multiplication-count model cross-checked against a global instrumentation
//!   counter.
//!
//! ```
//! use winolab_core::{generate_kernel, engines, Tensor};
//!
//! let kernel = generate_kernel(2, 2).unwrap().to_float();
//! let x = Tensor::new(vec![1, 7], (0..7).map(|i| i as f64).collect()).unwrap();
//! let w = Tensor::new(vec![1, 1, 4], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
//! let spec = engines::ConvSpec::infer(&x, &w, 1).unwrap();
//! let y = engines::nested_conv(&x, &w, &spec, &kernel, None).unwrap();
//! let y_ref = engines::direct_conv(&x, &w, &spec).unwrap();
//! for (a, b) in y.data().iter().zip(y_ref.data()) {
//!     assert!((a - b).abs() < 1e-12);
//! }
//! ```

pub mod analysis;
pub mod counter;
pub mod engines;
pub mod kerngen;
pub mod planner;
pub mod tensor;
pub mod wten;

pub use analysis::{
    count_mults, count_mults_with, measure_error, predicted_total_mults, speedup_ratio, sweep,
    to_csv, AnalysisError, CostReport, ErrorReport, NestedCounting, OlaCounting, Precision,
};
pub use engines::{ConvSpec, EngineError, EngineKind};
pub use kerngen::{
    generate_kernel, make_points, verify_kernel, FloatKernel, FloatKernelOf, InterpolationPoint,
    KernelError, RatMat, Rational, WinogradKernel,
};
pub use planner::{decompose, resolve_lengths, Plan, PlanError, PlanNode, RpnToken};
pub use tensor::{
    ewmm, mode_product, reorder_filter, reorder_input_slice, Mat, MatOf, ReorderedTile, Scalar,
    Tensor, TensorError, TensorOf,
};
