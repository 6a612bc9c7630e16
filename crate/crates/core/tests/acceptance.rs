//! Acceptance suite: one test per shipped guarantee, each printing a
//! `PASS` line with the measured numbers (visible with `--nocapture`, and
//! dumped automatically if the assertion after it fails).
//!
//! Tests that read the global multiplication counter rely on
//! `counter::measure`'s internal lock; tests that merely run engines hold
//! `counter::exclusive()` so their multiplications never leak into a
//! concurrent measurement.

use std::time::Instant;

use num_rational::Rational64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use winolab_core::engines::{self, ConvSpec};
use winolab_core::planner::{self, PlanNode};
use winolab_core::{
    count_mults, counter, generate_kernel, measure_error, predicted_total_mults, speedup_ratio,
    verify_kernel, EngineKind, Precision, Tensor,
};

fn pass(name: &str, detail: String) {
    println!("PASS {name}: {detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn rel_error(y: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(y.shape(), reference.shape(), "shape mismatch vs oracle");
    let scale = reference.max_abs();
    let mut worst = 0.0f64;
    for (a, b) in y.data().iter().zip(reference.data()) {
        worst = worst.max((a - b).abs());
    }
    worst / scale
}

#[test]
fn kernel_grid_is_exact_in_rational_arithmetic() {
    let start = Instant::now();
    let mut checked = 0usize;
    for m in 1..=6 {
        for r in 1..=6 {
            if m + r - 1 > 9 {
                continue;
            }
            let k = generate_kernel(m, r).unwrap();
            assert!(verify_kernel(&k), "F({m},{r}) failed exact verification");
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass(
        "kernel exactness",
        format!("{checked} kernels F(m,r), m,r in 1..=6, l <= 9, all exact in {elapsed:.2}s"),
    );
    assert_eq!(checked, 33);
    assert!(elapsed < 10.0, "kernel grid took {elapsed:.2}s (budget 10s)");
}

#[test]
fn engines_match_brute_force_on_the_full_grid() {
    let _guard = counter::exclusive();
    let start = Instant::now();
    const TRIALS: usize = 50;
    const TOL: f64 = 1e-6;

    let kernels = [(2usize, 2usize), (3, 3), (4, 4), (6, 3)];
    let mut cells = 0usize;
    let mut worst = 0.0f64;
    let mut worst_cell = String::new();

    let mut run_cell = |label: &str,
                        m: usize,
                        r: usize,
                        filter: usize,
                        stride: usize,
                        f: &dyn Fn(&Tensor, &Tensor, &ConvSpec) -> Tensor| {
        let out = 8usize;
        let side = (out - 1) * stride + filter;
        let seed = (m * 1_000_000 + r * 100_000 + filter * 1000 + stride * 10) as u64
            ^ (label.len() as u64) << 56;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell_worst = 0.0f64;
        for _ in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![1, side, side]);
            let w = random_tensor(&mut rng, vec![1, 1, filter, filter]);
            let spec = ConvSpec::infer(&x, &w, stride).unwrap();
            let reference = engines::direct_conv(&x, &w, &spec).unwrap();
            let y = f(&x, &w, &spec);
            cell_worst = cell_worst.max(rel_error(&y, &reference));
        }
        assert!(
            cell_worst <= TOL,
            "{label} F({m},{r}) R={filter} S={stride}: max rel {cell_worst:.3e} > {TOL:.0e}"
        );
        cells += 1;
        if cell_worst > worst {
            worst = cell_worst;
            worst_cell = format!("{label} F({m},{r}) R={filter} S={stride}");
        }
    };

    for &(m, r) in &kernels {
        let kernel = generate_kernel(m, r).unwrap().to_float();
        for filter in 3..=12 {
            // Stride-1 rows: OLA, nested (auto depth), plan-executed, and —
            // where the filter fits inside the kernel — direct Winograd.
            run_cell("ola", m, r, filter, 1, &|x, w, s| {
                engines::ola_conv(x, w, s, &kernel).unwrap()
            });
            run_cell("nested", m, r, filter, 1, &|x, w, s| {
                engines::nested_conv(x, w, s, &kernel, None).unwrap()
            });
            run_cell("plan", m, r, filter, 1, &|x, w, s| {
                planner::plan_convolve(x, w, s, &kernel).unwrap()
            });
            if filter <= r {
                run_cell("direct", m, r, filter, 1, &|x, w, s| {
                    engines::winograd_conv(x, w, s, &kernel).unwrap()
                });
            }
            // Strided rows: polyphase engine and the plan executor.
            for stride in 2..=3 {
                run_cell("stride", m, r, filter, stride, &|x, w, s| {
                    engines::strided_conv(x, w, s, &kernel).unwrap()
                });
                run_cell("plan", m, r, filter, stride, &|x, w, s| {
                    planner::plan_convolve(x, w, s, &kernel).unwrap()
                });
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    pass(
        "oracle equivalence",
        format!(
            "{cells} cells x {TRIALS} trials, worst rel {worst:.3e} ({worst_cell}), {elapsed:.1}s"
        ),
    );
    assert!(elapsed < 120.0, "oracle grid took {elapsed:.1}s (budget 120s)");
}

#[test]
fn ola_to_nested_speedups_match_reported_measurements() {
    let nine = speedup_ratio(9, 3, 3, EngineKind::Ola, EngineKind::Nested, 2).unwrap();
    let five = speedup_ratio(5, 3, 3, EngineKind::Ola, EngineKind::Nested, 2).unwrap();
    assert_eq!(nine, Rational64::new(81, 25)); // 3.24
    assert_eq!(five, Rational64::new(36, 25)); // 1.44

    let nine_f = *nine.numer() as f64 / *nine.denom() as f64;
    let five_f = *five.numer() as f64 / *five.denom() as f64;
    let dev9 = (nine_f / 3.29 - 1.0).abs();
    let dev5 = (five_f / 1.43 - 1.0).abs();
    pass(
        "speedup anchors",
        format!(
            "9x9 F(3,3): {nine_f} vs measured 3.29 ({:.2}% off); 5x5: {five_f} vs 1.43 ({:.2}% off)",
            dev9 * 100.0,
            dev5 * 100.0
        ),
    );
    assert!(dev9 <= 0.03, "9x9 ratio {nine_f} deviates {dev9:.4} from 3.29");
    assert!(dev5 <= 0.03, "5x5 ratio {five_f} deviates {dev5:.4} from 1.43");
}

#[test]
fn nested_dominates_ola_with_growing_gap() {
    let start = Instant::now();
    for &(m, r) in &[(2usize, 2usize), (3, 3)] {
        let mut prev_gap: Option<Rational64> = None;
        for filter in (r + 1)..=16 {
            let ola = count_mults(EngineKind::Ola, filter, m, r, 2, 1).unwrap();
            let nested = count_mults(EngineKind::Nested, filter, m, r, 2, 1).unwrap();
            assert!(
                nested.mults_per_output <= ola.mults_per_output,
                "F({m},{r}) R={filter}: nested {} > ola {}",
                nested.mults_per_output,
                ola.mults_per_output
            );
            let gap = ola.mults_per_output - nested.mults_per_output;
            if let Some(p) = prev_gap {
                assert!(
                    gap >= p,
                    "F({m},{r}) R={filter}: gap {gap} shrank from {p}"
                );
            }
            prev_gap = Some(gap);
        }
    }

    // Small filter inside a large kernel: one direct kernel beats both
    // decompositions.
    let direct = count_mults(EngineKind::DirectWinograd, 4, 6, 3, 2, 1).unwrap();
    let ola = count_mults(EngineKind::Ola, 4, 6, 3, 2, 1).unwrap();
    let nested = count_mults(EngineKind::Nested, 4, 6, 3, 2, 1).unwrap();
    assert!(direct.mults_per_output < ola.mults_per_output);
    assert!(direct.mults_per_output < nested.mults_per_output);

    let elapsed = start.elapsed().as_secs_f64();
    pass(
        "cost dominance",
        format!(
            "nested <= OLA with nondecreasing gap for F(2,2), F(3,3), R up to 16; \
             direct F(6,5) beats both at R=4 ({} vs {} and {}); {elapsed:.3}s",
            direct.mults_per_output, ola.mults_per_output, nested.mults_per_output
        ),
    );
    assert!(elapsed < 1.0, "cost sweep took {elapsed:.3}s (budget 1s)");
}

#[test]
fn closed_forms_equal_instrumented_counts_exactly() {
    // (method, R, kernel, stride, out side, cin, cout) cells; each compares
    // the analysis closed form against the engine's own multiplication
    // counter — integer equality, no tolerance.
    struct Cell {
        label: &'static str,
        method: EngineKind,
        filter: usize,
        m: usize,
        r: usize,
        stride: usize,
        out: usize,
        cin: usize,
        cout: usize,
    }
    let cells = [
        Cell { label: "native 3x3", method: EngineKind::Native, filter: 3, m: 3, r: 3, stride: 1, out: 4, cin: 1, cout: 1 },
        Cell { label: "direct 3x3 under F(4,4)", method: EngineKind::DirectWinograd, filter: 3, m: 4, r: 4, stride: 1, out: 8, cin: 1, cout: 1 },
        Cell { label: "ola 9x9 under F(3,3)", method: EngineKind::Ola, filter: 9, m: 3, r: 3, stride: 1, out: 6, cin: 1, cout: 1 },
        Cell { label: "nested 9x9 under F(3,3)", method: EngineKind::Nested, filter: 9, m: 3, r: 3, stride: 1, out: 17, cin: 1, cout: 1 },
        Cell { label: "nested 4x4 under F(2,2)", method: EngineKind::Nested, filter: 4, m: 2, r: 2, stride: 1, out: 8, cin: 1, cout: 1 },
        Cell { label: "nested 3x3 under F(2,2) multichannel", method: EngineKind::Nested, filter: 3, m: 2, r: 2, stride: 1, out: 4, cin: 2, cout: 3 },
        Cell { label: "plan 5x5 stride 2 under F(2,2)", method: EngineKind::Plan, filter: 5, m: 2, r: 2, stride: 2, out: 8, cin: 1, cout: 1 },
        Cell { label: "stride-3 5x5 under F(3,3)", method: EngineKind::Nested, filter: 5, m: 3, r: 3, stride: 3, out: 6, cin: 1, cout: 1 },
    ];

    let mut lines = Vec::new();
    for c in &cells {
        let report = count_mults(c.method, c.filter, c.m, c.r, 2, c.stride).unwrap();
        let predicted = predicted_total_mults(&report, &[c.out, c.out], c.cin, c.cout);

        let kernel = generate_kernel(c.m, c.r).unwrap().to_float();
        let side = (c.out - 1) * c.stride + c.filter;
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE + c.filter as u64);
        let x = random_tensor(&mut rng, vec![c.cin, side, side]);
        let w = random_tensor(&mut rng, vec![c.cout, c.cin, c.filter, c.filter]);
        let spec = ConvSpec::infer(&x, &w, c.stride).unwrap();

        let (y, counted) = counter::measure(|| match c.method {
            EngineKind::Native => engines::direct_conv(&x, &w, &spec).unwrap(),
            EngineKind::DirectWinograd => engines::winograd_conv(&x, &w, &spec, &kernel).unwrap(),
            EngineKind::Ola => engines::ola_conv(&x, &w, &spec, &kernel).unwrap(),
            EngineKind::Nested => {
                engines::convolve(c.method, &x, &w, &spec, Some(&kernel), None).unwrap()
            }
            EngineKind::Plan => planner::plan_convolve(&x, &w, &spec, &kernel).unwrap(),
        });
        assert_eq!(y.shape(), spec.out_shape(), "{}: bad output shape", c.label);
        assert_eq!(
            counted, predicted,
            "{}: engine counted {counted}, closed form says {predicted}",
            c.label
        );
        lines.push(format!("{} = {counted}", c.label));
    }
    pass(
        "formula vs counter",
        format!("{} cells exact: {}", cells.len(), lines.join("; ")),
    );
    assert!(cells.len() >= 6);
}

#[test]
fn slice_laws_hold_for_equal_and_unequal_kernels() {
    // m = r: one slice consumes l^d multiplications and yields m^d outputs.
    for &(m, r, max_d) in &[(2usize, 2usize, 3usize), (3, 3, 2), (4, 4, 1)] {
        let kernel = generate_kernel(m, r).unwrap().to_float();
        let l = m + r - 1;
        for d in 1..=max_d {
            let outputs = m.pow(d as u32);
            let filter = r.pow(d as u32);
            let input = outputs + filter - 1;
            let x = Tensor::new(vec![1, input], (0..input).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let w = Tensor::new(vec![1, 1, filter], (0..filter).map(|i| 1.0 / (i + 1) as f64).collect())
                .unwrap();
            let spec = ConvSpec::infer(&x, &w, 1).unwrap();
            let (y, counted) = counter::measure(|| {
                engines::nested_conv(&x, &w, &spec, &kernel, Some(d)).unwrap()
            });
            assert_eq!(y.shape(), &[1, outputs], "F({m},{r}) depth {d}");
            assert_eq!(counted, (l as u64).pow(d as u32), "F({m},{r}) depth {d}");
        }
    }

    // m != r: the distinct-output recursion O_d = (m-1) r^(d-1) + O_(d-1),
    // O_1 = m, checked against F(6,3) and against a real single-slice run.
    let (m, r) = (6usize, 3usize);
    let mut expected = m;
    assert_eq!(planner::distinct_outputs(m, r, 1), expected);
    for d in 2..=4 {
        expected += (m - 1) * r.pow(d as u32 - 1);
        assert_eq!(planner::distinct_outputs(m, r, d), expected, "O_{d} for F(6,3)");
    }
    assert_eq!(planner::distinct_outputs(6, 3, 2), 21);
    assert_eq!(planner::distinct_outputs(6, 3, 3), 66);

    let kernel = generate_kernel(6, 3).unwrap().to_float();
    let filter = 9;
    let input = 21 + filter - 1; // exactly the depth-2 window
    let x = Tensor::new(vec![1, input], (0..input).map(|i| (i as f64).cos()).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, filter], (1..=filter).map(|i| 1.0 / i as f64).collect()).unwrap();
    let spec = ConvSpec::infer(&x, &w, 1).unwrap();
    let (y, counted) =
        counter::measure(|| engines::nested_conv(&x, &w, &spec, &kernel, Some(2)).unwrap());
    assert_eq!(y.shape(), &[1, 21]);
    assert_eq!(counted, 64);

    pass(
        "slice count laws",
        "l^d mults / m^d outputs per slice for F(2,2), F(3,3), F(4,4); \
         O_d(F(6,3)) = 6, 21, 66, 201 with a 64-mult depth-2 slice"
            .to_string(),
    );
}

#[test]
fn stride_two_length_five_plan_has_the_canonical_shape() {
    let _guard = counter::exclusive();
    let plan = planner::resolve_lengths(&planner::decompose(5, 2, 2, 2).unwrap()).unwrap();

    // Shape: Sum[ Nest(2, F(2,2)), Repeat(2, F(2,2)) ].
    let PlanNode::Sum { terms } = &plan.node else {
        panic!("expected Sum at the root, got {plan}")
    };
    assert_eq!(terms.len(), 2);
    match &terms[0].node {
        PlanNode::Nest { levels: 2, child } => match child.node {
            PlanNode::Leaf { m: 2, r: 2, effective_r: 2 } => {}
            ref other => panic!("bad nest child {other:?}"),
        },
        other => panic!("expected Nest(2), got {other:?}"),
    }
    match &terms[1].node {
        PlanNode::Repeat { n: 2, child } => match child.node {
            PlanNode::Leaf { m: 2, r: 2, effective_r: 2 } => {}
            ref other => panic!("bad repeat child {other:?}"),
        },
        other => panic!("expected Repeat(2), got {other:?}"),
    }
    assert_eq!(plan.output_len, Some(4));

    let rpn = planner::to_rpn_string(&plan);
    assert_eq!(rpn, "K2,2 NEST2 K2,2 REP2 SUM2");
    let reparsed = planner::resolve_lengths(&planner::plan_from_rpn_str(&rpn).unwrap()).unwrap();
    assert_eq!(reparsed, plan);

    // Executes to oracle equality in 1D and 2D.
    let kernel = generate_kernel(2, 2).unwrap().to_float();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let x = random_tensor(&mut rng, vec![1, 23 + trial]);
        let w = random_tensor(&mut rng, vec![1, 1, 5]);
        let spec = ConvSpec::infer(&x, &w, 2).unwrap();
        let y = planner::execute_plan(&plan, &x, &w, &spec, &kernel).unwrap();
        worst = worst.max(rel_error(&y, &engines::direct_conv(&x, &w, &spec).unwrap()));

        let x = random_tensor(&mut rng, vec![2, 21, 24]);
        let w = random_tensor(&mut rng, vec![2, 2, 5, 5]);
        let spec = ConvSpec::infer(&x, &w, 2).unwrap();
        let y = planner::execute_plan(&plan, &x, &w, &spec, &kernel).unwrap();
        worst = worst.max(rel_error(&y, &engines::direct_conv(&x, &w, &spec).unwrap()));
    }
    pass(
        "stride-2 plan shape",
        format!("Sum[Nest(2,F(2,2)), Repeat(2,F(2,2))], RPN \"{rpn}\", exec worst rel {worst:.3e}"),
    );
    assert!(worst <= 1e-6);
}

#[test]
fn f32_nesting_is_more_stable_than_one_big_kernel() {
    let _guard = counter::exclusive();
    const TRIALS: usize = 20;
    const SEED: u64 = 2026;

    let nested22 =
        measure_error(EngineKind::Nested, 9, 2, 2, 2, Precision::F32, TRIALS, SEED).unwrap();
    let nested33 =
        measure_error(EngineKind::Nested, 9, 3, 3, 2, Precision::F32, TRIALS, SEED).unwrap();
    let direct49 =
        measure_error(EngineKind::DirectWinograd, 9, 4, 4, 2, Precision::F32, TRIALS, SEED)
            .unwrap();
    assert_eq!(direct49.kernel_r, 9, "direct path must enlarge the kernel to the filter");

    let margin22 = direct49.max_rel / nested22.max_rel;
    let margin33 = direct49.max_rel / nested33.max_rel;
    pass(
        "f32 stability ordering",
        format!(
            "9x9 filters: nested F(2,2) max rel {:.3e}, nested F(3,3) {:.3e}, direct F(4,9) {:.3e}; \
             margins {margin22:.0}x / {margin33:.0}x (recorded, not asserted)",
            nested22.max_rel, nested33.max_rel, direct49.max_rel
        ),
    );
    assert!(
        nested22.max_rel < direct49.max_rel,
        "nested F(2,2) ({:.3e}) must beat direct F(4,9) ({:.3e})",
        nested22.max_rel,
        direct49.max_rel
    );
    assert!(
        nested33.max_rel < direct49.max_rel,
        "nested F(3,3) ({:.3e}) must beat direct F(4,9) ({:.3e})",
        nested33.max_rel,
        direct49.max_rel
    );
}
