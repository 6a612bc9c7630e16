//! Property-based tests: structural invariants that should hold for *any*
//! valid configuration, not just the pinned examples.

use proptest::collection::vec as pvec;
use proptest::prelude::*;

use winolab_core::engines::{self, ConvSpec};
use winolab_core::planner::{self, Plan, PlanNode};
use winolab_core::tensor::{mode_product, reorder_filter};
use winolab_core::{generate_kernel, wten, Mat, Tensor};

fn leaf(m: usize, r: usize) -> Plan {
    Plan { node: PlanNode::Leaf { m, r, effective_r: r }, output_len: None }
}

/// Strategy: plan trees shaped like the planner's own output — a Leaf, a
/// Nest over a Leaf, or a Sum of Leaf/Nest terms with optional Repeat
/// wrappers. RPN serialization must round-trip all of them.
fn plan_strategy() -> impl Strategy<Value = Plan> {
    let kernel = (1usize..=4, 1usize..=4);
    let term = (kernel.clone(), 2usize..=4, 1usize..=3, any::<bool>()).prop_map(
        |((m, r), levels, n, nest)| {
            let base = if nest {
                Plan {
                    node: PlanNode::Nest { levels, child: Box::new(leaf(m, r)) },
                    output_len: None,
                }
            } else {
                leaf(m, r)
            };
            if n > 1 {
                Plan { node: PlanNode::Repeat { n, child: Box::new(base) }, output_len: None }
            } else {
                base
            }
        },
    );
    prop_oneof![
        kernel.clone().prop_map(|(m, r)| leaf(m, r)),
        (kernel, 2usize..=4).prop_map(|((m, r), levels)| Plan {
            node: PlanNode::Nest { levels, child: Box::new(leaf(m, r)) },
            output_len: None,
        }),
        pvec(term, 2..=4).prop_map(|terms| Plan {
            node: PlanNode::Sum { terms },
            output_len: None,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn engines_are_linear_in_the_input(
        a in pvec(-1.0f64..1.0, 32),
        b in pvec(-1.0f64..1.0, 32),
        w in pvec(-1.0f64..1.0, 5),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let kernel = generate_kernel(2, 2).unwrap().to_float();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let run = |data: Vec<f64>| {
            let x = Tensor::new(vec![1, 32], data).unwrap();
            let wt = Tensor::new(vec![1, 1, 5], w.clone()).unwrap();
            let spec = ConvSpec::infer(&x, &wt, 1).unwrap();
            engines::nested_conv(&x, &wt, &spec, &kernel, None).unwrap()
        };
        let ya = run(a);
        let yb = run(b);
        let ymix = run(mix);
        for ((za, zb), zm) in ya.data().iter().zip(yb.data()).zip(ymix.data()) {
            let want = alpha * za + beta * zb;
            prop_assert!((zm - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn input_transform_is_invertible(
        m in 2usize..=4,
        r in 2usize..=4,
        seed in any::<u64>(),
    ) {
        // BT is square and nonsingular; applying BT then BT^-1 along an axis
        // restores the tile.
        let k = generate_kernel(m, r).unwrap();
        let l = k.l;
        let bt: Mat = k.bt.to_float();
        let inv: Mat = k.bt.inverse().expect("BT nonsingular").to_float();

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..l * l).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let tile = Tensor::new(vec![l, l], data).unwrap();
        for axis in 0..2 {
            let fwd = mode_product(&tile, &bt, axis).unwrap();
            let back = mode_product(&fwd, &inv, axis).unwrap();
            for (x, y) in tile.data().iter().zip(back.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rpn_round_trips_arbitrary_plans(plan in plan_strategy()) {
        let text = planner::to_rpn_string(&plan);
        let back = planner::plan_from_rpn_str(&text).unwrap();
        prop_assert_eq!(&back, &plan, "RPN `{}` reparsed differently", text);

        // JSON round-trips too, including resolved lengths when they exist.
        let json = serde_json::to_string(&plan).unwrap();
        let reparsed: Plan = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&reparsed, &plan);
    }

    #[test]
    fn filter_reorder_is_a_digit_permutation(
        r in 2usize..=3,
        depth in 1usize..=3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let slots = r.pow(depth as u32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(1..=slots);
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();

        let tile = reorder_filter(&w, r, depth).unwrap();
        // Every original tap appears at the digit position of its index; all
        // remaining slots are zero.
        let mut seen = vec![false; len];
        let mut idx = vec![0usize; depth];
        loop {
            let q: usize = idx
                .iter()
                .enumerate()
                .map(|(j, &d)| d * r.pow(j as u32))
                .sum();
            let v = tile.tensor.get(&idx);
            if q < len {
                prop_assert_eq!(v, w[q]);
                seen[q] = true;
            } else {
                prop_assert_eq!(v, 0.0);
            }
            let mut axis = depth;
            loop {
                if axis == 0 { break; }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < r { break; }
                idx[axis] = 0;
            }
            if idx.iter().all(|&d| d == 0) { break; }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn wten_round_trip_is_bit_exact(
        dims in pvec(1usize..=5, 1..=3),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let n: usize = dims.iter().product();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Stress the payload with full-range finite bit patterns.
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let v = f64::from_bits(rng.random::<u64>());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = Tensor::new(dims, data).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wten");
        wten::write_wten(&path, &t).unwrap();
        let back = wten::read_wten(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
