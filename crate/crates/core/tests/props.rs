//! Property tests for invariants that hold for any input.

use dmpc_core::geometry::{minkowski_sum_box, BoxSet, ConvexSet};
use dmpc_core::model::{Dynamics, OmniRobot, OmniRobotParams, SubsystemModel};
use dmpc_core::ocp::TrajectoryBundle;
use dmpc_core::protocol::{shift_reference, update_reference};
use dmpc_core::simulator::{compute_actual_cost, cost_ratio, CostWeights};
use dmpc_core::{BoxSet64, ConsistencySet64};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn points(n: usize, len: usize) -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, n), len)
        .prop_map(|v| v.into_iter().map(DVector::from_vec).collect())
}

fn box_strategy(dim: usize) -> impl Strategy<Value = BoxSet64> {
    prop::collection::vec((-3.0..3.0f64, 0.0..2.0f64), dim).prop_map(|v| {
        let lo: Vec<f64> = v.iter().map(|p| p.0).collect();
        let hi: Vec<f64> = v.iter().map(|p| p.0 + p.1).collect();
        BoxSet::new(lo, hi).unwrap()
    })
}

proptest! {
    #[test]
    fn shift_moves_forward_and_holds_the_tail(states in points(2, 7), step in 0u64..100) {
        let prev = TrajectoryBundle::reference(3, step, states.clone());
        let next = shift_reference(&prev, step + 1);
        prop_assert_eq!(next.states.len(), states.len());
        prop_assert_eq!(next.time_step, step + 1);
        for i in 0..states.len() {
            prop_assert_eq!(&next.states[i], &states[(i + 1).min(states.len() - 1)]);
        }
        // shifting a whole horizon leaves the last point everywhere
        let mut b = prev;
        for k in 0..states.len() {
            b = shift_reference(&b, step + 1 + k as u64);
        }
        prop_assert!(b.states.iter().all(|x| x == states.last().unwrap()));
    }

    #[test]
    fn update_picks_from_the_two_shifted_sources(
        opt in points(2, 6),
        reference in points(2, 6),
        half in 0.01..1.0f64,
    ) {
        let set = ConsistencySet64::Box(BoxSet::symmetric(&[half, half]).unwrap());
        let opt_b = TrajectoryBundle::reference(0, 0, opt.clone());
        let ref_b = TrajectoryBundle::reference(0, 0, reference.clone());
        let up = update_reference(0, 1, &[], &set, &opt_b, &ref_b, &[]).unwrap();
        let n = opt.len() - 1;
        prop_assert_eq!(up.bundle.states.len(), n + 1);
        prop_assert_eq!(up.adopted.len(), n);
        // without constraints every shifted optimum is adopted
        prop_assert!(up.adopted.iter().all(|a| *a));
        for i in 0..n {
            prop_assert_eq!(&up.bundle.states[i], &opt[i + 1]);
        }
        prop_assert_eq!(&up.bundle.states[n], &up.bundle.states[n - 1]);
    }

    #[test]
    fn box_sum_is_commutative_and_contains_point_sums(
        (a, b, ta, tb) in (1usize..4).prop_flat_map(|d| (box_strategy(d), box_strategy(d), prop::collection::vec(0.0..1.0f64, d), prop::collection::vec(0.0..1.0f64, d)))
    ) {
        let ab = minkowski_sum_box(&a, &b).unwrap();
        let ba = minkowski_sum_box(&b, &a).unwrap();
        prop_assert_eq!(ab.lower(), ba.lower());
        prop_assert_eq!(ab.upper(), ba.upper());
        let p: Vec<f64> = (0..ta.len()).map(|d| a.lower()[d] + ta[d] * (a.upper()[d] - a.lower()[d])).collect();
        let q: Vec<f64> = (0..tb.len()).map(|d| b.lower()[d] + tb[d] * (b.upper()[d] - b.lower()[d])).collect();
        let s: Vec<f64> = p.iter().zip(&q).map(|(x, y)| x + y).collect();
        prop_assert!(ab.contains_point(&s, 1e-12).unwrap());
    }

    #[test]
    fn support_bounds_every_member(b in box_strategy(3), t in prop::collection::vec(0.0..1.0f64, 3), d in prop::collection::vec(-1.0..1.0f64, 3)) {
        let x: Vec<f64> = (0..3).map(|i| b.lower()[i] + t[i] * (b.upper()[i] - b.lower()[i])).collect();
        let dot: f64 = x.iter().zip(&d).map(|(p, q)| p * q).sum();
        prop_assert!(b.support(&d).unwrap() >= dot - 1e-12);
    }

    #[test]
    fn actual_cost_is_linear_in_the_state_weight(xs in points(2, 5), us in points(2, 4), scale in 0.1..10.0f64) {
        let states: Vec<Vec<DVector<f64>>> = xs.iter().map(|x| vec![x.clone()]).collect();
        let inputs: Vec<Vec<DVector<f64>>> = us.iter().map(|u| vec![u.clone()]).collect();
        let w = |q: f64, r: f64| CostWeights {
            q: DMatrix::identity(2, 2) * q,
            r: DMatrix::identity(2, 2) * r,
            target: DVector::zeros(2),
            target_input: DVector::zeros(2),
        };
        let state_only = compute_actual_cost(&states, &inputs, &[w(1.0, 0.0)])[0];
        let scaled = compute_actual_cost(&states, &inputs, &[w(scale, 0.0)])[0];
        prop_assert!(state_only >= 0.0);
        prop_assert!((scaled - scale * state_only).abs() <= 1e-9 * (1.0 + scaled.abs()));
        let both = compute_actual_cost(&states, &inputs, &[w(1.0, 1.0)])[0];
        let input_only = compute_actual_cost(&states, &inputs, &[w(0.0, 1.0)])[0];
        prop_assert!((both - state_only - input_only).abs() <= 1e-9 * (1.0 + both));
    }

    #[test]
    fn robot_steady_state_is_a_fixed_point(
        body in 0.05..0.5f64,
        wheel in 0.01..0.2f64,
        dt in 0.01..1.0f64,
        px in -5.0..5.0f64,
        py in -5.0..5.0f64,
        psi in -4.0..4.0f64,
    ) {
        let robot = OmniRobot::new(OmniRobotParams { body_radius: body, wheel_radius: wheel }).unwrap();
        let target = DVector::from_vec(vec![px, py, psi]);
        let model = SubsystemModel::new(Dynamics::OmniRobot(robot), dt, target.clone(), DVector::zeros(3)).unwrap();
        prop_assert_eq!(model.step(&target, &DVector::zeros(3)).unwrap(), target);
    }

    #[test]
    fn ratio_of_equal_costs_is_one(c in 0.0..1e6f64) {
        prop_assert_eq!(cost_ratio(c, c), 1.0);
    }
}

#[test]
fn hand_computed_actual_cost() {
    // x = 1 then at the target, inputs at their steady value, Q = 2
    let states = vec![vec![DVector::from_element(1, 1.0)], vec![DVector::zeros(1)]];
    let inputs = vec![vec![DVector::zeros(1)]];
    let w = CostWeights {
        q: DMatrix::from_element(1, 1, 2.0),
        r: DMatrix::from_element(1, 1, 7.0),
        target: DVector::zeros(1),
        target_input: DVector::zeros(1),
    };
    assert_eq!(compute_actual_cost(&states, &inputs, &[w]), vec![2.0]);
    assert_eq!(cost_ratio(0.0, 0.0), 1.0);
}
