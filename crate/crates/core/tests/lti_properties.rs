// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector, RowDVector};
use pidgrad::autodiff::Plain;
use pidgrad::lti::{expm, zoh_discretize, DiscreteModel, LtiError, StateSpaceModel, TransferFunction};
use proptest::prelude::*;

/// Σ_{k=0}^{20} M^k / k!, accumulated term by term.
fn series(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * m / k as f64;
        sum += &term;
    }
    sum
}

fn matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn block_exponential_matches_series(a in matrix(4), b in prop::collection::vec(-1.0f64..1.0, 4)) {
        let dt = 0.1;
        let ss = StateSpaceModel::new(a.clone(), DVector::from_vec(b.clone()), RowDVector::from_element(4, 1.0), 0.0).unwrap();
        let d = zoh_discretize(&ss, dt).unwrap();
        let want_a = series(&(&a * dt));
        prop_assert!((d.a() - &want_a).amax() < 1e-12, "{}", (d.a() - &want_a).amax());

        // B_d = Σ A^k dt^{k+1} / (k+1)! · B
        let mut term = DMatrix::<f64>::identity(4, 4) * dt;
        let mut integral = term.clone();
        for k in 1..=20 {
            term = &term * &a * dt / (k + 1) as f64;
            integral += &term;
        }
        let want_b = integral * DVector::from_vec(b);
        prop_assert!((d.b() - &want_b).amax() < 1e-12);
    }

    #[test]
    fn semigroup(a in matrix(3), x in prop::collection::vec(-2.0f64..2.0, 3)) {
        let ss = StateSpaceModel::new(a, DVector::zeros(3), RowDVector::from_element(3, 1.0), 0.0).unwrap();
        let one = zoh_discretize(&ss, 0.05).unwrap();
        let two = zoh_discretize(&ss, 0.1).unwrap();
        let mid = one.advance(&Plain, &x, 0.0).unwrap();
        let twice = one.advance(&Plain, &mid, 0.0).unwrap();
        let once = two.advance(&Plain, &x, 0.0).unwrap();
        for (p, q) in twice.iter().zip(&once) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn step_is_linear(
        x1 in prop::collection::vec(-2.0f64..2.0, 2),
        x2 in prop::collection::vec(-2.0f64..2.0, 2),
        u1 in -3.0f64..3.0, u2 in -3.0f64..3.0,
        al in -2.0f64..2.0, be in -2.0f64..2.0,
    ) {
        let tf = TransferFunction::new(vec![1.0], vec![20.0, 10.0, 1.0]).unwrap();
        let m = DiscreteModel::from_tf(&tf, 0.1).unwrap();
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| al * a + be * b).collect();
        let (lhs, ly) = m.step_plant(&Plain, &mix, al * u1 + be * u2).unwrap();
        let (r1, y1) = m.step_plant(&Plain, &x1, u1).unwrap();
        let (r2, y2) = m.step_plant(&Plain, &x2, u2).unwrap();
        prop_assert!((ly - (al * y1 + be * y2)).abs() < 1e-12);
        for i in 0..2 {
            prop_assert!((lhs[i] - (al * r1[i] + be * r2[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn first_order_closed_forms() {
    let ss = StateSpaceModel::new(
        DMatrix::from_element(1, 1, -1.0),
        DVector::from_element(1, 1.0),
        RowDVector::from_element(1, 1.0),
        0.0,
    )
    .unwrap();
    let d = zoh_discretize(&ss, 0.1).unwrap();
    assert!((d.a()[(0, 0)] - (-0.1f64).exp()).abs() < 1e-10);
    assert!((d.b()[0] - (1.0 - (-0.1f64).exp())).abs() < 1e-10);
}

#[test]
fn expm_of_rotation_generator() {
    // exp([[0, -θ], [θ, 0]]) is the rotation by θ
    let th = 0.7f64;
    let e = expm(&DMatrix::from_row_slice(2, 2, &[0.0, -th, th, 0.0]));
    let want = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
    assert!((e - want).amax() < 1e-13);
}

#[test]
fn system2_settles_at_dc_gain() {
    let tf = TransferFunction::new(vec![1.0], vec![20.0, 10.0, 1.0]).unwrap();
    assert_eq!(tf.dc_gain(), 1.0);
    let m = DiscreteModel::from_tf(&tf, 0.1).unwrap();
    let mut x = vec![0.0; 2];
    let mut y = 0.0;
    for _ in 0..1000 {
        let (next, out) = m.step_plant(&Plain, &x, 1.0).unwrap();
        x = next;
        y = out;
    }
    assert!((y - 1.0).abs() < 0.05, "{y}");
}

#[test]
fn delay_must_be_whole_samples() {
    let tf = TransferFunction::with_delay(vec![2.0], vec![1.0, -0.995], 0.02).unwrap();
    assert_eq!(DiscreteModel::from_tf(&tf, 0.02).unwrap().delay_steps(), 1);
    assert_eq!(DiscreteModel::from_tf(&tf, 0.01).unwrap().delay_steps(), 2);
    let err = DiscreteModel::from_tf(&tf, 0.03).unwrap_err();
    assert!(matches!(err, LtiError::FractionalDelay { .. }));
    assert!(err.to_string().contains("integer multiple"));
}
