use nalgebra::DMatrix;
use proptest::prelude::*;
use rolling_lab::algebra::LieAlgebraSpec;
use rolling_lab::{AlgebraVector, GroupModel, GroupPoint, ScalarField};

fn bundled_algebras() -> Vec<LieAlgebraSpec> {
    vec![
        LieAlgebraSpec::abelian(3).unwrap(),
        LieAlgebraSpec::heisenberg(),
        LieAlgebraSpec::four_dim_example(),
        LieAlgebraSpec::filiform(5).unwrap(),
    ]
}

fn models() -> Vec<GroupModel> {
    ["abelian:2", "heisenberg", "paper-example", "filiform"]
        .iter()
        .map(|l| GroupModel::from_label(l).unwrap())
        .collect()
}

fn vector(dim: usize) -> impl Strategy<Value = AlgebraVector> {
    prop::collection::vec(-2.0f64..2.0, dim).prop_map(AlgebraVector::from_vec)
}

/// Random scaling of the structure constants keeps the Jacobi identity.
fn scaled(alg: &LieAlgebraSpec, s: f64) -> LieAlgebraSpec {
    let d = alg.dim();
    let mut t = vec![0.0; d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                t[(i * d + j) * d + k] = s * alg.constant(i, j, k);
            }
        }
    }
    LieAlgebraSpec::new(d, alg.step(), t).unwrap()
}

fn case() -> impl Strategy<Value = (usize, AlgebraVector, AlgebraVector, AlgebraVector, f64)> {
    (0usize..4, -1.5f64..1.5).prop_flat_map(|(a, s)| {
        let d = bundled_algebras()[a].dim();
        (Just(a), vector(d), vector(d), vector(d), Just(s))
    })
}

fn close(a: &AlgebraVector, b: &AlgebraVector, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + a.amax().max(b.amax()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bracket_is_antisymmetric_and_satisfies_jacobi((a, x, y, z, s) in case()) {
        let alg = scaled(&bundled_algebras()[a], s);
        let xy = alg.bracket(&x, &y).unwrap();
        let yx = alg.bracket(&y, &x).unwrap();
        prop_assert!(close(&xy, &(-&yx), 1e-14));
        let jac = alg.bracket(&x, &alg.bracket(&y, &z).unwrap()).unwrap()
            + alg.bracket(&y, &alg.bracket(&z, &x).unwrap()).unwrap()
            + alg.bracket(&z, &alg.bracket(&x, &y).unwrap()).unwrap();
        prop_assert!(jac.amax() <= 1e-12);
        prop_assert!(alg.structure_check().passed);
    }

    #[test]
    fn bch_product_is_associative_with_inverse((a, x, y, z, s) in case()) {
        let alg = scaled(&bundled_algebras()[a], s);
        let left = alg.bch_log_product(&alg.bch_log_product(&x, &y).unwrap(), &z).unwrap();
        let right = alg.bch_log_product(&x, &alg.bch_log_product(&y, &z).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
        prop_assert!(alg.bch_log_product(&x, &(-&x)).unwrap().amax() <= 1e-15);
        prop_assert_eq!(alg.bch_log_product(&x, &alg.zero()).unwrap(), x.clone());
    }

    #[test]
    fn exp_ad_is_a_homomorphism((a, x, y, _z, s) in case()) {
        let alg = scaled(&bundled_algebras()[a], s);
        let xy = alg.bch_log_product(&x, &y).unwrap();
        let lhs = alg.exp_ad(&xy).unwrap();
        let rhs = alg.exp_ad(&x).unwrap() * alg.exp_ad(&y).unwrap();
        let scale = 1.0 + lhs.amax();
        prop_assert!((lhs - rhs).amax() <= 1e-10 * scale);
        let inv = alg.exp_ad(&(-&x)).unwrap() * alg.exp_ad(&x).unwrap();
        prop_assert!((inv - DMatrix::identity(alg.dim(), alg.dim())).amax() <= 1e-10 * scale);
    }

    #[test]
    fn conjugation_is_the_adjoint_action((a, x, y, _z, s) in case()) {
        // log(e^x e^y e^{-x}) = Ad_{e^x} y
        let alg = scaled(&bundled_algebras()[a], s);
        let conj = alg
            .bch_log_product(&alg.bch_log_product(&x, &y).unwrap(), &(-&x))
            .unwrap();
        let ad = alg.exp_ad(&x).unwrap() * &y;
        prop_assert!(close(&conj, &ad, 1e-11));
    }

    #[test]
    fn ad_preserves_brackets((a, x, y, z, s) in case()) {
        let alg = scaled(&bundled_algebras()[a], s);
        let ad = alg.exp_ad(&x).unwrap();
        let lhs = &ad * alg.bracket(&y, &z).unwrap();
        let rhs = alg.bracket(&(&ad * &y), &(&ad * &z)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-11));
    }

    #[test]
    fn invariant_fields_are_translation_derivatives(m in 0usize..4, seed in vector(5), i in 0usize..5) {
        let model = &models()[m];
        let d = model.dim();
        let i = i % d;
        let g = GroupPoint::from_slice(&seed.as_slice()[..d]);
        let h = 1e-5;
        let e = model.alg().basis(i) * h;
        let shift = |left: bool, sign: f64| {
            let x = GroupPoint::from_coords(&e * sign);
            if left { model.multiply(&g, &x).unwrap() } else { model.multiply(&x, &g).unwrap() }
        };
        let fd_left = (shift(true, 1.0).coords - shift(true, -1.0).coords) / (2.0 * h);
        let fd_right = (shift(false, 1.0).coords - shift(false, -1.0).coords) / (2.0 * h);
        prop_assert!(close(&model.left_invariant_field(i, &g).unwrap(), &fd_left, 1e-8));
        prop_assert!(close(&model.right_invariant_field(i, &g).unwrap(), &fd_right, 1e-8));
    }

    #[test]
    fn analytic_and_difference_gradients_agree(m in 0usize..4, seed in vector(5), f in 0usize..3) {
        let model = &models()[m];
        let d = model.dim();
        let g = GroupPoint::from_slice(&seed.as_slice()[..d]);
        let name = ["top", "trig", "gauss"][f];
        let analytic = ScalarField::bundled(name, d).unwrap();
        let numeric = analytic.clone().without_gradient();
        prop_assert!(close(&model.hat_gradient(&analytic, &g), &model.hat_gradient(&numeric, &g), 1e-8));
        prop_assert!(close(&model.tilde_gradient(&analytic, &g), &model.tilde_gradient(&numeric, &g), 1e-8));
    }

    #[test]
    fn adjoint_relates_the_two_gradients(m in 0usize..4, seed in vector(5), f in 0usize..3) {
        // ⟨∇̃f(g), X⟩ = ⟨∇̂f(g), Ad_g X⟩
        let model = &models()[m];
        let d = model.dim();
        let g = GroupPoint::from_slice(&seed.as_slice()[..d]);
        let field = ScalarField::bundled(["top", "trig", "gauss"][f], d).unwrap();
        let lhs = model.tilde_gradient(&field, &g);
        let rhs = model.adjoint_of(&g).unwrap().transpose() * model.hat_gradient(&field, &g);
        prop_assert!(close(&lhs, &rhs, 1e-11));
    }
}
