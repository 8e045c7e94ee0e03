mod common;

use proptest::prelude::*;
use vatlab_core::divergence::kl_batch;
use vatlab_core::oracle::{compare_with_report, dense_hessian, DEFAULT_HESSIAN_STEP};
use vatlab_core::perturb::PerturbConfig;
use vatlab_core::rng::gaussian_unit_vector;
use vatlab_core::tensor::dot;
use vatlab_core::{Rng, Tensor};

use common::random_mlp;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hessian_is_symmetric_and_lambda1_is_its_rayleigh_quotient(seed in any::<u64>(), dim in 1usize..10) {
        let model = random_mlp(seed, dim, &[8], 4);
        let x = Rng::new(seed ^ 1).gaussian_vec(dim, 1.0);
        let r = dense_hessian(&model, &x, DEFAULT_HESSIAN_STEP).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                prop_assert_eq!(r.h.row(i)[j], r.h.row(j)[i]);
            }
        }
        let hu: Vec<f64> = (0..dim).map(|i| dot(r.h.row(i), &r.u1)).collect();
        prop_assert!((dot(&r.u1, &hu) - r.lambda1).abs() < 1e-8);
        prop_assert!((dot(&r.u1, &r.u1) - 1.0).abs() < 1e-12);
        prop_assert!(r.lambda1.abs() >= r.lambda2.abs());
    }

    #[test]
    fn quadratic_form_predicts_small_divergences(seed in any::<u64>()) {
        let model = random_mlp(seed, 2, &[10], 3);
        let x = Rng::new(seed ^ 2).gaussian_vec(2, 1.0);
        let rep = dense_hessian(&model, &x, DEFAULT_HESSIAN_STEP).unwrap();
        let d = gaussian_unit_vector(&mut Rng::new(seed ^ 3), 2).unwrap();
        let r: Vec<f64> = d.data().iter().map(|v| 1e-2 * v).collect();
        let hr: Vec<f64> = (0..2).map(|i| dot(rep.h.row(i), &r)).collect();
        let quad = 0.5 * dot(&r, &hr);
        // a flat direction carries no relative claim
        prop_assume!(quad > 1e-4 * 0.5 * 1e-4 * rep.lambda1.abs() && rep.lambda1 > 1e-6);
        // stay inside one linear region of the ReLU layer
        let pattern = |p: &[f64]| -> Vec<bool> {
            let (w, b) = (model.params.weight(0), model.params.bias(0));
            (0..10).map(|j| p[0] * w[j] + p[1] * w[10 + j] + b[j] > 0.0).collect()
        };
        let xr_v: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();
        prop_assume!(pattern(&x) == pattern(&xr_v));
        let xt = Tensor::matrix(1, 2, x.clone()).unwrap();
        let clean = model.probs(&xt, None).unwrap();
        let xr = Tensor::matrix(1, 2, xr_v).unwrap();
        let direct = kl_batch(&clean, &model.logits(&xr, None).unwrap()).unwrap();
        prop_assert!((quad / direct - 1.0).abs() < 0.05, "{} vs {}", quad, direct);
    }
}

#[test]
fn random_directions_match_the_isotropic_cosine() {
    // E|cos(d, u)| for d uniform on the unit sphere in 8 dimensions
    let expected = 0.29102618165375155;
    let model = random_mlp(3, 8, &[32], 5);
    let x = Rng::new(9).gaussian_vec(8, 1.0);
    let rep = dense_hessian(&model, &x, DEFAULT_HESSIAN_STEP).unwrap();
    let c = compare_with_report(&model, &x, &rep, &PerturbConfig::new(1.0, 0), 4000, 5).unwrap();
    let mean = c.cosines.unwrap().mean;
    assert!((mean - expected).abs() < 0.02, "{}", mean);
}
