#![allow(dead_code)]

use vatlab_core::model::ParamSet;
use vatlab_core::{Classifier, ClassifierSpec, Rng, Tensor};

/// Logits `(x0, 0)`: KL Hessian at the origin is `0.25 e1 e1ᵀ`.
pub fn rank_one_model() -> Classifier {
    let spec = ClassifierSpec::new(2, &[], 2);
    let params = ParamSet::from_vec(&spec, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    Classifier::new(spec, params).unwrap()
}

pub fn random_mlp(seed: u64, input: usize, hidden: &[usize], classes: usize) -> Classifier {
    Classifier::init(ClassifierSpec::new(input, hidden, classes), &mut Rng::new(seed)).unwrap()
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, sd: f64) -> Tensor {
    Tensor::matrix(rows, cols, rng.gaussian_vec(rows * cols, sd)).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = na.max(nb);
    if d == 0.0 {
        0.0
    } else {
        diff / d
    }
}
