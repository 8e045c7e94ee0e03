//! Adversarial, virtual adversarial and random perturbations.
//!
//! All functions work on a batch `x` of shape `[m, input_dim]` and return a
//! perturbation of the same shape, normalized row by row, so a single
//! example is just a batch of one.
//!
//! The virtual adversarial direction is the dominant eigenvector of the
//! Hessian `H` of `r -> KL[p(y|x, θ̂) || p(y|x + r, θ̂)]` at `r = 0`. The
//! gradient of that divergence vanishes at `r = 0`, so `H d` is read off the
//! gradient at `r = ξ d` instead and the power method `d <- normalize(H d)`
//! is run `K` times. Each iteration costs one reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::model::Classifier;
use crate::rng::{gaussian_unit_rows, Rng};
use crate::tensor::{l2_norm, Tensor};
use crate::{Error, Result};

/// Finite-difference scale used for every Hessian-vector product.
pub const DEFAULT_XI: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Perturbation radius in input units.
    pub epsilon: f64,
    /// Finite-difference scale; absolute, not relative to `|x|`.
    pub xi: f64,
    /// Power iterations `K`; 0 means a uniformly random direction.
    pub power_iterations: usize,
    pub norm: Norm,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { epsilon: 2.0, xi: DEFAULT_XI, power_iterations: 1, norm: Norm::L2 }
    }
}

impl PerturbConfig {
    pub fn new(epsilon: f64, power_iterations: usize) -> Self {
        PerturbConfig { epsilon, power_iterations, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::InvalidConfig(format!("xi must be finite and > 0, got {}", self.xi)));
        }
        Ok(())
    }

    /// The virtual adversarial and random perturbations are L2-constrained.
    fn validate_virtual(&self) -> Result<()> {
        self.validate()?;
        if self.norm != Norm::L2 {
            return Err(Error::InvalidConfig("virtual adversarial perturbations use the L2 norm".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    Adversarial,
    VirtualAdversarial,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub r: Tensor,
    pub kind: PerturbationKind,
    /// Power iterations actually applied.
    pub k_used: usize,
    /// Rows whose gradient vanished; those fall back to their random start
    /// (virtual) or to zero (adversarial).
    pub degenerate: Vec<bool>,
    /// Reverse sweeps spent computing this perturbation.
    pub backprops: u32,
}

impl Perturbation {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Scales each row of a gradient onto the `norm` ball of radius `epsilon`:
/// `ε g / |g|_2` for L2, `ε sign(g)` for L∞. Rows with `g = 0` come back as
/// zero and are flagged.
pub fn project_gradient(g: &Tensor, epsilon: f64, norm: Norm) -> (Tensor, Vec<bool>) {
    let mut r = Tensor::zeros(g.shape());
    let mut degenerate = vec![false; g.rows()];
    for i in 0..g.rows() {
        let gi = g.row(i);
        let n = l2_norm(gi);
        if n == 0.0 {
            degenerate[i] = true;
            continue;
        }
        let out = r.row_mut(i);
        match norm {
            Norm::L2 => out.iter_mut().zip(gi).for_each(|(o, v)| *o = epsilon * v / n),
            Norm::Linf => out.iter_mut().zip(gi).for_each(|(o, &v)| {
                *o = if v > 0.0 {
                    epsilon
                } else if v < 0.0 {
                    -epsilon
                } else {
                    0.0
                }
            }),
        }
    }
    (r, degenerate)
}

/// `p(y | x, θ̂)` as a plain tensor. Used as the detached target of every
/// divergence below.
pub fn clean_distribution(model: &Classifier, x: &Tensor, noise: Option<&mut Rng>) -> Result<Tensor> {
    model.probs(x, noise)
}

/// Gradient (linear) approximation of the adversarial perturbation against
/// the one-hot label distribution. One reverse sweep.
pub fn adversarial_perturbation(
    model: &Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &PerturbConfig,
    noise: Option<&mut Rng>,
) -> Result<Perturbation> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let xv = tape.leaf(x.clone());
    let logits = model.logits_on_tape(&mut tape, &bound, xv, noise)?;
    let loss = tape.nll(logits, labels)?;
    tape.forward(&[])?;
    let g = tape.backward(loss, &[xv])?.remove(0);
    let (r, degenerate) = project_gradient(&g, cfg.epsilon, cfg.norm);
    Ok(Perturbation {
        r,
        kind: PerturbationKind::Adversarial,
        k_used: 0,
        degenerate,
        backprops: tape.backward_calls() as u32,
    })
}

/// Finite-difference Hessian-vector product `H d ≈ ∇_r D(r)|_{r = ξ d} / ξ`,
/// row by row, where `D(r) = KL[clean || p(y | x + r, θ̂)]`.
///
/// `d` should have unit rows. The model is evaluated without hidden noise
/// so that the gradient at `r = 0` really vanishes; `clean` must be the
/// noise-free distribution as well. One reverse sweep.
pub fn hvp_finite_difference(
    model: &Classifier,
    x: &Tensor,
    clean: &Tensor,
    d: &Tensor,
    xi: f64,
) -> Result<Tensor> {
    Ok(hvp_counted(model, x, clean, d, xi)?.0)
}

fn hvp_counted(model: &Classifier, x: &Tensor, clean: &Tensor, d: &Tensor, xi: f64) -> Result<(Tensor, u64)> {
    if d.shape() != x.shape() {
        return Err(Error::ShapeMismatch { op: "hvp", detail: format!("d {:?} vs x {:?}", d.shape(), x.shape()) });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let xv = tape.constant(x.clone());
    let rv = tape.leaf(d.map(|v| xi * v));
    let xr = tape.add(xv, rv)?;
    let logits = model.logits_on_tape(&mut tape, &bound, xr, None)?;
    let target = tape.constant(clean.clone());
    let kl = tape.kl_rows(target, logits)?;
    let total = tape.sum(kl)?;
    tape.forward(&[])?;
    let g = tape.backward(total, &[rv])?.remove(0);
    let hd = g.map(|v| v / xi);
    if !hd.is_finite() {
        return Err(Error::NonFinite { node: rv.index(), op: "hvp" });
    }
    Ok((hd, tape.backward_calls()))
}

/// Power iteration from explicit unit start directions `d0`.
///
/// `K = cfg.power_iterations` must be at least 1. Never looks at labels.
pub fn virtual_adversarial_from(
    model: &Classifier,
    x: &Tensor,
    clean: &Tensor,
    d0: Tensor,
    cfg: &PerturbConfig,
) -> Result<Perturbation> {
    cfg.validate_virtual()?;
    if cfg.power_iterations == 0 {
        return Err(Error::InvalidConfig("virtual adversarial perturbation needs K >= 1".into()));
    }
    let mut d = d0;
    let mut degenerate = vec![false; d.rows()];
    let mut backprops = 0;
    for _ in 0..cfg.power_iterations {
        let (hd, calls) = hvp_counted(model, x, clean, &d, cfg.xi)?;
        backprops += calls as u32;
        for i in 0..d.rows() {
            let row = hd.row(i);
            let n = l2_norm(row);
            if n > 0.0 {
                d.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = v / n);
                degenerate[i] = false;
            } else {
                degenerate[i] = true;
            }
        }
    }
    let r = d.map(|v| cfg.epsilon * v);
    Ok(Perturbation {
        r,
        kind: PerturbationKind::VirtualAdversarial,
        k_used: cfg.power_iterations,
        degenerate,
        backprops,
    })
}

/// Virtual adversarial perturbation with Gaussian-drawn start directions.
/// Consumes exactly `K` reverse sweeps.
pub fn virtual_adversarial_perturbation(
    model: &Classifier,
    x: &Tensor,
    clean: &Tensor,
    cfg: &PerturbConfig,
    rng: &mut Rng,
) -> Result<Perturbation> {
    let d0 = gaussian_unit_rows(rng, x.rows(), x.cols())?;
    virtual_adversarial_from(model, x, clean, d0, cfg)
}

/// Uniform point on the sphere of radius `epsilon` in `dim` dimensions,
/// returned as a `[1, dim]` row.
pub fn random_sphere_perturbation(dim: usize, epsilon: f64, rng: &mut Rng) -> Result<Perturbation> {
    random_sphere_batch(1, dim, epsilon, rng)
}

pub fn random_sphere_batch(rows: usize, dim: usize, epsilon: f64, rng: &mut Rng) -> Result<Perturbation> {
    let d = gaussian_unit_rows(rng, rows, dim)?;
    Ok(Perturbation {
        r: d.map(|v| epsilon * v),
        kind: PerturbationKind::Random,
        k_used: 0,
        degenerate: vec![false; rows],
        backprops: 0,
    })
}

/// `r_K`: a random sphere point for `K = 0`, the `K`-step virtual
/// adversarial perturbation otherwise.
pub fn perturbation_rk(
    model: &Classifier,
    x: &Tensor,
    clean: &Tensor,
    cfg: &PerturbConfig,
    rng: &mut Rng,
) -> Result<Perturbation> {
    let d0 = gaussian_unit_rows(rng, x.rows(), x.cols())?;
    perturbation_rk_from(model, x, clean, d0, cfg)
}

/// [`perturbation_rk`] with pinned start directions `d0` (unit rows).
pub fn perturbation_rk_from(
    model: &Classifier,
    x: &Tensor,
    clean: &Tensor,
    d0: Tensor,
    cfg: &PerturbConfig,
) -> Result<Perturbation> {
    if cfg.power_iterations > 0 {
        return virtual_adversarial_from(model, x, clean, d0, cfg);
    }
    cfg.validate_virtual()?;
    if d0.shape() != x.shape() {
        return Err(Error::ShapeMismatch { op: "perturbation", detail: format!("d0 {:?} vs x {:?}", d0.shape(), x.shape()) });
    }
    Ok(Perturbation {
        r: d0.map(|v| cfg.epsilon * v),
        kind: PerturbationKind::Random,
        k_used: 0,
        degenerate: vec![false; x.rows()],
        backprops: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierSpec, ParamSet};

    /// Binary softmax model with logits `(x0, 0)`. At `x = 0` the KL
    /// Hessian is `σ'(0) e1 e1ᵀ = 0.25 e1 e1ᵀ`.
    pub(crate) fn rank_one_model() -> Classifier {
        let spec = ClassifierSpec::new(2, &[], 2);
        let params = ParamSet::from_vec(&spec, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        Classifier::new(spec, params).unwrap()
    }

    fn origin() -> Tensor {
        Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn closed_form_directions() {
        let g = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let (r, _) = project_gradient(&g, 0.5, Norm::L2);
        assert!((r.data()[0] - 0.3).abs() < 1e-15 && (r.data()[1] - 0.4).abs() < 1e-15);
        let g = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let (r, _) = project_gradient(&g, 0.1, Norm::Linf);
        assert_eq!(r.data(), &[0.1, -0.1]);
        let (r, _) = project_gradient(&g, 0.0, Norm::L2);
        assert!(r.data().iter().all(|&v| v == 0.0));
        let (r, deg) = project_gradient(&Tensor::zeros(&[1, 2]), 1.0, Norm::L2);
        assert!(deg[0] && r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hvp_on_rank_one_model() {
        let m = rank_one_model();
        let x = origin();
        let clean = clean_distribution(&m, &x, None).unwrap();
        let e1 = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let hd = hvp_finite_difference(&m, &x, &clean, &e1, DEFAULT_XI).unwrap();
        assert!((hd.data()[0] - 0.25).abs() < 1e-4, "{:?}", hd);
        assert!(hd.data()[1].abs() < 1e-6);
        let e2 = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let hd = hvp_finite_difference(&m, &x, &clean, &e2, DEFAULT_XI).unwrap();
        assert!(hd.data()[0].abs() < 1e-6 && hd.data()[1].abs() < 1e-6);
    }

    #[test]
    fn one_power_step_lands_on_rank_one_range() {
        let m = rank_one_model();
        let x = origin();
        let clean = clean_distribution(&m, &x, None).unwrap();
        let cfg = PerturbConfig::new(0.7, 1);
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let p = virtual_adversarial_perturbation(&m, &x, &clean, &cfg, &mut rng).unwrap();
            assert!((p.r.l2_norm() / 0.7 - 1.0).abs() < 1e-9);
            assert!((p.r.data()[0].abs() - 0.7).abs() < 1e-6);
            assert_eq!(p.backprops, 1);
            assert!(!p.any_degenerate());
        }
    }

    #[test]
    fn flat_model_is_degenerate_but_keeps_norm() {
        let spec = ClassifierSpec::new(3, &[4], 2);
        let m = Classifier::new(spec.clone(), ParamSet::zeros(&spec)).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let clean = clean_distribution(&m, &x, None).unwrap();
        let d0 = Tensor::matrix(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let p = virtual_adversarial_from(&m, &x, &clean, d0.clone(), &PerturbConfig::new(2.0, 3)).unwrap();
        assert!(p.degenerate[0]);
        assert_eq!(p.r, d0.map(|v| 2.0 * v));
    }

    #[test]
    fn config_errors() {
        let m = rank_one_model();
        let x = origin();
        let clean = clean_distribution(&m, &x, None).unwrap();
        let mut rng = Rng::new(1);
        let k0 = PerturbConfig::new(1.0, 0);
        assert!(virtual_adversarial_perturbation(&m, &x, &clean, &k0, &mut rng).is_err());
        let linf = PerturbConfig { norm: Norm::Linf, ..PerturbConfig::new(1.0, 1) };
        assert!(virtual_adversarial_perturbation(&m, &x, &clean, &linf, &mut rng).is_err());
        let bad_xi = PerturbConfig { xi: 0.0, ..PerturbConfig::default() };
        assert!(bad_xi.validate().is_err());
    }

    #[test]
    fn adversarial_uses_the_label() {
        let m = rank_one_model();
        let x = origin();
        let cfg = PerturbConfig::new(0.5, 0);
        // increasing x0 favours class 0, so the adversary against label 0 moves x0 down
        let p = adversarial_perturbation(&m, &x, &[0], &cfg, None).unwrap();
        assert!((p.r.data()[0] + 0.5).abs() < 1e-12 && p.r.data()[1] == 0.0);
        let p = adversarial_perturbation(&m, &x, &[1], &cfg, None).unwrap();
        assert!((p.r.data()[0] - 0.5).abs() < 1e-12);
        let linf = PerturbConfig { norm: Norm::Linf, ..cfg };
        let p = adversarial_perturbation(&m, &x, &[1], &linf, None).unwrap();
        assert_eq!(p.r.data(), &[0.5, 0.0]);
        assert_eq!(p.backprops, 1);
    }

    #[test]
    fn random_sphere_norm_and_zero_radius() {
        let mut rng = Rng::new(9);
        let p = random_sphere_perturbation(5, 0.3, &mut rng).unwrap();
        assert!((p.r.l2_norm() - 0.3).abs() < 1e-12);
        assert_eq!(p.kind, PerturbationKind::Random);
        let p = random_sphere_perturbation(5, 0.0, &mut rng).unwrap();
        assert!(p.r.data().iter().all(|&v| v == 0.0));
    }
}
