//! The regularized training objective and its gradient.
//!
//! Everything here follows one rule: the perturbation `r` and the clean
//! distribution `p(y|x, θ̂)` are computed first, off the parameter tape, and
//! then enter the differentiated graph as constants. The gradient with
//! respect to θ therefore ignores how `r` depends on θ.
//!
//! Hidden-layer noise, when the model has it, is drawn from named forks of a
//! single per-update noise generator. The power iteration always runs
//! noise-free (its finite difference relies on `∇_r D = 0` at `r = 0`), while
//! the clean target and the perturbed pass of the LDS each draw independent
//! noise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::model::{BoundParams, Classifier};
use crate::perturb::{adversarial_perturbation, perturbation_rk, perturbation_rk_from, Norm, PerturbConfig, Perturbation};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

const NLL_NOISE: u64 = 1;
const TARGET_NOISE: u64 = 2;
const PERTURBED_NOISE: u64 = 3;
const ENTROPY_NOISE: u64 = 4;
const ADV_NOISE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Vat,
    Rpt,
    AdversarialL2,
    AdversarialLinf,
    VatEntMin,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::Vat,
        Method::Rpt,
        Method::AdversarialL2,
        Method::AdversarialLinf,
        Method::VatEntMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Vat => "vat",
            Method::Rpt => "rpt",
            Method::AdversarialL2 => "adversarial_l2",
            Method::AdversarialLinf => "adversarial_linf",
            Method::VatEntMin => "vat_entmin",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        let norm: String = s.trim().chars().map(|c| if c == '-' { '_' } else { c.to_ascii_lowercase() }).collect();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{}`", s)))
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::AdversarialL2 | Method::AdversarialLinf)
    }

    /// Uses the label-free LDS regularizer on the mixed batch.
    pub fn uses_lds(self) -> bool {
        matches!(self, Method::Vat | Method::Rpt | Method::VatEntMin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub perturb: PerturbConfig,
    /// Weight of the perturbation term.
    pub alpha: f64,
    /// Weight of the conditional entropy term (`vat_entmin` only).
    pub beta: f64,
}

impl ObjectiveConfig {
    pub fn new(method: Method, perturb: PerturbConfig) -> Self {
        ObjectiveConfig { method, perturb, alpha: 1.0, beta: 1.0 }.normalized()
    }

    /// Applies the method's constraints: `rpt` uses `K = 0`, `vat` at least
    /// one power iteration, and each adversarial method its own norm.
    pub fn normalized(mut self) -> Self {
        match self.method {
            Method::Rpt => {
                self.perturb.power_iterations = 0;
                self.perturb.norm = Norm::L2;
            }
            Method::Vat | Method::VatEntMin => {
                self.perturb.power_iterations = self.perturb.power_iterations.max(1);
                self.perturb.norm = Norm::L2;
            }
            Method::AdversarialL2 => self.perturb.norm = Norm::L2,
            Method::AdversarialLinf => self.perturb.norm = Norm::Linf,
            Method::Baseline => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.perturb.validate()?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        if *self != self.clone().normalized() {
            return Err(Error::InvalidConfig(format!("perturbation settings conflict with method {}", self.method.name())));
        }
        Ok(())
    }

    /// Reverse sweeps one update costs.
    pub fn expected_backprops(&self) -> u64 {
        match self.method {
            Method::Baseline => 1,
            Method::AdversarialL2 | Method::AdversarialLinf => 2,
            Method::Vat | Method::Rpt | Method::VatEntMin => self.perturb.power_iterations as u64 + 2,
        }
    }
}

/// Records the per-row LDS `KL[target || p(y | x + r, θ)]` on `tape` and
/// returns its mean. `x + r` and `target` enter as constants.
pub fn lds_on_tape(
    tape: &mut Tape,
    model: &Classifier,
    bound: &BoundParams,
    x: &Tensor,
    r: &Tensor,
    target: &Tensor,
    noise: Option<&mut Rng>,
) -> Result<crate::Var> {
    let xr = x.zip_map(r, |a, b| a + b)?;
    let xv = tape.constant(xr);
    let logits = model.logits_on_tape(tape, bound, xv, noise)?;
    let t = tape.constant(target.clone());
    let kl = tape.kl_rows(t, logits)?;
    tape.mean(kl)
}

/// Mean LDS value of a fixed perturbation, without gradients.
pub fn lds(model: &Classifier, x: &Tensor, r: &Tensor, target: &Tensor, noise: Option<&mut Rng>) -> Result<f64> {
    let xr = x.zip_map(r, |a, b| a + b)?;
    let logits = model.logits(&xr, noise)?;
    crate::divergence::kl_batch(target, &logits)
}

/// A regularizer value with its θ-gradient.
#[derive(Clone, Debug)]
pub struct Regularizer {
    pub value: f64,
    pub grad: Vec<f64>,
    pub perturbation: Perturbation,
    /// Clean distribution used as the LDS target.
    pub target: Tensor,
    /// Reverse sweeps spent, perturbation included.
    pub backprops: u64,
}

/// `R^(K)` over a batch: mean LDS with `r_K` drawn per row. Labels are
/// never consulted. `noise` enables hidden-layer noise in the LDS passes.
pub fn regularizer_batch(
    model: &Classifier,
    x: &Tensor,
    cfg: &PerturbConfig,
    rng: &mut Rng,
    noise: Option<&Rng>,
) -> Result<Regularizer> {
    let clean = model.probs(x, None)?;
    let p = perturbation_rk(model, x, &clean, cfg, rng)?;
    regularizer_for(model, x, clean, p, noise)
}

/// [`regularizer_batch`] with pinned start directions.
pub fn regularizer_from_directions(
    model: &Classifier,
    x: &Tensor,
    d0: Tensor,
    cfg: &PerturbConfig,
    noise: Option<&Rng>,
) -> Result<Regularizer> {
    let clean = model.probs(x, None)?;
    let p = perturbation_rk_from(model, x, &clean, d0, cfg)?;
    regularizer_for(model, x, clean, p, noise)
}

fn regularizer_for(
    model: &Classifier,
    x: &Tensor,
    clean: Tensor,
    p: Perturbation,
    noise: Option<&Rng>,
) -> Result<Regularizer> {
    let target = noisy_target(model, x, clean, noise)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut pert_noise = noise.map(|n| n.fork(PERTURBED_NOISE));
    let out = lds_on_tape(&mut tape, model, &bound, x, &p.r, &target, pert_noise.as_mut())?;
    tape.forward(&[])?;
    let value = tape.value(out)?.data()[0];
    let grad = BoundParams::flatten(&tape.backward(out, &bound.vars())?);
    let backprops = p.backprops as u64 + tape.backward_calls();
    Ok(Regularizer { value, grad, perturbation: p, target, backprops })
}

fn noisy_target(model: &Classifier, x: &Tensor, clean: Tensor, noise: Option<&Rng>) -> Result<Tensor> {
    match noise {
        Some(n) if model.spec.hidden_noise_sd > 0.0 => model.probs(x, Some(&mut n.fork(TARGET_NOISE))),
        _ => Ok(clean),
    }
}

/// Constants the objective gradient treats as fixed, kept so the objective
/// can be re-evaluated at other θ with the same `r`, targets and noise.
#[derive(Clone, Debug)]
pub struct FrozenTerms {
    pub noise: Option<Rng>,
    /// Perturbation: of the mixed batch for LDS methods, of the labeled
    /// batch for adversarial methods.
    pub r: Option<Tensor>,
    pub target: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub nll: f64,
    /// Unweighted perturbation term (mean LDS or adversarial NLL).
    pub regularizer: f64,
    /// Unweighted conditional entropy; 0 unless the method uses it.
    pub entropy: f64,
    pub grad: Vec<f64>,
    /// Reverse sweeps measured on the tapes of this evaluation.
    pub backprops: u64,
    pub perturbation: Option<Perturbation>,
    pub frozen: FrozenTerms,
}

/// Inputs for one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Batches<'a> {
    pub labeled: &'a Tensor,
    pub labels: &'a [usize],
    /// Labeled and unlabeled inputs for the LDS and entropy terms.
    pub mixed: &'a Tensor,
}

/// `nll(labeled) + α·R + β·R_cent`, with the gradient taken under the
/// stop-gradient rule.
pub fn full_objective(
    model: &Classifier,
    batches: Batches<'_>,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
    noise: Option<Rng>,
) -> Result<ObjectiveValue> {
    cfg.validate()?;
    if batches.labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batches.labels.len() != batches.labeled.rows() {
        return Err(Error::ShapeMismatch {
            op: "objective",
            detail: format!("{} labels for {} rows", batches.labels.len(), batches.labeled.rows()),
        });
    }
    if cfg.method.is_adversarial() {
        return adversarial_objective(model, batches, cfg, noise);
    }
    let mut nll_tape = Tape::new();
    let bound = model.bind(&mut nll_tape)?;
    let xv = nll_tape.constant(batches.labeled.clone());
    let mut nll_noise = noise.as_ref().map(|n| n.fork(NLL_NOISE));
    let logits = model.logits_on_tape(&mut nll_tape, &bound, xv, nll_noise.as_mut())?;
    let loss = nll_tape.nll(logits, batches.labels)?;
    nll_tape.forward(&[])?;
    let nll = nll_tape.value(loss)?.data()[0];
    let mut grad = BoundParams::flatten(&nll_tape.backward(loss, &bound.vars())?);
    let mut backprops = nll_tape.backward_calls();
    let mut out = ObjectiveValue {
        total: nll,
        nll,
        regularizer: 0.0,
        entropy: 0.0,
        grad: Vec::new(),
        backprops: 0,
        perturbation: None,
        frozen: FrozenTerms { noise: noise.clone(), r: None, target: None },
    };
    if cfg.method.uses_lds() {
        if batches.mixed.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = batches.mixed;
        let clean = model.probs(x, None)?;
        let p = perturbation_rk(model, x, &clean, &cfg.perturb, rng)?;
        let target = noisy_target(model, x, clean, noise.as_ref())?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut pert_noise = noise.as_ref().map(|n| n.fork(PERTURBED_NOISE));
        let reg = lds_on_tape(&mut tape, model, &bound, x, &p.r, &target, pert_noise.as_mut())?;
        let mut term = tape.scale(reg, cfg.alpha)?;
        let mut ent = None;
        if cfg.method == Method::VatEntMin {
            let e = entropy_on_tape(&mut tape, model, &bound, x, noise.as_ref())?;
            let weighted = tape.scale(e, cfg.beta)?;
            term = tape.add(term, weighted)?;
            ent = Some(e);
        }
        tape.forward(&[])?;
        out.regularizer = tape.value(reg)?.data()[0];
        if let Some(e) = ent {
            out.entropy = tape.value(e)?.data()[0];
        }
        let g = BoundParams::flatten(&tape.backward(term, &bound.vars())?);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        backprops += p.backprops as u64 + tape.backward_calls();
        out.total = nll + cfg.alpha * out.regularizer + cfg.beta * out.entropy;
        out.frozen.r = Some(p.r.clone());
        out.frozen.target = Some(target);
        out.perturbation = Some(p);
    }
    out.grad = grad;
    out.backprops = backprops;
    Ok(out)
}

fn entropy_on_tape(
    tape: &mut Tape,
    model: &Classifier,
    bound: &BoundParams,
    x: &Tensor,
    noise: Option<&Rng>,
) -> Result<crate::Var> {
    let xv = tape.constant(x.clone());
    let mut n = noise.map(|n| n.fork(ENTROPY_NOISE));
    let logits = model.logits_on_tape(tape, bound, xv, n.as_mut())?;
    let h = tape.entropy_rows(logits)?;
    tape.mean(h)
}

/// `nll(x) + α nll(x + r_adv)` on the labeled batch.
fn adversarial_objective(
    model: &Classifier,
    batches: Batches<'_>,
    cfg: &ObjectiveConfig,
    noise: Option<Rng>,
) -> Result<ObjectiveValue> {
    let mut adv_noise = noise.as_ref().map(|n| n.fork(ADV_NOISE));
    let p = adversarial_perturbation(model, batches.labeled, batches.labels, &cfg.perturb, adv_noise.as_mut())?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (nll, adv) = adversarial_terms(&mut tape, model, &bound, batches, &p.r, noise.as_ref())?;
    let weighted = tape.scale(adv, cfg.alpha)?;
    let total = tape.add(nll, weighted)?;
    tape.forward(&[])?;
    let grad = BoundParams::flatten(&tape.backward(total, &bound.vars())?);
    let nll_v = tape.value(nll)?.data()[0];
    let adv_v = tape.value(adv)?.data()[0];
    Ok(ObjectiveValue {
        total: tape.value(total)?.data()[0],
        nll: nll_v,
        regularizer: adv_v,
        entropy: 0.0,
        grad,
        backprops: p.backprops as u64 + tape.backward_calls(),
        frozen: FrozenTerms { noise, r: Some(p.r.clone()), target: None },
        perturbation: Some(p),
    })
}

fn adversarial_terms(
    tape: &mut Tape,
    model: &Classifier,
    bound: &BoundParams,
    batches: Batches<'_>,
    r: &Tensor,
    noise: Option<&Rng>,
) -> Result<(crate::Var, crate::Var)> {
    let xv = tape.constant(batches.labeled.clone());
    let mut n1 = noise.map(|n| n.fork(NLL_NOISE));
    let logits = model.logits_on_tape(tape, bound, xv, n1.as_mut())?;
    let nll = tape.nll(logits, batches.labels)?;
    let xr = tape.constant(batches.labeled.zip_map(r, |a, b| a + b)?);
    let mut n2 = noise.map(|n| n.fork(PERTURBED_NOISE));
    let logits_r = model.logits_on_tape(tape, bound, xr, n2.as_mut())?;
    let adv = tape.nll(logits_r, batches.labels)?;
    Ok((nll, adv))
}

/// Re-evaluates the objective value at `model` with every term listed in
/// `frozen` held fixed. Its finite differences in θ reproduce the gradient
/// returned by [`full_objective`].
pub fn evaluate_frozen(
    model: &Classifier,
    batches: Batches<'_>,
    cfg: &ObjectiveConfig,
    frozen: &FrozenTerms,
) -> Result<f64> {
    let noise = frozen.noise.as_ref();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let total = if cfg.method.is_adversarial() {
        let r = frozen.r.as_ref().ok_or_else(|| Error::InvalidConfig("frozen perturbation missing".into()))?;
        let (nll, adv) = adversarial_terms(&mut tape, model, &bound, batches, r, noise)?;
        let w = tape.scale(adv, cfg.alpha)?;
        tape.add(nll, w)?
    } else {
        let xv = tape.constant(batches.labeled.clone());
        let mut n1 = noise.map(|n| n.fork(NLL_NOISE));
        let logits = model.logits_on_tape(&mut tape, &bound, xv, n1.as_mut())?;
        let mut total = tape.nll(logits, batches.labels)?;
        if cfg.method.uses_lds() {
            let (r, target) = match (&frozen.r, &frozen.target) {
                (Some(r), Some(t)) => (r, t),
                _ => return Err(Error::InvalidConfig("frozen perturbation missing".into())),
            };
            let mut n3 = noise.map(|n| n.fork(PERTURBED_NOISE));
            let reg = lds_on_tape(&mut tape, model, &bound, batches.mixed, r, target, n3.as_mut())?;
            let w = tape.scale(reg, cfg.alpha)?;
            total = tape.add(total, w)?;
            if cfg.method == Method::VatEntMin {
                let e = entropy_on_tape(&mut tape, model, &bound, batches.mixed, noise)?;
                let w = tape.scale(e, cfg.beta)?;
                total = tape.add(total, w)?;
            }
        }
        total
    };
    tape.forward(&[])?;
    Ok(tape.value(total)?.data()[0])
}

/// Per-row start directions for the batch, handy for pinning.
pub fn draw_directions(rng: &mut Rng, rows: usize, dim: usize) -> Result<Tensor> {
    crate::rng::gaussian_unit_rows(rng, rows, dim)
}
