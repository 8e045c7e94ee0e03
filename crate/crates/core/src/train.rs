//! The training loop: two minibatches per update, ADAM, and a per-update
//! record of losses and reverse-sweep counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::model::{Classifier, ClassifierSpec};
use crate::objective::{full_objective, Batches, ObjectiveConfig};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    /// Minibatch for the likelihood term.
    pub batch_labeled: usize,
    /// Minibatch drawn from labeled ∪ unlabeled for the regularizer.
    pub batch_unlabeled: usize,
    pub updates: usize,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Keep one record every this many updates (the last update is always kept).
    pub record_every: usize,
    /// Run the observer's checkpoint every this many updates; 0 disables.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig, updates: usize) -> Self {
        TrainConfig {
            objective,
            batch_labeled: 64,
            batch_unlabeled: 256,
            updates,
            adam: AdamConfig { lr: 0.002, ..AdamConfig::default() },
            lr_schedule: LrSchedule::Constant,
            record_every: 1,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub update: usize,
    pub nll: f64,
    /// Unweighted perturbation term of this update.
    pub r_vadv: f64,
    pub r_cent: f64,
    pub total: f64,
    pub backprops_this_update: u64,
    pub lr: f64,
    pub wallclock: f64,
    /// Named metrics from the observer's checkpoint, if one ran.
    pub eval: Vec<(String, f64)>,
}

/// Hooks into [`train`]. The core has no clock, so wall time comes from here.
pub trait TrainObserver {
    fn elapsed(&self) -> f64 {
        0.0
    }

    /// Called after update `update` (0-based) when a checkpoint is due.
    fn checkpoint(&mut self, _update: usize, _model: &Classifier) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }

    fn record(&mut self, _record: &RunRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Walks a shuffled permutation of `0..n` and reshuffles when it runs out,
/// so batches larger than the pool simply wrap.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    perm: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        BatchSampler { perm: (0..n).collect(), pos: n, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.perm.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.rng.shuffle(&mut self.perm);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub records: Vec<RunRecord>,
    /// Reverse sweeps of every update, kept even when records are thinned.
    pub backprops: Vec<u64>,
}

/// Initializes a model from `seed` and runs `cfg.updates` ADAM steps.
pub fn train(
    spec: &ClassifierSpec,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let model = Classifier::init(spec.clone(), &mut Rng::with_stream(seed, streams::INIT))?;
    train_from(model, labeled, unlabeled, cfg, seed, observer)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    mut model: Classifier,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = labeled.labels()?;
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    labeled.check_labels(model.spec.num_classes)?;
    let pool = labeled.concat(unlabeled, "mixed")?;
    let mut lab_sampler = BatchSampler::new(labeled.len(), Rng::with_stream(seed, streams::LABELED_BATCH));
    let mut mix_sampler = BatchSampler::new(pool.len(), Rng::with_stream(seed, streams::MIXED_BATCH));
    let mut perturb_rng = Rng::with_stream(seed, streams::PERTURB);
    let noise_base = Rng::with_stream(seed, streams::NOISE);
    let mut adam = AdamState::new(model.params.len());
    let mut records = Vec::new();
    let mut backprops = Vec::with_capacity(cfg.updates);
    let needs_mixed = cfg.objective.method.uses_lds();
    for update in 0..cfg.updates {
        let li = lab_sampler.next_batch(cfg.batch_labeled);
        let lx = labeled.inputs.select_rows(&li);
        let ly: Vec<usize> = li.iter().map(|&i| labels[i]).collect();
        let mx = if needs_mixed {
            pool.inputs.select_rows(&mix_sampler.next_batch(cfg.batch_unlabeled))
        } else {
            Tensor::zeros(&[0, labeled.dim()])
        };
        let noise = (model.spec.hidden_noise_sd > 0.0).then(|| noise_base.fork(update as u64));
        let batches = Batches { labeled: &lx, labels: &ly, mixed: &mx };
        let v = full_objective(&model, batches, &cfg.objective, &mut perturb_rng, noise)?;
        if !v.total.is_finite() {
            return Err(Error::NonFinite { node: update, op: "objective" });
        }
        let lr = cfg.lr_schedule.lr(cfg.adam.lr, update, cfg.updates);
        adam_step(model.params.theta_mut(), &v.grad, &mut adam, &cfg.adam, lr)?;
        backprops.push(v.backprops);
        let last = update + 1 == cfg.updates;
        let eval_due = cfg.eval_every > 0 && ((update + 1) % cfg.eval_every == 0 || last);
        let eval = if eval_due { observer.checkpoint(update, &model)? } else { Vec::new() };
        if eval_due || last || update % cfg.record_every.max(1) == 0 {
            let rec = RunRecord {
                update,
                nll: v.nll,
                r_vadv: v.regularizer,
                r_cent: v.entropy,
                total: v.total,
                backprops_this_update: v.backprops,
                lr,
                wallclock: observer.elapsed(),
                eval,
            };
            observer.record(&rec)?;
            records.push(rec);
        }
    }
    Ok(TrainOutcome { model, records, backprops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_clusters, MoonsConfig};
    use crate::objective::Method;
    use crate::perturb::PerturbConfig;

    #[test]
    fn sampler_wraps_and_covers() {
        let mut s = BatchSampler::new(5, Rng::new(1));
        let b = s.next_batch(12);
        assert_eq!(b.len(), 12);
        let mut first: Vec<usize> = b[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_updates_keeps_init() {
        let data = gen_two_clusters(&mut Rng::new(2), &MoonsConfig::default()).unwrap();
        let spec = ClassifierSpec::new(2, &[8], 2);
        let cfg = TrainConfig::new(ObjectiveConfig::new(Method::Vat, PerturbConfig::new(0.3, 1)), 0);
        let out = train(&spec, &data.labeled, &data.unlabeled, &cfg, 9, &mut ()).unwrap();
        let init = Classifier::init(spec, &mut Rng::with_stream(9, streams::INIT)).unwrap();
        assert_eq!(out.model, init);
        assert!(out.records.is_empty());
    }

    #[test]
    fn short_run_is_deterministic_and_audited() {
        let data = gen_two_clusters(&mut Rng::new(2), &MoonsConfig { n_unlabeled: 50, ..Default::default() }).unwrap();
        let spec = ClassifierSpec::new(2, &[8], 2).with_noise(0.1);
        let mut cfg = TrainConfig::new(ObjectiveConfig::new(Method::Vat, PerturbConfig::new(0.3, 2)), 5);
        cfg.batch_unlabeled = 16;
        let a = train(&spec, &data.labeled, &data.unlabeled, &cfg, 4, &mut ()).unwrap();
        let b = train(&spec, &data.labeled, &data.unlabeled, &cfg, 4, &mut ()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.records, b.records);
        assert!(a.backprops.iter().all(|&n| n == 4));
    }
}
