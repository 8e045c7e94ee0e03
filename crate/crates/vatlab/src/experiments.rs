//! Experiment drivers behind the CLI subcommands. Each returns its results
//! and, given an output directory, writes its artifacts there.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vatlab_core::data::{gen_two_clusters, split, MoonsConfig};
use vatlab_core::objective::{evaluate_frozen, full_objective, lds, Batches, Method};
use vatlab_core::oracle::{self, check_gradient, compare_with_report, dense_hessian, GridSpec, Heatmap, DEFAULT_HESSIAN_STEP};
use vatlab_core::perturb::{hvp_finite_difference, perturbation_rk, Norm};
use vatlab_core::rng::{gaussian_unit_rows, streams};
use vatlab_core::train::{train, RunRecord};
use vatlab_core::{Classifier, ClassifierSpec, Dataset, ObjectiveConfig, ParamSet, PerturbConfig, Rng, Tensor};

use crate::config::{RunConfig, Task};
use crate::error::{Result, VatlabError};
use crate::formats::export::{self, SdNormRow, SweepRow};
use crate::formats::{idx, vatm};
use crate::records::{mean_r_vadv_last10, write_json, RunObserver, Summary};

pub const DATA_DIR_ENV: &str = "VATLAB_DATA_DIR";

/// Everything a run needs from its task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub labeled: Dataset,
    /// Labels stripped.
    pub unlabeled: Dataset,
    /// Model selection (ε tuning).
    pub validation: Dataset,
    /// Final reporting. For synth2d these are the unlabeled points with
    /// their cluster ground truth.
    pub test: Dataset,
    pub input_dim: usize,
    pub classes: usize,
    /// Where the data came from, for the summary.
    pub source: String,
}

pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{}.gz", stem)].into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    match cfg.task {
        Task::Synth2d => synth2d(cfg),
        Task::Mnist => mnist(cfg),
    }
}

fn synth2d(cfg: &RunConfig) -> Result<TaskData> {
    let base = Rng::with_stream(cfg.data_seed(), streams::DATA);
    let moons = MoonsConfig { n_labeled: cfg.n_labeled, n_unlabeled: cfg.n_unlabeled, noise_sd: cfg.data_noise };
    let d = gen_two_clusters(&mut base.fork(0), &moons)?;
    let val = gen_two_clusters(&mut base.fork(1), &MoonsConfig { n_labeled: 0, n_unlabeled: cfg.n_validation, ..moons })?;
    let test = Dataset::new("moons-truth", d.unlabeled.inputs.clone(), Some(d.truth))?;
    let validation = Dataset::new("moons-validation", val.unlabeled.inputs, Some(val.truth))?;
    Ok(TaskData {
        labeled: d.labeled,
        unlabeled: d.unlabeled,
        validation,
        test,
        input_dim: 2,
        classes: 2,
        source: "two half-moons".into(),
    })
}

/// Full MNIST when `VATLAB_DATA_DIR` holds the four IDX files, otherwise
/// the bundled 10,000-digit subset with 1,000 digits held out for testing.
fn mnist(cfg: &RunConfig) -> Result<TaskData> {
    let mut rng = Rng::with_stream(cfg.data_seed(), streams::DATA);
    let full = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).and_then(|dir| {
        let f = |s: &str| find_file(&dir, s);
        Some((
            f("train-images-idx3-ubyte")?,
            f("train-labels-idx1-ubyte")?,
            f("t10k-images-idx3-ubyte")?,
            f("t10k-labels-idx1-ubyte")?,
            dir.clone(),
        ))
    });
    let (pool, test, source) = match full {
        Some((ti, tl, si, sl, dir)) => (idx::load_idx(&ti, &tl)?, idx::load_idx(&si, &sl)?, format!("MNIST from {}", dir.display())),
        None => {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
                return Err(VatlabError::Data(format!(
                    "{} = {} does not hold train-/t10k- images and labels IDX files",
                    DATA_DIR_ENV,
                    Path::new(&dir).display()
                )));
            }
            let dir = bundled_data_dir();
            let all = idx::load_idx(&dir.join("mnist10k-images-idx3-ubyte.gz"), &dir.join("mnist10k-labels-idx1-ubyte.gz"))?;
            let mut order: Vec<usize> = (0..all.len()).collect();
            rng.shuffle(&mut order);
            let (t, rest) = order.split_at(1000.min(all.len()));
            let (mut t, mut rest) = (t.to_vec(), rest.to_vec());
            t.sort_unstable();
            rest.sort_unstable();
            (all.subset(&rest, "mnist-pool"), all.subset(&t, "mnist-test"), "bundled MNIST subset".into())
        }
    };
    let s = split(&pool, &mut rng, cfg.n_labeled, cfg.n_validation)?;
    let take = cfg.n_unlabeled.min(s.unlabeled.len());
    let mut pick: Vec<usize> = (0..s.unlabeled.len()).collect();
    rng.shuffle(&mut pick);
    let mut pick = pick[..take].to_vec();
    pick.sort_unstable();
    Ok(TaskData {
        unlabeled: s.unlabeled.subset(&pick, "mnist-unlabeled"),
        labeled: s.labeled,
        validation: s.validation,
        test,
        input_dim: pool.dim(),
        classes: 10,
        source,
    })
}

fn error_or_none(model: &Classifier, d: &Dataset) -> Result<Option<f64>> {
    if d.is_empty() {
        return Ok(None);
    }
    Ok(Some(model.error_rate(&d.inputs, d.labels()?)?))
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Classifier,
    pub summary: Summary,
    pub records: Vec<RunRecord>,
    pub backprops: Vec<u64>,
    pub seconds: f64,
}

/// Trains per `cfg`. Checkpoints report `val_error` and `test_error`, plus
/// whatever `extra` adds.
pub fn run_train_with(
    cfg: &RunConfig,
    data: &TaskData,
    dir: Option<&Path>,
    extra: Option<crate::records::Checkpoint<'_>>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(VatlabError::io(d))?;
        cfg.write_resolved(d)?;
    }
    let spec = cfg.spec(data.input_dim, data.classes);
    let mut extra = extra;
    let check: crate::records::Checkpoint<'_> = Box::new(move |update, model: &Classifier| {
        let mut out = Vec::new();
        if let Some(v) = error_or_none(model, &data.validation)? {
            out.push(("val_error".to_string(), v));
        }
        if let Some(v) = error_or_none(model, &data.test)? {
            out.push(("test_error".to_string(), v));
        }
        if let Some(f) = extra.as_mut() {
            out.extend(f(update, model)?);
        }
        Ok(out)
    });
    let mut obs = RunObserver::new(dir, Some(check))?;
    let tc = cfg.train_config();
    let outcome = train(&spec, &data.labeled, &data.unlabeled, &tc, cfg.seed, &mut obs)?;
    obs.finish()?;
    let seconds = obs.elapsed_secs();
    let last = outcome.records.last();
    let first_bp = outcome.backprops.first().copied();
    let summary = Summary {
        task: cfg.task.name().into(),
        method: cfg.method.name().into(),
        seed: cfg.seed,
        updates: cfg.updates,
        eps: tc.objective.perturb.epsilon,
        k: tc.objective.perturb.power_iterations,
        final_nll: last.map_or(f64::NAN, |r| r.nll),
        final_total: last.map_or(f64::NAN, |r| r.total),
        final_val_error: error_or_none(&outcome.model, &data.validation)?,
        final_test_error: error_or_none(&outcome.model, &data.test)?,
        mean_r_vadv_last10: mean_r_vadv_last10(&outcome.records, cfg.updates),
        backprops_per_update: first_bp.filter(|&b| outcome.backprops.iter().all(|&x| x == b)),
        total_backprops: outcome.backprops.iter().sum(),
    };
    if let Some(d) = dir {
        vatm::save_model(&d.join("model.vatm"), &outcome.model)?;
        write_json(&d.join("summary.json"), &summary.to_json())?;
    }
    Ok(TrainResult { model: outcome.model, summary, records: obs.records, backprops: outcome.backprops, seconds })
}

pub fn run_train(cfg: &RunConfig, data: &TaskData, dir: Option<&Path>) -> Result<TrainResult> {
    run_train_with(cfg, data, dir, None)
}

/// Mean LDS of `x` under a noise-free `r_K` of radius `eps`, start
/// directions drawn from `(seed, PROBE)`. The measured `R_vadv`.
pub fn probe_r_vadv(model: &Classifier, x: &Tensor, eps: f64, xi: f64, k: usize, seed: u64) -> Result<f64> {
    let cfg = PerturbConfig { epsilon: eps, xi, power_iterations: k, norm: Norm::L2 };
    let clean = model.probs(x, None)?;
    let p = perturbation_rk(model, x, &clean, &cfg, &mut Rng::with_stream(seed, streams::PROBE))?;
    Ok(lds(model, x, &p.r, &clean, None)?)
}

/// One run per ε in `cfg.sweep_eps`, all with `cfg.seed`. `r_vadv_final`
/// is the `K = 1` probe on the validation inputs at that ε.
pub fn sweep_eps(cfg: &RunConfig, data: &TaskData, dir: Option<&Path>, parallel: bool) -> Result<Vec<SweepRow>> {
    if cfg.sweep_eps.is_empty() {
        return Err(VatlabError::Config("sweep.eps is empty".into()));
    }
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(VatlabError::io(d))?;
        cfg.write_resolved(d)?;
    }
    let one = |i: usize, eps: f64| -> Result<SweepRow> {
        let c = RunConfig { eps, ..cfg.clone() };
        let sub = dir.map(|d| d.join(format!("eps_{}", i)));
        let r = run_train(&c, data, sub.as_deref())?;
        Ok(SweepRow {
            eps,
            val_error: r.summary.final_val_error.unwrap_or(f64::NAN),
            r_vadv_final: probe_r_vadv(&r.model, &data.validation.inputs, eps, cfg.xi, 1, cfg.seed)?,
        })
    };
    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|s| {
            let hs: Vec<_> = cfg.sweep_eps.iter().enumerate().map(|(i, &e)| s.spawn(move || one(i, e))).collect();
            hs.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<Result<_>>()
        })?
    } else {
        cfg.sweep_eps.iter().enumerate().map(|(i, &e)| one(i, e)).collect::<Result<_>>()?
    };
    if let Some(d) = dir {
        export::write_text(&d.join("sweep.csv"), &export::sweep_csv(&rows))?;
    }
    Ok(rows)
}

/// Lowest validation error; ties go to the smaller ε.
pub fn best_eps(rows: &[SweepRow]) -> f64 {
    let mut best = &rows[0];
    for r in rows {
        if r.val_error < best.val_error || (r.val_error == best.val_error && r.eps < best.eps) {
            best = r;
        }
    }
    best.eps
}

/// Checkpoint spacing when `train.eval_every` is 0.
fn default_every(updates: usize) -> usize {
    (updates / 20).max(1)
}

/// Trains per `cfg` and, at every checkpoint, estimates the normalized SD
/// norm of the `K = 0` and `K = 1` regularizer gradients on minibatches of
/// the mixed pool.
pub fn sdnorm_series(cfg: &RunConfig, data: &TaskData, dir: Option<&Path>) -> Result<Vec<SdNormRow>> {
    let mut c = cfg.clone();
    if c.eval_every == 0 {
        c.eval_every = default_every(c.updates);
    }
    let pool = data.labeled.concat(&data.unlabeled, "pool")?.inputs;
    let m = cfg.sdnorm_batch.min(pool.rows());
    let (eps, xi, samples, seed) = (cfg.eps, cfg.xi, cfg.sdnorm_samples, cfg.seed);
    let hook: crate::records::Checkpoint<'_> = Box::new(move |update, model: &Classifier| {
        let mut out = Vec::new();
        for k in [0usize, 1] {
            let pc = PerturbConfig { epsilon: eps, xi, power_iterations: k, norm: Norm::L2 };
            let mut rng = Rng::with_stream(seed, streams::PROBE).fork(update as u64);
            let r = oracle::normalized_sd_norm(model, &pool, &pc, m, samples, &mut rng)?;
            out.push((format!("sd_norm_k{}", k), r.normalized_sd_norm));
        }
        Ok(out)
    });
    let r = run_train_with(&c, data, dir, Some(hook))?;
    let mut rows = Vec::new();
    for rec in &r.records {
        for (name, v) in &rec.eval {
            if let Some(k) = name.strip_prefix("sd_norm_k") {
                rows.push(SdNormRow { update: rec.update, k: k.parse().unwrap_or(0), sd_norm: *v });
            }
        }
    }
    if let Some(d) = dir {
        export::write_text(&d.join("sdnorm.csv"), &export::sdnorm_csv(&rows))?;
    }
    Ok(rows)
}

/// The plotting window used for the half-moons.
pub fn default_grid(res: usize) -> GridSpec {
    GridSpec { x_range: (-1.5, 2.5), y_range: (-1.0, 1.5), nx: res, ny: res }
}

pub fn heatmap(cfg: &RunConfig, model: &Classifier, dir: Option<&Path>) -> Result<(Heatmap, Value)> {
    let pc = cfg.objective().perturb;
    let pc = PerturbConfig { norm: Norm::L2, ..pc };
    let h = oracle::lds_heatmap(model, &default_grid(cfg.heatmap_res), &pc, cfg.seed)?;
    let (imax, vmax) = h.values.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    let stats = json!({
        "nx": h.grid.nx,
        "ny": h.grid.ny,
        "eps": pc.epsilon,
        "K": pc.power_iterations,
        "min": h.values.iter().copied().fold(f64::INFINITY, f64::min),
        "max": vmax,
        "mean": h.values.iter().sum::<f64>() / h.values.len() as f64,
        "argmax": h.points[imax],
    });
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(VatlabError::io(d))?;
        cfg.write_resolved(d)?;
        export::write_text(&d.join("heatmap.csv"), &export::heatmap_csv(&h))?;
        write_json(&d.join("heatmap.json"), &stats)?;
    }
    Ok((h, stats))
}

/// Logits `(x0, 0)`; the KL Hessian at the origin is `0.25 e1 e1ᵀ`.
pub fn rank_one_model() -> Classifier {
    let spec = ClassifierSpec::new(2, &[], 2);
    let params = ParamSet::from_vec(&spec, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).expect("fixed layout");
    Classifier::new(spec, params).expect("fixed layout")
}

/// The random-MLP family the power-iteration threshold was calibrated on:
/// an (8, [32], 5) network and a standard normal input point.
pub fn oracle_family_model(seed: u64) -> Result<(Classifier, Vec<f64>)> {
    let model = Classifier::init(ClassifierSpec::new(8, &[32], 5), &mut Rng::new(seed))?;
    Ok((model, Rng::new(1000 + seed).gaussian_vec(8, 1.0)))
}

/// Lower bound on the 20-model mean `|cos(r_vadv(K=1), u1)|` for the family
/// above. Calibration models use seeds `0..200`.
pub const K1_COSINE_THRESHOLD: f64 = 0.74;

/// Per-model mean `|cos(r_K, u1)|` on the calibration family, for each `k`.
pub fn family_cosines(seed: u64, ks: &[usize], trials: usize) -> Result<(f64, Vec<f64>)> {
    let (model, x) = oracle_family_model(seed)?;
    let report = dense_hessian(&model, &x, DEFAULT_HESSIAN_STEP)?;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let c = compare_with_report(&model, &x, &report, &PerturbConfig::new(1.0, k), trials, seed)?;
        out.push(c.cosines.map_or(f64::NAN, |s| s.mean));
    }
    Ok((report.eig_ratio, out))
}

#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub report: Value,
    pub failures: Vec<String>,
}

/// Relative error of the finite-difference HVP against the dense Hessian.
fn hvp_error(model: &Classifier, x: &[f64], h: &Tensor, xi: f64, seed: u64) -> Result<f64> {
    let dim = x.len();
    let xt = Tensor::matrix(1, dim, x.to_vec())?;
    let d = gaussian_unit_rows(&mut Rng::with_stream(seed, streams::PROBE), 1, dim)?;
    let clean = model.probs(&xt, None)?;
    let fd = hvp_finite_difference(model, &xt, &clean, &d, xi)?;
    let dense = oracle::matvec(h, d.data());
    let diff: f64 = fd.data().iter().zip(&dense).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = vatlab_core::tensor::l2_norm(&dense).max(vatlab_core::tensor::l2_norm(fd.data()));
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

/// Gradient check of the full objective, with its frozen terms held fixed,
/// on a (2, [3], 2) network.
fn objective_grad_error(method: Method, cfg: &RunConfig) -> Result<f64> {
    let model = Classifier::init(ClassifierSpec::new(2, &[3], 2), &mut Rng::new(cfg.seed))?;
    let mut rng = Rng::with_stream(cfg.seed, streams::DATA);
    let xl = Tensor::matrix(4, 2, rng.gaussian_vec(8, 1.0))?;
    let xm = Tensor::matrix(6, 2, rng.gaussian_vec(12, 1.0))?;
    let labels = [0, 1, 1, 0];
    let batches = Batches { labeled: &xl, labels: &labels, mixed: &xm };
    let ocfg = ObjectiveConfig::new(method, PerturbConfig { epsilon: 0.5, xi: cfg.xi, power_iterations: 1, norm: Norm::L2 });
    let v = full_objective(&model, batches, &ocfg, &mut rng, None)?;
    let theta = model.params.theta().to_vec();
    let f = |t: &[f64]| evaluate_frozen(&model.with_theta(t.to_vec())?, batches, &ocfg, &v.frozen);
    Ok(check_gradient(f, &theta, &v.grad, 1e-5)?.rel_error)
}

/// Power-iteration, HVP and gradient checks. Failures are collected, not
/// raised, so the whole report is always produced.
pub fn oracle_check(cfg: &RunConfig) -> Result<OracleCheck> {
    let mut failures = Vec::new();
    let trials = cfg.oracle_trials.max(1);
    let pc = |k: usize| PerturbConfig { epsilon: 1.0, xi: cfg.xi, power_iterations: k, norm: Norm::L2 };

    let r1 = rank_one_model();
    let x0 = [0.0, 0.0];
    let rep1 = dense_hessian(&r1, &x0, DEFAULT_HESSIAN_STEP)?;
    let hvp1 = hvp_error(&r1, &x0, &rep1.h, cfg.xi, cfg.seed)?;
    let cos1 = compare_with_report(&r1, &x0, &rep1, &pc(1), trials, cfg.seed)?.cosines.map_or(f64::NAN, |c| c.mean);
    if (rep1.lambda1 - 0.25).abs() > 0.25 * 1e-3 {
        failures.push(format!("rank-one model: dense Hessian lambda1 = {} but 0.25 expected", rep1.lambda1));
    }
    if !(cos1 >= 1.0 - 1e-3) {
        failures.push(format!("rank-one model: mean |cos(r_vadv, u1)| = {} with K=1, expected 1 within 1e-3", cos1));
    }

    let (mlp, xm) = oracle_family_model(cfg.seed)?;
    let rep = dense_hessian(&mlp, &xm, DEFAULT_HESSIAN_STEP)?;
    let hvp_mlp = hvp_error(&mlp, &xm, &rep.h, cfg.xi, cfg.seed)?;
    let ks = [1usize, 2, 4];
    let mut means = Vec::new();
    for &k in &ks {
        let c = compare_with_report(&mlp, &xm, &rep, &pc(k), trials, cfg.seed)?;
        means.push(c.cosines.map_or(f64::NAN, |s| s.mean));
    }
    if !means.windows(2).all(|w| w[1] >= w[0] - 1e-9) {
        failures.push(format!("random MLP: mean |cos| over K = {:?} is not non-decreasing: {:?}", ks, means));
    }
    for (name, e) in [("rank-one model", hvp1), ("random MLP", hvp_mlp)] {
        if !(e < 1e-3) {
            failures.push(format!(
                "{}: finite-difference Hessian-vector product is off by {:.3e} (relative) from the dense Hessian; \
                 xi = {:e} is likely too large or too small",
                name, e, cfg.xi
            ));
        }
    }

    let mut grads = serde_json::Map::new();
    for m in [Method::Baseline, Method::Vat, Method::Rpt, Method::AdversarialL2, Method::VatEntMin] {
        let e = objective_grad_error(m, cfg)?;
        if !(e < 1e-4) {
            failures.push(format!("{}: objective gradient relative error {:.3e} exceeds 1e-4", m.name(), e));
        }
        grads.insert(m.name().into(), json!(e));
    }

    let report = json!({
        "xi": cfg.xi,
        "trials": trials,
        "rank_one": { "lambda1": rep1.lambda1, "mean_abs_cos_k1": cos1, "hvp_rel_error": hvp1 },
        "random_mlp": {
            "seed": cfg.seed,
            "lambda1": rep.lambda1,
            "lambda2": rep.lambda2,
            "eig_ratio": rep.eig_ratio,
            "K": ks,
            "mean_abs_cos": means,
            "hvp_rel_error": hvp_mlp,
        },
        "gradient_rel_error": grads,
        "pass": failures.is_empty(),
        "failures": failures,
    });
    Ok(OracleCheck { report, failures })
}

/// Errors and `R_vadv` probes of a saved model.
pub fn eval(cfg: &RunConfig, model: &Classifier, data: &TaskData) -> Result<Value> {
    if model.spec.input_dim != data.input_dim {
        return Err(VatlabError::Data(format!("model takes {} inputs, task has {}", model.spec.input_dim, data.input_dim)));
    }
    let x = &data.validation.inputs;
    Ok(json!({
        "task": cfg.task.name(),
        "val_error": error_or_none(model, &data.validation)?,
        "test_error": error_or_none(model, &data.test)?,
        "eps": cfg.eps,
        "r_vadv_k0": probe_r_vadv(model, x, cfg.eps, cfg.xi, 0, cfg.seed)?,
        "r_vadv_k1": probe_r_vadv(model, x, cfg.eps, cfg.xi, 1, cfg.seed)?,
    }))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    if !path.is_file() {
        return Err(VatlabError::Data(format!("checkpoint {} not found", path.display())));
    }
    vatm::load_model(path)
}
