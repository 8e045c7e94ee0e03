//! Brute-force references for the fast approximations, plus the analysis
//! instruments built on them.
//!
//! Nothing here is meant to be fast. The dense Hessian costs `O(dim²)` model
//! evaluations and is guarded to small inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::divergence::kl_row;
use crate::model::Classifier;
use crate::objective::regularizer_batch;
use crate::perturb::{perturbation_rk, perturbation_rk_from, PerturbConfig};
use crate::rng::{gaussian_unit_rows, streams, Rng};
use crate::tensor::{abs_cosine, dot, l2_norm, Tensor};
use crate::{Error, Result};

pub const MAX_HESSIAN_DIM: usize = 64;
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-4;
pub const MAX_EIGEN_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct HessianReport {
    /// Symmetric `[dim, dim]`.
    pub h: Tensor,
    pub lambda1: f64,
    pub lambda2: f64,
    pub u1: Vec<f64>,
    /// `λ1 / λ2`; infinite when `λ2 = 0`.
    pub eig_ratio: f64,
}

/// `D(r) = KL[p(y|x) || p(y|x + r)]` for every row of `rs`, noise-free.
fn divergence_rows(model: &Classifier, x: &[f64], clean: &[f64], rs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = x.len();
    let mut buf = Vec::with_capacity(rs.len() * dim);
    for r in rs {
        buf.extend(x.iter().zip(r).map(|(a, b)| a + b));
    }
    let logits = model.logits(&Tensor::matrix(rs.len(), dim, buf)?, None)?;
    Ok((0..rs.len()).map(|i| kl_row(clean, logits.row(i))).collect())
}

/// Hessian of `r -> KL[p(y|x) || p(y|x + r)]` at `r = 0` by central second
/// differences with step `h`, then its two leading eigenpairs.
///
/// `x` is a single point of length `input_dim <= 64`.
pub fn dense_hessian(model: &Classifier, x: &[f64], h: f64) -> Result<HessianReport> {
    let dim = x.len();
    if dim > MAX_HESSIAN_DIM {
        return Err(Error::DimensionGuard { dim, max: MAX_HESSIAN_DIM });
    }
    if dim == 0 {
        return Err(Error::ZeroDimension);
    }
    let xt = Tensor::matrix(1, dim, x.to_vec())?;
    let clean = model.probs(&xt, None)?.into_data();
    let shift = |pairs: &[(usize, f64)]| {
        let mut r = vec![0.0; dim];
        for &(i, s) in pairs {
            r[i] += s;
        }
        r
    };
    let mut rs = vec![vec![0.0; dim]];
    for i in 0..dim {
        rs.push(shift(&[(i, h)]));
        rs.push(shift(&[(i, -h)]));
        for j in 0..i {
            for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                rs.push(shift(&[(i, si), (j, sj)]));
            }
        }
    }
    let d = divergence_rows(model, x, &clean, &rs)?;
    let d0 = d[0];
    let mut m = vec![0.0; dim * dim];
    let mut k = 1;
    for i in 0..dim {
        m[i * dim + i] = (d[k] - 2.0 * d0 + d[k + 1]) / (h * h);
        k += 2;
        for j in 0..i {
            let v = (d[k] - d[k + 1] - d[k + 2] + d[k + 3]) / (4.0 * h * h);
            m[i * dim + j] = v;
            m[j * dim + i] = v;
            k += 4;
        }
    }
    hessian_report(Tensor::matrix(dim, dim, m)?)
}

/// Symmetrizes `h` and extracts `λ1`, `λ2` by power iteration with
/// deflation.
pub fn hessian_report(h: Tensor) -> Result<HessianReport> {
    let n = h.rows();
    let mut s = h.clone();
    for i in 0..n {
        for j in 0..n {
            s.data_mut()[i * n + j] = 0.5 * (h.data()[i * n + j] + h.data()[j * n + i]);
        }
    }
    let scale = l2_norm(s.data());
    let (lambda1, u1) = dominant_eigenpair(&s, scale)?;
    let mut deflated = s.clone();
    for i in 0..n {
        for j in 0..n {
            deflated.data_mut()[i * n + j] -= lambda1 * u1[i] * u1[j];
        }
    }
    let (lambda2, _) = dominant_eigenpair(&deflated, scale)?;
    let eig_ratio = if lambda2 == 0.0 { f64::INFINITY } else { lambda1 / lambda2 };
    Ok(HessianReport { h: s, lambda1, lambda2, u1, eig_ratio })
}

/// `M v` for a square matrix.
pub fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

/// One step of the power method on an explicit matrix: `normalize(M d)`.
pub fn power_step(m: &Tensor, d: &[f64]) -> Vec<f64> {
    let v = matvec(m, d);
    let n = l2_norm(&v);
    if n == 0.0 {
        return d.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Eigenpair of largest magnitude of a symmetric matrix. `λ` is the
/// Rayleigh quotient of the returned unit vector. Converged once the
/// residual `|Mu - λu|` falls below `1e-10·scale`.
pub fn dominant_eigenpair(m: &Tensor, scale: f64) -> Result<(f64, Vec<f64>)> {
    let n = m.rows();
    // fixed, generic start so the result is deterministic
    let mut u: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * libm::sin(1.0 + i as f64)).collect();
    let un = l2_norm(&u);
    u.iter_mut().for_each(|v| *v /= un);
    let tol = 1e-10 * scale;
    for _ in 0..MAX_EIGEN_ITERATIONS {
        let mu = matvec(m, &u);
        let lambda = dot(&u, &mu);
        let resid = libm::sqrt(mu.iter().zip(&u).map(|(a, b)| (a - lambda * b) * (a - lambda * b)).sum::<f64>());
        if resid <= tol {
            return Ok((lambda, u));
        }
        let nrm = l2_norm(&mu);
        if nrm == 0.0 {
            return Ok((0.0, u));
        }
        u = mu.iter().map(|v| v / nrm).collect();
    }
    Err(Error::NoConvergence(MAX_EIGEN_ITERATIONS))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl CosineStats {
    pub fn from_values(v: &[f64]) -> CosineStats {
        CosineStats {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VadvComparison {
    pub k: usize,
    pub trials: usize,
    pub lambda1: f64,
    pub eig_ratio: f64,
    /// `λ1` too small for the direction to mean anything; `cosines` is None.
    pub degenerate: bool,
    pub cosines: Option<CosineStats>,
}

/// `|cos(r_K, u1)|` over `trials` fresh start directions, seeded from
/// `(seed, trial)`.
pub fn compare_vadv_to_oracle(
    model: &Classifier,
    x: &[f64],
    cfg: &PerturbConfig,
    trials: usize,
    seed: u64,
) -> Result<VadvComparison> {
    let report = dense_hessian(model, x, DEFAULT_HESSIAN_STEP)?;
    compare_with_report(model, x, &report, cfg, trials, seed)
}

/// [`compare_vadv_to_oracle`] against a precomputed Hessian.
pub fn compare_with_report(
    model: &Classifier,
    x: &[f64],
    report: &HessianReport,
    cfg: &PerturbConfig,
    trials: usize,
    seed: u64,
) -> Result<VadvComparison> {
    let mut out = VadvComparison {
        k: cfg.power_iterations,
        trials,
        lambda1: report.lambda1,
        eig_ratio: report.eig_ratio,
        degenerate: report.lambda1.abs() < 1e-12,
        cosines: None,
    };
    if out.degenerate || trials == 0 {
        return Ok(out);
    }
    let dim = x.len();
    let base = Rng::with_stream(seed, streams::PROBE);
    let mut d0 = Vec::with_capacity(trials * dim);
    for t in 0..trials {
        d0.extend(gaussian_unit_rows(&mut base.fork(t as u64), 1, dim)?.into_data());
    }
    // all trials share one batched power iteration; rows are independent
    let xs = Tensor::matrix(trials, dim, x.iter().copied().cycle().take(trials * dim).collect())?;
    let clean = model.probs(&xs, None)?;
    let p = perturbation_rk_from(model, &xs, &clean, Tensor::matrix(trials, dim, d0)?, cfg)?;
    let cos: Vec<f64> = (0..trials).map(|t| abs_cosine(p.r.row(t), &report.u1)).collect();
    out.cosines = Some(CosineStats::from_values(&cos));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdNormReport {
    pub k: usize,
    pub num_samples: usize,
    /// `+∞` when the mean gradient is numerically zero.
    pub normalized_sd_norm: f64,
    pub degenerate: bool,
}

/// `sqrt(sum_i Var_i) / |mean|` over gradient samples, with unbiased
/// variance. Returns `+∞` when `|mean| < 1e-12`.
pub fn sd_norm_statistic(grads: &[Vec<f64>]) -> Result<f64> {
    if grads.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 gradient samples, got {}", grads.len())));
    }
    let n = grads.len() as f64;
    let dim = grads[0].len();
    let mut mean = vec![0.0; dim];
    for g in grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v / n);
    }
    let mut var = 0.0;
    for g in grads {
        var += g.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    var /= n - 1.0;
    let mn = l2_norm(&mean);
    if mn < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(libm::sqrt(var) / mn)
}

/// Normalized SD norm of the θ-gradient of `R^(K)` on minibatches of size
/// `m` drawn without replacement from `inputs`. Evaluated noise-free.
pub fn normalized_sd_norm(
    model: &Classifier,
    inputs: &Tensor,
    cfg: &PerturbConfig,
    m: usize,
    num_samples: usize,
    rng: &mut Rng,
) -> Result<SdNormReport> {
    if num_samples < 2 {
        return Err(Error::InvalidConfig(format!("num_samples must be >= 2, got {}", num_samples)));
    }
    let n = inputs.rows();
    if m == 0 || m > n {
        return Err(Error::InvalidConfig(format!("minibatch {} does not fit {} examples", m, n)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut grads = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        for i in 0..m {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        let x = inputs.select_rows(&idx[..m]);
        grads.push(regularizer_batch(model, &x, cfg, rng, None)?.grad);
    }
    let v = sd_norm_statistic(&grads)?;
    Ok(SdNormReport { k: cfg.power_iterations, num_samples, normalized_sd_norm: v, degenerate: v.is_infinite() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    fn coord(range: (f64, f64), n: usize, i: usize) -> f64 {
        if n <= 1 {
            range.0
        } else {
            range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
        }
    }

    /// Grid nodes in row-major order, `y` outer.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push([Self::coord(self.x_range, self.nx, i), Self::coord(self.y_range, self.ny, j)]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: GridSpec,
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
}

/// LDS at every grid node, each with its own `r_K` seeded from
/// `(seed, node index)`.
pub fn lds_heatmap(model: &Classifier, grid: &GridSpec, cfg: &PerturbConfig, seed: u64) -> Result<Heatmap> {
    if model.spec.input_dim != 2 {
        return Err(Error::InvalidConfig(format!("heatmaps need a 2-D input model, got {}", model.spec.input_dim)));
    }
    let points = grid.points();
    let n = points.len();
    let x = Tensor::matrix(n, 2, points.iter().flatten().copied().collect())?;
    let base = Rng::with_stream(seed, streams::PROBE);
    let mut d0 = Vec::with_capacity(2 * n);
    for i in 0..n {
        d0.extend(gaussian_unit_rows(&mut base.fork(i as u64), 1, 2)?.into_data());
    }
    let clean = model.probs(&x, None)?;
    let p = perturbation_rk_from(model, &x, &clean, Tensor::matrix(n, 2, d0)?, cfg)?;
    let xr = x.zip_map(&p.r, |a, b| a + b)?;
    let logits = model.logits(&xr, None)?;
    let values = (0..n).map(|i| kl_row(clean.row(i), logits.row(i))).collect();
    Ok(Heatmap { grid: grid.clone(), points, values })
}

/// LDS of a single point with a fresh `r_K`; the heatmap uses the same
/// seeding for node `index`.
pub fn lds_at(model: &Classifier, x: &[f64], cfg: &PerturbConfig, seed: u64, index: u64) -> Result<f64> {
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let clean = model.probs(&xt, None)?;
    let mut rng = Rng::with_stream(seed, streams::PROBE).fork(index);
    let p = perturbation_rk(model, &xt, &clean, cfg, &mut rng)?;
    crate::objective::lds(model, &xt, &p.r, &clean, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub numeric: Vec<f64>,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)`, norm-wise.
    pub rel_error: f64,
}

/// Central-difference check of `analytic` against `f` at `theta`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheck> {
    let mut t = theta.to_vec();
    let mut numeric = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = t[i];
        t[i] = orig + step;
        let fp = f(&t)?;
        t[i] = orig - step;
        let fm = f(&t)?;
        t[i] = orig;
        numeric.push((fp - fm) / (2.0 * step));
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = l2_norm(analytic).max(l2_norm(&numeric));
    let rel_error = if denom == 0.0 { 0.0 } else { l2_norm(&diff) / denom };
    Ok(GradCheck { numeric, rel_error })
}
