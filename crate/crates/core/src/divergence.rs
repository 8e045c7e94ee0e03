//! Softmax, KL divergence, one-hot negative log-likelihood and conditional
//! entropy.
//!
//! Everything is computed in log space from logits. Probabilities only
//! appear at API boundaries, so `0 * log 0` never has to be evaluated.
//! The differentiable versions of these functions live on the [`Tape`]
//! (`kl_rows`, `nll`, `entropy_rows`) and share the row kernels below.
//!
//! [`Tape`]: crate::autodiff::Tape

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Tolerance on `sum(p) == 1` for [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A categorical distribution over the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::ZeroDimension);
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("probabilities must be finite and >= 0: {:?}", p)));
        }
        let s: f64 = p.iter().sum();
        if libm::fabs(s - 1.0) > PROB_SUM_TOL {
            return Err(Error::InvalidConfig(format!("probabilities sum to {}", s)));
        }
        Ok(ProbVector(p))
    }

    /// Softmax of a single logit row.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        check_finite(logits, "softmax")?;
        let mut out = vec![0.0; logits.len()];
        softmax_row(logits, &mut out);
        Ok(ProbVector(out))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { node: 0, op })
    }
}

/// `(m, l)` with `logsumexp(row) = m + l`, `m` the row maximum. `l` goes
/// through `log1p` so that `x_i - m - l` keeps full precision for tiny tails.
fn lse_parts(row: &[f64]) -> (f64, f64) {
    let (arg, m) = row.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let tail: f64 = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &v)| libm::exp(v - m)).sum();
    (m, libm::log1p(tail))
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let (m, l) = lse_parts(row);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m) - l;
    }
}

/// `-log softmax(row)[y]`.
pub(crate) fn nll_row(row: &[f64], y: usize) -> f64 {
    let (m, l) = lse_parts(row);
    l - (row[y] - m)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - m);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `sum_i p_i (ln p_i - log_softmax(q)_i)`, with `p_i = 0` terms dropped.
pub(crate) fn kl_row(p: &[f64], q_logits: &[f64]) -> f64 {
    let (m, l) = lse_parts(q_logits);
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q_logits) {
        if pi > 0.0 {
            acc += pi * (libm::log(pi) - ((qi - m) - l));
        }
    }
    // rounding can leave a zero divergence a few ulps below 0
    acc.max(0.0)
}

/// Entropy of `softmax(logits)`; `lse - sum_i s_i x_i`.
pub(crate) fn entropy_row(logits: &[f64]) -> f64 {
    let (m, l) = lse_parts(logits);
    let mut h = 0.0;
    for &x in logits {
        let ls = (x - m) - l;
        let s = libm::exp(ls);
        if s > 0.0 {
            h -= s * ls;
        }
    }
    h
}

/// Row-wise softmax of a logits matrix (a vector is treated as one row).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    check_finite(logits.data(), "softmax")?;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..logits.rows() {
        softmax_row(logits.row(i), out.row_mut(i));
    }
    Ok(out)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    check_finite(logits.data(), "log_softmax")?;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), out.row_mut(i));
    }
    Ok(out)
}

/// KL divergence `D[p || softmax(q_logits)]` for a single example.
pub fn kl(p: &ProbVector, q_logits: &[f64]) -> Result<f64> {
    if p.0.len() != q_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            detail: format!("{} classes vs {} logits", p.0.len(), q_logits.len()),
        });
    }
    check_finite(q_logits, "kl")?;
    Ok(kl_row(&p.0, q_logits))
}

/// Mean over rows of `D[p_i || softmax(q_i)]`.
pub fn kl_batch(p: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            detail: format!("{:?} vs {:?}", p.shape(), q_logits.shape()),
        });
    }
    check_finite(q_logits.data(), "kl")?;
    let m = p.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((0..m).map(|i| kl_row(p.row(i), q_logits.row(i))).sum::<f64>() / m as f64)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn nll_onehot(labels: &[usize], logits: &Tensor) -> Result<f64> {
    let m = logits.rows();
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "nll",
            detail: format!("{} labels for {} rows", labels.len(), m),
        });
    }
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    check_finite(logits.data(), "nll")?;
    let classes = logits.cols();
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let row = logits.row(i);
        acc += nll_row(row, y);
    }
    Ok(acc / m as f64)
}

/// Mean over rows of `-sum_y p log p`, with `0 log 0 = 0`.
pub fn conditional_entropy(probs: &Tensor) -> Result<f64> {
    let m = probs.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for i in 0..m {
        for &p in probs.row(i) {
            if p > 0.0 {
                acc -= p * libm::log(p);
            }
        }
    }
    Ok(acc / m as f64)
}
