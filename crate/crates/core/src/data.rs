//! In-memory datasets, the two-moons generator and labeled/unlabeled splits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, input_dim]`.
    pub inputs: Tensor,
    /// Absent for an unlabeled pool.
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(name: &str, inputs: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Data(format!("inputs must be [n, dim], got {:?}", inputs.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::Data(format!("{} labels for {} inputs", l.len(), inputs.rows())));
            }
        }
        Ok(Dataset { inputs, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::Data(format!("dataset `{}` has no labels", self.name)))
    }

    /// Largest label plus one, or 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(&label) = self.labels.iter().flatten().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: name.into(),
        }
    }

    pub fn without_labels(mut self) -> Dataset {
        self.labels = None;
        self
    }

    /// Row-wise union; labels survive only if both sides have them.
    pub fn concat(&self, other: &Dataset, name: &str) -> Result<Dataset> {
        let inputs = if self.is_empty() {
            other.inputs.clone()
        } else if other.is_empty() {
            self.inputs.clone()
        } else {
            self.inputs.concat_rows(&other.inputs)?
        };
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Dataset { inputs, labels, name: name.into() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoonsConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Gaussian jitter added to each coordinate.
    pub noise_sd: f64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        MoonsConfig { n_labeled: 8, n_unlabeled: 1000, noise_sd: 0.08 }
    }
}

/// Output of [`gen_two_clusters`]. `truth` holds the moon of every
/// unlabeled point and is meant for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoClusters {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub truth: Vec<usize>,
}

fn moon_point(rng: &mut Rng, moon: usize, sd: f64) -> [f64; 2] {
    let t = PI * rng.uniform();
    let (x, y) = if moon == 0 {
        (libm::cos(t), libm::sin(t))
    } else {
        (1.0 - libm::cos(t), 0.5 - libm::sin(t))
    };
    [x + sd * rng.gaussian(), y + sd * rng.gaussian()]
}

/// Two interleaving half-moons. Labeled points are split evenly between the
/// moons; unlabeled points pick a moon uniformly.
pub fn gen_two_clusters(rng: &mut Rng, cfg: &MoonsConfig) -> Result<TwoClusters> {
    if cfg.n_labeled % 2 != 0 {
        return Err(Error::InvalidConfig(format!("n_labeled must be even, got {}", cfg.n_labeled)));
    }
    let mut lx = Vec::with_capacity(cfg.n_labeled * 2);
    let mut ly = Vec::with_capacity(cfg.n_labeled);
    for i in 0..cfg.n_labeled {
        let moon = i % 2;
        lx.extend(moon_point(rng, moon, cfg.noise_sd));
        ly.push(moon);
    }
    let mut ux = Vec::with_capacity(cfg.n_unlabeled * 2);
    let mut truth = Vec::with_capacity(cfg.n_unlabeled);
    for _ in 0..cfg.n_unlabeled {
        let moon = rng.below(2);
        ux.extend(moon_point(rng, moon, cfg.noise_sd));
        truth.push(moon);
    }
    Ok(TwoClusters {
        labeled: Dataset::new("moons-labeled", Tensor::matrix(cfg.n_labeled, 2, lx)?, Some(ly))?,
        unlabeled: Dataset::new("moons-unlabeled", Tensor::matrix(cfg.n_unlabeled, 2, ux)?, None)?,
        truth,
    })
}

/// Index-disjoint partition of a labeled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub labeled: Dataset,
    /// Labels stripped.
    pub unlabeled: Dataset,
    pub validation: Dataset,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
}

/// Draws a class-balanced labeled set and a validation set; the remainder
/// becomes the unlabeled pool. Balanced means per-class counts differ by at
/// most one.
pub fn split(data: &Dataset, rng: &mut Rng, n_labeled: usize, n_validation: usize) -> Result<Split> {
    let labels = data.labels()?;
    let n = data.len();
    if n_labeled + n_validation > n {
        return Err(Error::Data(format!("{} labeled + {} validation exceeds {} examples", n_labeled, n_validation, n)));
    }
    let classes = data.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in by_class.iter_mut() {
        rng.shuffle(pool);
    }
    // the first n_labeled % classes classes (in a shuffled order) get one extra
    let mut order: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut order);
    let base = if classes == 0 { 0 } else { n_labeled / classes };
    let extra = if classes == 0 { 0 } else { n_labeled % classes };
    let mut taken = vec![false; n];
    let mut labeled_idx = Vec::with_capacity(n_labeled);
    for (rank, &c) in order.iter().enumerate() {
        let want = base + usize::from(rank < extra);
        if by_class[c].len() < want {
            return Err(Error::Data(format!("class {} has {} examples, {} needed", c, by_class[c].len(), want)));
        }
        for &i in &by_class[c][..want] {
            labeled_idx.push(i);
            taken[i] = true;
        }
    }
    labeled_idx.sort_unstable();
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rng.shuffle(&mut rest);
    let mut validation_idx = rest[..n_validation].to_vec();
    let mut unlabeled_idx = rest[n_validation..].to_vec();
    validation_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    Ok(Split {
        labeled: data.subset(&labeled_idx, &format!("{}-labeled", data.name)),
        unlabeled: data.subset(&unlabeled_idx, &format!("{}-unlabeled", data.name)).without_labels(),
        validation: data.subset(&validation_idx, &format!("{}-validation", data.name)),
        labeled_idx,
        unlabeled_idx,
        validation_idx,
    })
}
