//! In-memory datasets of raw token matrices.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{patchify, TokenScheme};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Labelled instances, each a `[n, token_dim]` matrix of raw tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S: Real = f64> {
    pub inputs: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<S: Real> Dataset<S> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Greyscale or colour images (`side*side*channels` bytes each, channels
    /// last) scaled to `[0, 1]` and cut into tokens.
    pub fn from_images(
        images: &[Vec<u8>],
        labels: &[u8],
        side: usize,
        channels: usize,
        classes: usize,
        scheme: TokenScheme,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let mut inputs = Vec::with_capacity(images.len());
        for img in images {
            let px: Vec<S> = img.iter().map(|&b| S::from_f64(b as f64 / 255.0)).collect();
            inputs.push(patchify(&px, side, channels, scheme)?);
        }
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    /// The first `count` instances.
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Dataset { inputs: self.inputs[..count].to_vec(), labels: self.labels[..count].to_vec(), classes: self.classes }
    }

    pub fn cast<T: Real>(&self) -> Dataset<T> {
        Dataset { inputs: self.inputs.iter().map(|t| t.cast()).collect(), labels: self.labels.clone(), classes: self.classes }
    }
}

/// Parameters of [`synthetic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub n: usize,
    pub d: usize,
    pub count: usize,
    /// Standard deviation of the per-token noise around the class mean.
    pub noise: f64,
}

/// Gaussian class-mean tokens.
///
/// From `Rng::derived(seed, [SYNTHETIC])`: first the class means
/// (`classes x d` standard normals, row by row), then for every instance its
/// label (`below(classes)`) followed by `n x d` noise draws; token
/// `= mean[label] + noise * N(0, 1)`.
pub fn synthetic<S: Real>(spec: &SyntheticSpec) -> Result<Dataset<S>> {
    if spec.classes == 0 || spec.n == 0 || spec.d == 0 {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let mut rng = Rng::derived(spec.seed, &[rng::stream::SYNTHETIC]);
    let means: Tensor<f64> = rng.normal_tensor(spec.classes, spec.d, 1.0);
    let mut inputs = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let y = rng.below(spec.classes as u64) as usize;
        let t = Tensor::from_fn(spec.n, spec.d, |_, j| S::from_f64(means.at(y, j) + spec.noise * rng.normal()));
        inputs.push(t);
        labels.push(y);
    }
    Ok(Dataset { inputs, labels, classes: spec.classes })
}
