//! Synthetic Gaussian-class dataset generator, the desk-scale stand-in for
//! image training data.
//!
//! Each class gets a mean at distance `separation` from the origin along a
//! random unit direction drawn in the non-negative orthant, mirroring the
//! non-negative pixel statistics of image data; samples add unit-variance
//! isotropic noise around the class mean.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    /// Shape of one sample, e.g. `[32]` or `[1, 6, 6]`.
    pub shape: Vec<usize>,
    pub per_class: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("synthetic class_count must be >= 2".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("synthetic per_class must be >= 1".into()));
        }
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "synthetic shape {:?} must be non-empty and positive",
                self.shape
            )));
        }
        if self.separation < 0.0 {
            return Err(Error::Config("synthetic separation must be >= 0".into()));
        }
        Ok(())
    }
}

fn unit_direction(dims: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dims)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g.abs()
        })
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut dir {
            *v /= norm;
        }
    }
    dir
}

/// Generates the dataset described by `spec`, deterministically from
/// `spec.seed`.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dims: usize = spec.shape.iter().product();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            unit_direction(dims, &mut rng)
                .into_iter()
                .map(|v| v * spec.separation)
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.class_count * spec.per_class);
    let mut labels = Vec::with_capacity(spec.class_count * spec.per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let data: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + noise
                })
                .collect();
            samples.push(Tensor::new(spec.shape.clone(), data)?);
            labels.push(class);
        }
    }
    Dataset::new(samples, labels, spec.class_count)
}
