//! One FedSGD round from the victim's side: batch sampling under the five
//! class-distribution modes, the restricted gradient share, and the two
//! lightweight defenses applied to that share before upload.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, LayerKind, Model};
use crate::tensor::Tensor;

/// Labeled samples available to a client (or as attacker auxiliary data).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class label.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.class_count];
        for (idx, &label) in self.labels.iter().enumerate() {
            pools[label].push(idx);
        }
        pools
    }
}

/// How the class labels of a training batch are distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchDistribution {
    /// Classes drawn i.i.d. from a random subset of all classes; the subset
    /// size is itself drawn uniformly from [2, C].
    #[default]
    Random,
    /// Counts as equal as possible across all classes, remainder assigned to
    /// the lowest class indices.
    Uniform,
    /// Every sample carries the same class.
    Single { class: usize },
    /// Classes drawn i.i.d. from a random subset of the given size.
    Subclassed { subset_size: usize },
    /// A fixed fraction from one major class, the rest spread uniformly at
    /// random over the other classes.
    Imbalanced {
        major_class: usize,
        major_fraction: f64,
    },
}

/// A sampled training batch plus its ground-truth per-class counts.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub true_counts: Vec<usize>,
}

fn draw_from_class(
    dataset: &Dataset,
    pools: &[Vec<usize>],
    class: usize,
    rng: &mut ChaCha20Rng,
) -> Result<usize> {
    let pool = &pools[class];
    if pool.is_empty() {
        return Err(Error::Sampling(format!(
            "class {class} has no samples in the dataset"
        )));
    }
    let _ = dataset;
    Ok(pool[rng.random_range(0..pool.len())])
}

fn random_subset(class_count: usize, size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    sample_indices(rng, class_count, size).into_vec()
}

/// Draws a batch of `batch_size` samples (with replacement within a class)
/// according to the requested distribution. Deterministic for a given seed.
pub fn sample_batch(
    dataset: &Dataset,
    dist: BatchDistribution,
    batch_size: usize,
    seed: u64,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Sampling("dataset is empty".into()));
    }
    let class_count = dataset.class_count;
    let pools = dataset.class_pools();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut classes = Vec::with_capacity(batch_size);
    match dist {
        BatchDistribution::Random => {
            let size = if class_count >= 2 {
                rng.random_range(2..=class_count)
            } else {
                1
            };
            let subset = random_subset(class_count, size, &mut rng);
            for _ in 0..batch_size {
                classes.push(subset[rng.random_range(0..subset.len())]);
            }
        }
        BatchDistribution::Uniform => {
            let base = batch_size / class_count;
            let remainder = batch_size % class_count;
            for class in 0..class_count {
                let count = base + usize::from(class < remainder);
                classes.extend(std::iter::repeat(class).take(count));
            }
        }
        BatchDistribution::Single { class } => {
            if class >= class_count {
                return Err(Error::Index(format!(
                    "single-class mode: class {class} out of range for {class_count} classes"
                )));
            }
            classes.extend(std::iter::repeat(class).take(batch_size));
        }
        BatchDistribution::Subclassed { subset_size } => {
            if subset_size == 0 || subset_size > class_count {
                return Err(Error::Sampling(format!(
                    "subclassed subset size {subset_size} must be in [1, {class_count}]"
                )));
            }
            let subset = random_subset(class_count, subset_size, &mut rng);
            for _ in 0..batch_size {
                classes.push(subset[rng.random_range(0..subset.len())]);
            }
        }
        BatchDistribution::Imbalanced {
            major_class,
            major_fraction,
        } => {
            if major_class >= class_count {
                return Err(Error::Index(format!(
                    "imbalanced mode: class {major_class} out of range"
                )));
            }
            if !(major_fraction > 0.0 && major_fraction <= 1.0) {
                return Err(Error::Sampling(format!(
                    "imbalanced major fraction {major_fraction} must be in (0, 1]"
                )));
            }
            let major = ((major_fraction * batch_size as f64).ceil() as usize).min(batch_size);
            classes.extend(std::iter::repeat(major_class).take(major));
            if major < batch_size && class_count < 2 {
                return Err(Error::Sampling(
                    "imbalanced mode needs a second class for the remainder".into(),
                ));
            }
            for _ in major..batch_size {
                let mut class = rng.random_range(0..class_count - 1);
                if class >= major_class {
                    class += 1;
                }
                classes.push(class);
            }
        }
    }

    let mut inputs = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut true_counts = vec![0usize; class_count];
    for class in classes {
        let idx = draw_from_class(dataset, &pools, class, &mut rng)?;
        inputs.push(dataset.samples[idx].clone());
        labels.push(class);
        true_counts[class] += 1;
    }
    Ok(Batch {
        inputs,
        labels,
        true_counts,
    })
}

/// The restricted information a client uploads: one bottom-stack layer's
/// batch-averaged weight gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientShare {
    /// Bottom-stack index (1-based) of the shared layer.
    pub layer_index: usize,
    pub grad: Tensor,
    pub batch_size: usize,
    pub defense_applied: Option<DefenseSpec>,
}

/// Runs forward + backward for one batch and extracts only the requested
/// layer's batch-averaged weight gradient. The final classifier's gradient
/// is never released.
pub fn client_step(model: &Model, batch: &Batch, shared_stack: usize) -> Result<GradientShare> {
    let stacks = model.bottom_stack_count();
    if shared_stack == 0 || shared_stack > stacks {
        return Err(Error::Index(format!(
            "shared stack {shared_stack} out of range 1..={stacks}"
        )));
    }
    if shared_stack == stacks {
        return Err(Error::Policy(
            "the final classifier's gradient is not shared".into(),
        ));
    }
    let idx = model.stack_layer_index(shared_stack)?;
    match model.bottom[idx].kind {
        LayerKind::Fc { .. } | LayerKind::Conv { .. } => {}
        LayerKind::Relu => {
            return Err(Error::Index(format!(
                "stack {shared_stack} does not address a weight layer"
            )))
        }
    }

    let trace = forward(model, &batch.inputs)?;
    let pass = backward(model, &trace, &batch.labels)?;
    Ok(GradientShare {
        layer_index: shared_stack,
        grad: pass.stack_weight_grad(shared_stack).clone(),
        batch_size: batch.inputs.len(),
        defense_applied: None,
    })
}

/// Lightweight defense applied to the shared gradient before upload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseSpec {
    #[default]
    None,
    /// Zero out the `floor(ratio * n)` entries of smallest magnitude.
    Prune { ratio: f64 },
    /// Add i.i.d. Gaussian noise with the given standard deviation.
    Noise { sigma: f64 },
}

/// Applies a defense to a share. `None` is the bit-exact identity; the other
/// modes are deterministic for a given seed.
pub fn apply_defense(
    share: &GradientShare,
    defense: DefenseSpec,
    seed: u64,
) -> Result<GradientShare> {
    match defense {
        DefenseSpec::None => Ok(share.clone()),
        DefenseSpec::Prune { ratio } => {
            if !(0.0..1.0).contains(&ratio) {
                return Err(Error::Config(format!(
                    "prune ratio {ratio} must be in [0, 1)"
                )));
            }
            let n = share.grad.len();
            let zero_count = (ratio * n as f64).floor() as usize;
            let mut grad = share.grad.clone();
            // ties broken by flat index order via stable sort
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                grad.data()[a]
                    .abs()
                    .partial_cmp(&grad.data()[b].abs())
                    .unwrap()
            });
            for &idx in order.iter().take(zero_count) {
                grad.data_mut()[idx] = 0.0;
            }
            Ok(GradientShare {
                defense_applied: Some(defense),
                grad,
                ..share.clone()
            })
        }
        DefenseSpec::Noise { sigma } => {
            if sigma < 0.0 {
                return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
            }
            let mut grad = share.grad.clone();
            if sigma > 0.0 {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Config(format!("bad noise parameter: {e}")))?;
                for v in grad.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            Ok(GradientShare {
                defense_applied: Some(defense),
                grad,
                ..share.clone()
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BottomStackSpec, InitScheme};
    use crate::nn;

    fn toy_dataset(class_count: usize, per_class: usize, dim: usize) -> Dataset {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for class in 0..class_count {
            for i in 0..per_class {
                let value = class as f64 + i as f64 / 100.0;
                samples.push(Tensor::vector(vec![value; dim]));
                labels.push(class);
            }
        }
        Dataset::new(samples, labels, class_count).unwrap()
    }

    #[test]
    fn uniform_mode_splits_evenly() {
        let data = toy_dataset(10, 3, 2);
        let batch = sample_batch(&data, BatchDistribution::Uniform, 20, 1).unwrap();
        assert_eq!(batch.true_counts, vec![2; 10]);
    }

    #[test]
    fn uniform_remainder_goes_to_lowest_classes() {
        let data = toy_dataset(4, 3, 2);
        let batch = sample_batch(&data, BatchDistribution::Uniform, 6, 1).unwrap();
        assert_eq!(batch.true_counts, vec![2, 2, 1, 1]);
    }

    #[test]
    fn single_mode_concentrates_on_one_class() {
        let data = toy_dataset(5, 2, 2);
        let batch = sample_batch(&data, BatchDistribution::Single { class: 3 }, 7, 5).unwrap();
        assert_eq!(batch.true_counts, vec![0, 0, 0, 7, 0]);
        assert!(batch.labels.iter().all(|&l| l == 3));
    }

    #[test]
    fn imbalanced_mode_majority_count() {
        let data = toy_dataset(4, 3, 2);
        let batch = sample_batch(
            &data,
            BatchDistribution::Imbalanced {
                major_class: 0,
                major_fraction: 0.75,
            },
            8,
            11,
        )
        .unwrap();
        assert_eq!(batch.true_counts[0], 6);
        assert_eq!(batch.true_counts.iter().sum::<usize>(), 8);
        // remainder never lands on the major class
        assert_eq!(batch.true_counts[1..].iter().sum::<usize>(), 2);
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let data = toy_dataset(6, 4, 3);
        for dist in [
            BatchDistribution::Random,
            BatchDistribution::Uniform,
            BatchDistribution::Subclassed { subset_size: 3 },
        ] {
            let a = sample_batch(&data, dist, 12, 77).unwrap();
            let b = sample_batch(&data, dist, 12, 77).unwrap();
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.inputs, b.inputs);
        }
    }

    #[test]
    fn counts_always_sum_to_batch_size() {
        let data = toy_dataset(7, 2, 2);
        for seed in 0..10 {
            for dist in [
                BatchDistribution::Random,
                BatchDistribution::Uniform,
                BatchDistribution::Single { class: 2 },
                BatchDistribution::Subclassed { subset_size: 4 },
                BatchDistribution::Imbalanced {
                    major_class: 1,
                    major_fraction: 0.5,
                },
            ] {
                let batch = sample_batch(&data, dist, 13, seed).unwrap();
                assert_eq!(batch.true_counts.iter().sum::<usize>(), 13);
            }
        }
    }

    #[test]
    fn empty_class_pool_is_a_sampling_error() {
        let data = Dataset::new(
            vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0])],
            vec![0, 0],
            3,
        )
        .unwrap();
        let err = sample_batch(&data, BatchDistribution::Single { class: 2 }, 4, 1);
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn subclassed_rejects_oversized_subset() {
        let data = toy_dataset(3, 2, 2);
        assert!(sample_batch(
            &data,
            BatchDistribution::Subclassed { subset_size: 4 },
            4,
            1
        )
        .is_err());
    }

    fn tiny_model() -> Model {
        let spec = BottomStackSpec::mlp(4, &[3], 2).unwrap();
        build_model(&[4], &[], &spec, InitScheme::PositiveUniform, 5).unwrap()
    }

    #[test]
    fn client_step_single_sample_matches_layer_backward() {
        let model = tiny_model();
        let batch = Batch {
            inputs: vec![Tensor::vector(vec![0.2, 0.4, 0.6, 0.8])],
            labels: vec![1],
            true_counts: vec![0, 1],
        };
        let share = client_step(&model, &batch, 1).unwrap();

        let trace = forward(&model, &batch.inputs).unwrap();
        let pass = backward(&model, &trace, &batch.labels).unwrap();
        let gz1 = pass.bottom_input_grads[0][1].clone();
        let (gw1, _) =
            nn::fc_backward(model.stack_weight(1).unwrap(), &batch.inputs[0], &gz1).unwrap();
        let diff = share.grad.sub(&gw1).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(share.batch_size, 1);
        assert_eq!(share.layer_index, 1);
    }

    #[test]
    fn client_step_refuses_final_layer() {
        let model = tiny_model();
        let batch = Batch {
            inputs: vec![Tensor::vector(vec![0.1; 4])],
            labels: vec![0],
            true_counts: vec![1, 0],
        };
        let err = client_step(&model, &batch, model.bottom_stack_count());
        assert!(matches!(err, Err(Error::Policy(_))));
    }

    #[test]
    fn identical_batch_share_equals_single_sample_share() {
        let model = tiny_model();
        let x = Tensor::vector(vec![0.3, 0.1, 0.9, 0.5]);
        let one = Batch {
            inputs: vec![x.clone()],
            labels: vec![0],
            true_counts: vec![1, 0],
        };
        let many = Batch {
            inputs: vec![x.clone(), x.clone(), x.clone(), x],
            labels: vec![0; 4],
            true_counts: vec![4, 0],
        };
        let share_one = client_step(&model, &one, 1).unwrap();
        let share_many = client_step(&model, &many, 1).unwrap();
        let diff = share_one.grad.sub(&share_many.grad).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-12));
    }

    fn toy_share(values: Vec<f64>) -> GradientShare {
        GradientShare {
            layer_index: 1,
            grad: Tensor::vector(values),
            batch_size: 4,
            defense_applied: None,
        }
    }

    #[test]
    fn prune_zero_ratio_is_identity() {
        let share = toy_share(vec![1.0, -2.0, 0.1, 3.0]);
        let out = apply_defense(&share, DefenseSpec::Prune { ratio: 0.0 }, 1).unwrap();
        assert_eq!(out.grad, share.grad);
    }

    #[test]
    fn prune_half_zeroes_smallest_magnitudes() {
        let share = toy_share(vec![1.0, -2.0, 0.1, 3.0]);
        let out = apply_defense(&share, DefenseSpec::Prune { ratio: 0.5 }, 1).unwrap();
        assert_eq!(out.grad.data(), &[0.0, -2.0, 0.0, 3.0]);
    }

    #[test]
    fn prune_keeps_survivors_untouched() {
        let share = toy_share(vec![0.5, -0.4, 0.3, -0.2, 0.1, 0.05, 0.9, -0.8]);
        let out = apply_defense(&share, DefenseSpec::Prune { ratio: 0.6 }, 1).unwrap();
        let zeros = out.grad.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros >= 4); // floor(0.6 * 8)
        for (before, after) in share.grad.data().iter().zip(out.grad.data()) {
            assert!(*after == 0.0 || after == before);
        }
    }

    #[test]
    fn noise_matches_requested_moments() {
        let share = GradientShare {
            layer_index: 1,
            grad: Tensor::zeros(vec![1_000_000]),
            batch_size: 4,
            defense_applied: None,
        };
        let sigma = 0.2;
        let out = apply_defense(&share, DefenseSpec::Noise { sigma }, 99).unwrap();
        let n = out.grad.len() as f64;
        let mean = out.grad.sum() / n;
        let var = out.grad.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 * sigma);
        assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let share = toy_share(vec![1.0, 2.0, 3.0, 4.0]);
        let a = apply_defense(&share, DefenseSpec::Noise { sigma: 0.1 }, 7).unwrap();
        let b = apply_defense(&share, DefenseSpec::Noise { sigma: 0.1 }, 7).unwrap();
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn none_defense_is_bit_exact_identity() {
        let share = toy_share(vec![1.0, f64::MIN_POSITIVE, -0.0, 42.0]);
        let out = apply_defense(&share, DefenseSpec::None, 123).unwrap();
        assert_eq!(out, share);
    }
}
