//! The gradient-bridge label recovery attack.
//!
//! From a single bottom-stack weight gradient the attack reconstructs the
//! batch-averaged gradient of the output logits: the shared layer is crossed
//! with the row-wise weight identity (FC) or Frobenius identity (Conv), and
//! every later stack with the `(W Wᵀ)⁻¹ W` inversion. Per-class label counts
//! then follow from `λ = B (p̃ − ∇z̄)` with estimated probabilities `p̃`.
//!
//! The attacker sees model weights and the share; activations are estimated
//! from auxiliary or dummy data, never observed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flsim::GradientShare;
use crate::model::{forward, Model};
use crate::tensor::Tensor;

/// Eigenvalues below `cutoff_fraction * max` are treated as zero in the
/// bridge solve.
const SV_CUTOFF_FRACTION: f64 = 1e-10;
/// Condition number above which a bridge step is flagged.
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateSource {
    Auxiliary { sample_count: usize },
    Dummy { sample_count: usize },
}

/// Attacker-side estimates of the shared stack's activation and the output
/// probability vector.
#[derive(Debug, Clone)]
pub struct AuxEstimates {
    pub a_tilde: Tensor,
    pub p_tilde: Tensor,
    pub source: EstimateSource,
}

impl AuxEstimates {
    pub fn new(a_tilde: Tensor, p_tilde: Tensor, source: EstimateSource) -> Result<Self> {
        if (p_tilde.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Estimation(format!(
                "p_tilde sums to {}, not 1",
                p_tilde.sum()
            )));
        }
        if a_tilde.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Estimation(
                "a_tilde still contains zero entries".into(),
            ));
        }
        Ok(Self {
            a_tilde,
            p_tilde,
            source,
        })
    }

    /// Builds both estimates from one forward pass over the selected samples.
    pub fn estimate(
        model: &Model,
        samples: &[Tensor],
        labels: Option<&[usize]>,
        stack_index: usize,
        sample_count: usize,
        source: EstimateSource,
    ) -> Result<Self> {
        let (a_tilde, p_tilde) =
            mean_activation_and_probs(model, samples, labels, stack_index, sample_count)?;
        Self::new(a_tilde, p_tilde, source)
    }
}

/// Picks `want` sample indices. With labels they are spread as evenly as
/// possible over the classes (remainder to the lowest class indices, samples
/// taken in dataset order); without labels the first `want` samples are used.
fn select_samples(
    labels: Option<&[usize]>,
    class_count: usize,
    available: usize,
    want: usize,
) -> Vec<usize> {
    match labels {
        None => (0..available.min(want)).collect(),
        Some(labels) => {
            let mut pools = vec![Vec::new(); class_count];
            for (idx, &label) in labels.iter().enumerate() {
                pools[label].push(idx);
            }
            let base = want / class_count;
            let remainder = want % class_count;
            let mut selected = Vec::with_capacity(want);
            for (class, pool) in pools.iter().enumerate() {
                let quota = base + usize::from(class < remainder);
                selected.extend(pool.iter().take(quota).copied());
            }
            selected.sort_unstable();
            selected
        }
    }
}

fn mean_activation_and_probs(
    model: &Model,
    samples: &[Tensor],
    labels: Option<&[usize]>,
    stack_index: usize,
    sample_count: usize,
) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Estimation("no estimation data".into()));
    }
    if sample_count == 0 {
        return Err(Error::Estimation("sample count must be >= 1".into()));
    }
    if stack_index == 0 || stack_index >= model.bottom_stack_count() {
        return Err(Error::Index(format!(
            "stack {stack_index} has no activation to estimate"
        )));
    }
    let picked = select_samples(labels, model.class_count, samples.len(), sample_count);
    if picked.is_empty() {
        return Err(Error::Estimation("sample selection came up empty".into()));
    }

    let mut a_sum: Option<Tensor> = None;
    let mut p_sum = Tensor::zeros(vec![model.class_count]);
    for &idx in &picked {
        let trace = forward(model, std::slice::from_ref(&samples[idx]))?;
        let sample = &trace.samples[0];
        let act = sample.stack_activation(stack_index);
        match &mut a_sum {
            None => a_sum = Some(act.clone()),
            Some(sum) => sum.axpy(1.0, act)?,
        }
        p_sum.axpy(1.0, &sample.probs)?;
    }
    let n = picked.len() as f64;
    let mut a_tilde = a_sum.unwrap().scale(1.0 / n);
    let p_tilde = p_sum.scale(1.0 / n);

    // zero activations cannot be divided through; replace them with the mean
    // of the non-zero entries
    let nonzero: Vec<f64> = a_tilde
        .data()
        .iter()
        .copied()
        .filter(|&v| v != 0.0)
        .collect();
    if nonzero.is_empty() {
        return Err(Error::Estimation(
            "estimated activation is identically zero".into(),
        ));
    }
    let replacement = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
    for v in a_tilde.data_mut() {
        if *v == 0.0 {
            *v = replacement;
        }
    }
    Ok((a_tilde, p_tilde))
}

/// Mean activation of bottom stack `stack_index` over up to `sample_count`
/// samples, zero entries replaced by the mean of the non-zero entries.
pub fn estimate_features(
    model: &Model,
    samples: &[Tensor],
    labels: Option<&[usize]>,
    stack_index: usize,
    sample_count: usize,
) -> Result<Tensor> {
    mean_activation_and_probs(model, samples, labels, stack_index, sample_count)
        .map(|(a_tilde, _)| a_tilde)
}

/// Mean softmax output over up to `sample_count` samples.
pub fn estimate_probs(
    model: &Model,
    samples: &[Tensor],
    labels: Option<&[usize]>,
    sample_count: usize,
) -> Result<Tensor> {
    // any valid stack works; only the probabilities are kept
    mean_activation_and_probs(model, samples, labels, 1, sample_count).map(|(_, p_tilde)| p_tilde)
}

/// Standard-normal dummy samples of the given shape, deterministic per seed.
pub fn make_dummy_data(input_shape: &[usize], sample_count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n: usize = input_shape.iter().product();
    (0..sample_count)
        .map(|_| {
            let data = (0..n)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>();
            Tensor::new(input_shape.to_vec(), data).expect("shape is fixed")
        })
        .collect()
}

/// Crosses the shared stack: estimated batch-averaged activation gradient
/// per output unit, `diag(∇W̄ Wᵀ) ⊘ ã` for FC shares and
/// `⟨∇W̄_k, W_k⟩_F ⊘ ã_k` for Conv shares with 1x1 outputs.
pub fn bridge_first_stack(
    share: &GradientShare,
    weight: &Tensor,
    a_tilde: &Tensor,
) -> Result<Tensor> {
    if share.grad.shape() != weight.shape() {
        return Err(Error::Shape(format!(
            "share shape {:?} does not match weight {:?}",
            share.grad.shape(),
            weight.shape()
        )));
    }
    if a_tilde.data().iter().any(|&v| v == 0.0) {
        return Err(Error::Estimation(
            "a_tilde has zero entries; zero replacement must run first".into(),
        ));
    }
    let units = weight.shape()[0];
    if a_tilde.len() != units {
        return Err(Error::Shape(format!(
            "a_tilde length {} does not match {units} output units",
            a_tilde.len()
        )));
    }
    let per_unit = weight.len() / units;
    let mut out = vec![0.0; units];
    for k in 0..units {
        let lo = k * per_unit;
        let hi = lo + per_unit;
        let dot: f64 = share.grad.data()[lo..hi]
            .iter()
            .zip(&weight.data()[lo..hi])
            .map(|(g, w)| g * w)
            .sum();
        out[k] = dot / a_tilde.data()[k];
    }
    Ok(Tensor::vector(out))
}

/// One bridge inversion step together with its conditioning flag.
#[derive(Debug, Clone)]
pub struct BridgeStep {
    pub grad: Tensor,
    pub ill_conditioned: bool,
}

/// Solves `(W Wᵀ) u = W grad_x` through a rank-revealing symmetric
/// eigendecomposition; eigenvalues below `1e-10 * max` are dropped. The
/// result is flagged (not rejected) when the condition number exceeds 1e12.
pub fn bridge_fc_step(weight: &Tensor, grad_x_bar: &Tensor) -> Result<BridgeStep> {
    if weight.ndim() != 2 {
        return Err(Error::Shape(format!(
            "bridge step needs an FC weight matrix, got {:?}",
            weight.shape()
        )));
    }
    let (n, m) = (weight.rows(), weight.cols());
    if n > m {
        return Err(Error::Shape(format!(
            "bridge step needs out <= in, got {n} x {m}"
        )));
    }
    if grad_x_bar.len() != m {
        return Err(Error::Shape(format!(
            "gradient length {} does not match {m} inputs",
            grad_x_bar.len()
        )));
    }
    let w = DMatrix::from_row_slice(n, m, weight.data());
    let gram = &w * w.transpose();
    let rhs = &w * DVector::from_column_slice(grad_x_bar.data());

    let eigen = SymmetricEigen::new(gram);
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_eig = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let condition = if min_eig > 0.0 {
        max_eig / min_eig
    } else {
        f64::INFINITY
    };
    let ill_conditioned = !(condition <= CONDITION_LIMIT);

    let cutoff = SV_CUTOFF_FRACTION * max_eig;
    let projected = eigen.eigenvectors.transpose() * rhs;
    let mut coeffs = DVector::zeros(n);
    for i in 0..n {
        if eigen.eigenvalues[i] > cutoff {
            coeffs[i] = projected[i] / eigen.eigenvalues[i];
        }
    }
    let solution = eigen.eigenvectors * coeffs;
    Ok(BridgeStep {
        grad: Tensor::vector(solution.iter().copied().collect()),
        ill_conditioned,
    })
}

/// Runs the bridge recursion through the remaining stacks (the shared
/// stack's successors up to and including the final classifier).
pub fn bridge_to_logits(weights: &[&Tensor], grad_a1_bar: &Tensor) -> Result<BridgeStep> {
    let mut grad = grad_a1_bar.clone();
    let mut ill_conditioned = false;
    for weight in weights {
        let step = bridge_fc_step(weight, &grad)?;
        grad = step.grad;
        ill_conditioned |= step.ill_conditioned;
    }
    Ok(BridgeStep {
        grad,
        ill_conditioned,
    })
}

/// Recovered per-class label counts: the real-valued solution of the
/// recovery equation and its integer rounding.
#[derive(Debug, Clone)]
pub struct LabelCounts {
    pub raw: Tensor,
    pub counts: Vec<usize>,
    pub batch_size: usize,
}

/// `λ = B (p̃ − ∇z̄)`, rounded to non-negative integers that sum to B.
pub fn recover_labels(
    p_tilde: &Tensor,
    grad_z_bar: &Tensor,
    batch_size: usize,
) -> Result<LabelCounts> {
    if p_tilde.len() != grad_z_bar.len() {
        return Err(Error::Shape(format!(
            "p_tilde has {} classes, gradient has {}",
            p_tilde.len(),
            grad_z_bar.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be >= 1".into()));
    }
    let raw = p_tilde.sub(grad_z_bar)?.scale(batch_size as f64);
    let counts = round_counts(raw.data(), batch_size);
    Ok(LabelCounts {
        raw,
        counts,
        batch_size,
    })
}

/// Rounds a real-valued count vector to non-negative integers summing to
/// exactly `batch_size`: negatives clamp to zero, values are floored, and the
/// residual units are moved one at a time to/from the class whose fractional
/// remainder is largest/smallest (ties resolved toward lower class indices).
pub fn round_counts(raw: &[f64], batch_size: usize) -> Vec<usize> {
    let mut counts = vec![0usize; raw.len()];
    let mut residuals = vec![0.0f64; raw.len()];
    for (i, &v) in raw.iter().enumerate() {
        let clamped = v.max(0.0);
        let floor = clamped.floor();
        counts[i] = floor as usize;
        residuals[i] = clamped - floor;
    }
    let mut total: usize = counts.iter().sum();
    while total < batch_size {
        let mut best = 0;
        for i in 1..raw.len() {
            if residuals[i] > residuals[best] {
                best = i;
            }
        }
        counts[best] += 1;
        residuals[best] -= 1.0;
        total += 1;
    }
    while total > batch_size {
        let mut best = None;
        for i in 0..raw.len() {
            if counts[i] == 0 {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if residuals[i] < residuals[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("positive total implies a non-zero count");
        counts[b] -= 1;
        residuals[b] += 1.0;
        total -= 1;
    }
    counts
}

/// Full attack outcome for one share.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub labels: LabelCounts,
    pub ill_conditioned: bool,
}

/// Runs the whole bridge against one share: shared-stack crossing, inversion
/// through the remaining stacks, label recovery.
pub fn run_attack(
    model: &Model,
    share: &GradientShare,
    estimates: &AuxEstimates,
) -> Result<AttackOutcome> {
    let shared = share.layer_index;
    let weight = model.stack_weight(shared)?;
    let grad_a = bridge_first_stack(share, weight, &estimates.a_tilde)?;

    let stacks = model.bottom_stack_count();
    let mut weights = Vec::with_capacity(stacks - shared);
    for stack in shared + 1..=stacks {
        weights.push(model.stack_weight(stack)?);
    }
    let step = bridge_to_logits(&weights, &grad_a)?;
    if step.grad.len() != model.class_count {
        return Err(Error::Shape(format!(
            "bridge produced {} entries for {} classes",
            step.grad.len(),
            model.class_count
        )));
    }
    let labels = recover_labels(&estimates.p_tilde, &step.grad, share.batch_size)?;
    Ok(AttackOutcome {
        labels,
        ill_conditioned: step.ill_conditioned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flsim::{client_step, Batch};
    use crate::model::{backward, build_model, BottomStackSpec, InitScheme};
    use proptest::prelude::*;
    use rand::Rng;

    fn positive_sample(dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::vector((0..dim).map(|_| rng.random_range(0.1..1.0)).collect())
    }

    fn mlp_model(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Model {
        let spec = BottomStackSpec::mlp(input, hidden, classes).unwrap();
        build_model(&[input], &[], &spec, InitScheme::PositiveUniform, seed).unwrap()
    }

    #[test]
    fn dummy_data_is_deterministic_and_shaped() {
        let a = make_dummy_data(&[3, 4, 4], 5, 42);
        let b = make_dummy_data(&[3, 4, 4], 5, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0].shape(), &[3, 4, 4]);
    }

    #[test]
    fn dummy_data_moments_are_standard_normal() {
        let data = make_dummy_data(&[1000], 1000, 7);
        let n = 1_000_000.0;
        let mean: f64 = data.iter().map(|t| t.sum()).sum::<f64>() / n;
        let var: f64 = data
            .iter()
            .flat_map(|t| t.data())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.005);
        assert!((var.sqrt() - 1.0).abs() < 0.005);
    }

    #[test]
    fn feature_estimate_from_copies_is_exact() {
        let model = mlp_model(6, &[5, 4], 3, 1);
        let x = positive_sample(6, 2);
        let copies = vec![x.clone(); 8];
        let a_tilde = estimate_features(&model, &copies, None, 1, 8).unwrap();
        let trace = forward(&model, &[x]).unwrap();
        let diff = a_tilde.sub(trace.samples[0].stack_activation(1)).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn feature_estimate_positive_regime_needs_no_replacement() {
        let model = mlp_model(6, &[5, 4], 3, 3);
        let samples: Vec<Tensor> = (0..50).map(|i| positive_sample(6, 100 + i)).collect();
        let a_tilde = estimate_features(&model, &samples, None, 1, 50).unwrap();
        assert!(a_tilde.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn feature_estimate_tracks_population_mean() {
        let model = mlp_model(8, &[6, 5], 3, 5);
        let population = make_dummy_data(&[8], 100_000, 11);
        let population_mean = estimate_features(&model, &population, None, 1, 100_000).unwrap();

        let sample = make_dummy_data(&[8], 1000, 13);
        let traces: Vec<Tensor> = sample
            .iter()
            .map(|x| {
                forward(&model, std::slice::from_ref(x)).unwrap().samples[0]
                    .stack_activation(1)
                    .clone()
            })
            .collect();
        let estimate = estimate_features(&model, &sample, None, 1, 1000).unwrap();

        for dim in 0..estimate.len() {
            let mean = estimate.data()[dim];
            let std = (traces
                .iter()
                .map(|t| (t.data()[dim] - mean).powi(2))
                .sum::<f64>()
                / 999.0)
                .sqrt();
            let tolerance = 3.0 * std / (1000.0_f64).sqrt();
            assert!(
                (mean - population_mean.data()[dim]).abs() <= tolerance,
                "dim {dim}: {mean} vs population {}",
                population_mean.data()[dim]
            );
        }
    }

    #[test]
    fn estimate_errors_on_empty_data() {
        let model = mlp_model(4, &[3], 2, 7);
        assert!(estimate_features(&model, &[], None, 1, 10).is_err());
        assert!(estimate_probs(&model, &[], None, 10).is_err());
    }

    #[test]
    fn prob_estimate_uniform_for_equal_logits() {
        // identical classifier rows force equal logits for every input
        let mut model = mlp_model(4, &[3], 2, 9);
        let last = model.bottom.len() - 1;
        model.bottom[last].weight =
            Some(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap());
        let samples: Vec<Tensor> = (0..10).map(|i| positive_sample(4, 200 + i)).collect();
        let p_tilde = estimate_probs(&model, &samples, None, 10).unwrap();
        for &p in p_tilde.data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_estimate_single_sample_is_that_sample() {
        let model = mlp_model(5, &[4], 3, 15);
        let x = positive_sample(5, 3);
        let p_tilde = estimate_probs(&model, std::slice::from_ref(&x), None, 1).unwrap();
        let trace = forward(&model, &[x]).unwrap();
        assert_eq!(p_tilde, trace.samples[0].probs);
    }

    #[test]
    fn prob_estimate_hundred_classes_centers_on_one_percent() {
        let model = mlp_model(16, &[110], 100, 17);
        let samples = make_dummy_data(&[16], 200, 19);
        let p_tilde = estimate_probs(&model, &samples, None, 200).unwrap();
        let mean = p_tilde.sum() / 100.0;
        assert!((mean - 0.01).abs() < 1e-12);
        for &p in p_tilde.data() {
            assert!(p > 0.001 && p < 0.1, "probability {p} left [0.001, 0.1]");
        }
    }

    fn single_sample_setup(seed: u64) -> (Model, Batch) {
        let model = mlp_model(6, &[5, 4], 3, seed);
        let x = positive_sample(6, seed + 1000);
        let batch = Batch {
            inputs: vec![x],
            labels: vec![1],
            true_counts: vec![0, 1, 0],
        };
        (model, batch)
    }

    #[test]
    fn first_stack_bridge_recovers_true_gradient() {
        let (model, batch) = single_sample_setup(21);
        let share = client_step(&model, &batch, 1).unwrap();
        let trace = forward(&model, &batch.inputs).unwrap();
        let pass = backward(&model, &trace, &batch.labels).unwrap();

        let a_true = trace.samples[0].stack_activation(1).clone();
        let grad_a =
            bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_true).unwrap();
        let truth = pass.stack_activation_grad(0, 1);
        let diff = grad_a.sub(truth).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn first_stack_bridge_conv_share() {
        let spec = BottomStackSpec::conv_first(2, 3, 3, 5, &[4], 3).unwrap();
        let model =
            build_model(&[2, 3, 3], &[], &spec, InitScheme::PositiveUniform, 23).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let x = Tensor::new(
            vec![2, 3, 3],
            (0..18).map(|_| rng.random_range(0.1..1.0)).collect(),
        )
        .unwrap();
        let batch = Batch {
            inputs: vec![x],
            labels: vec![2],
            true_counts: vec![0, 0, 1],
        };
        let share = client_step(&model, &batch, 1).unwrap();
        let trace = forward(&model, &batch.inputs).unwrap();
        let pass = backward(&model, &trace, &batch.labels).unwrap();

        let a_true = trace.samples[0]
            .stack_activation(1)
            .reshape(vec![5])
            .unwrap();
        let grad_a =
            bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_true).unwrap();
        let truth = pass
            .stack_activation_grad(0, 1)
            .reshape(vec![5])
            .unwrap();
        let diff = grad_a.sub(&truth).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn first_stack_bridge_zero_share_gives_zero() {
        let (model, batch) = single_sample_setup(25);
        let mut share = client_step(&model, &batch, 1).unwrap();
        share.grad = Tensor::zeros(share.grad.shape().to_vec());
        let a_tilde = Tensor::vector(vec![0.5; 5]);
        let grad_a =
            bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_tilde).unwrap();
        assert!(grad_a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_stack_bridge_guards_zero_activation() {
        let (model, batch) = single_sample_setup(27);
        let share = client_step(&model, &batch, 1).unwrap();
        let a_tilde = Tensor::vector(vec![0.5, 0.0, 0.5, 0.5, 0.5]);
        let err = bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_tilde);
        assert!(matches!(err, Err(Error::Estimation(_))));
    }

    #[test]
    fn first_stack_bridge_identical_batch_average() {
        let model = mlp_model(6, &[5, 4], 3, 29);
        let x = positive_sample(6, 31);
        let batch = Batch {
            inputs: vec![x.clone(); 4],
            labels: vec![0, 0, 0, 0],
            true_counts: vec![4, 0, 0],
        };
        let share = client_step(&model, &batch, 1).unwrap();
        let trace = forward(&model, &batch.inputs).unwrap();
        let pass = backward(&model, &trace, &batch.labels).unwrap();

        let a_common = trace.samples[0].stack_activation(1).clone();
        let grad_a =
            bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_common).unwrap();

        let mut truth = Tensor::zeros(vec![5]);
        for n in 0..4 {
            truth.axpy(0.25, pass.stack_activation_grad(n, 1)).unwrap();
        }
        let diff = grad_a.sub(&truth).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn fc_step_orthonormal_rows_reduce_to_projection() {
        let w = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![0.3, -0.7, 5.0]);
        let step = bridge_fc_step(&w, &g).unwrap();
        assert!(!step.ill_conditioned);
        let expected = w.matvec(&g).unwrap();
        let diff = step.grad.sub(&expected).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn fc_step_plants_and_recovers() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let w = Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let v = Tensor::vector(vec![0.4, -1.1, 2.2]);
        let grad_x = w.transposed().unwrap().matvec(&v).unwrap();
        let step = bridge_fc_step(&w, &grad_x).unwrap();
        let diff = step.grad.sub(&v).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn fc_step_zero_gradient_gives_zero() {
        let w = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        let step = bridge_fc_step(&w, &Tensor::zeros(vec![4])).unwrap();
        assert!(step.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_step_flags_singular_gram() {
        // duplicate rows make W Wᵀ rank deficient
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let step = bridge_fc_step(&w, &Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        assert!(step.ill_conditioned);
        assert!(step.grad.is_finite());
    }

    #[test]
    fn fc_step_rejects_expanding_weight() {
        let w = Tensor::matrix(4, 2, vec![0.1; 8]).unwrap();
        assert!(bridge_fc_step(&w, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn bridge_to_logits_single_sample_oracle() {
        let (model, batch) = single_sample_setup(41);
        let share = client_step(&model, &batch, 1).unwrap();
        let trace = forward(&model, &batch.inputs).unwrap();
        let pass = backward(&model, &trace, &batch.labels).unwrap();

        let a_true = trace.samples[0].stack_activation(1).clone();
        let grad_a =
            bridge_first_stack(&share, model.stack_weight(1).unwrap(), &a_true).unwrap();
        let w2 = model.stack_weight(2).unwrap();
        let w3 = model.stack_weight(3).unwrap();
        let step = bridge_to_logits(&[w2, w3], &grad_a).unwrap();

        let truth = &pass.logit_grads[0];
        for (got, want) in step.grad.data().iter().zip(truth.data()) {
            let scale = want.abs().max(1e-12);
            assert!(
                (got - want).abs() / scale < 1e-6,
                "bridged {got} vs true {want}"
            );
        }
    }

    #[test]
    fn bridge_is_linear_in_the_share() {
        let (model, batch) = single_sample_setup(43);
        let share = client_step(&model, &batch, 1).unwrap();
        let w1 = model.stack_weight(1).unwrap();
        let w2 = model.stack_weight(2).unwrap();
        let w3 = model.stack_weight(3).unwrap();
        let a_tilde = Tensor::vector(vec![0.7, 0.3, 0.9, 0.2, 0.5]);

        let mut share_b = share.clone();
        share_b.grad = share.grad.scale(-0.5);
        let mut combined = share.clone();
        combined.grad = share.grad.scale(2.0).add(&share_b.grad.scale(3.0)).unwrap();

        let run = |s: &GradientShare| {
            let grad_a = bridge_first_stack(s, w1, &a_tilde).unwrap();
            bridge_to_logits(&[w2, w3], &grad_a).unwrap().grad
        };
        let lhs = run(&combined);
        let rhs = run(&share).scale(2.0).add(&run(&share_b).scale(3.0)).unwrap();
        let diff = lhs.sub(&rhs).unwrap();
        assert!(diff.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn recover_labels_inverts_single_sample() {
        let p = Tensor::vector(vec![0.2, 0.5, 0.3]);
        let grad = Tensor::vector(vec![0.2, 0.5 - 1.0, 0.3]);
        let counts = recover_labels(&p, &grad, 1).unwrap();
        assert_eq!(counts.counts, vec![0, 1, 0]);
        assert!((counts.raw.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recover_labels_degenerate_zero_raw() {
        let p = Tensor::vector(vec![0.25; 4]);
        let counts = recover_labels(&p, &p, 4).unwrap();
        assert!(counts.raw.data().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(counts.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn recover_labels_rejects_length_mismatch() {
        let p = Tensor::vector(vec![0.5, 0.5]);
        let g = Tensor::vector(vec![0.0, 0.0, 0.0]);
        assert!(recover_labels(&p, &g, 2).is_err());
    }

    #[test]
    fn round_counts_examples() {
        assert_eq!(round_counts(&[1.0, 3.0], 4), vec![1, 3]);
        assert_eq!(round_counts(&[-0.4, 4.4], 4), vec![0, 4]);
        assert_eq!(round_counts(&[1.6, 1.6, 0.8], 4), vec![2, 1, 1]);
        assert_eq!(round_counts(&[2.3, 1.2, 0.5, 0.0], 4), vec![2, 1, 1, 0]);
    }

    #[test]
    fn round_counts_removes_from_smallest_residual() {
        // floors sum to 5 > 4, the 0.2-residual class loses the unit
        assert_eq!(round_counts(&[3.2, 2.5], 4), vec![2, 2]);
    }

    proptest! {
        #[test]
        fn round_counts_always_sums_to_batch(
            raw in proptest::collection::vec(-3.0f64..8.0, 1..12),
            batch in 1usize..40,
        ) {
            let counts = round_counts(&raw, batch);
            prop_assert_eq!(counts.iter().sum::<usize>(), batch);
        }

        #[test]
        fn round_counts_is_identity_on_exact_vectors(
            counts in proptest::collection::vec(0usize..9, 1..10),
        ) {
            let batch: usize = counts.iter().sum();
            prop_assume!(batch >= 1);
            let raw: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            prop_assert_eq!(round_counts(&raw, batch), counts);
        }
    }

    #[test]
    fn exactness_for_identical_batch_with_true_estimates() {
        let model = mlp_model(6, &[5, 4], 3, 47);
        let x = positive_sample(6, 48);
        let batch = Batch {
            inputs: vec![x.clone(); 8],
            labels: vec![2; 8],
            true_counts: vec![0, 0, 8],
        };
        let share = client_step(&model, &batch, 1).unwrap();
        let trace = forward(&model, &[x]).unwrap();
        let estimates = AuxEstimates::new(
            trace.samples[0].stack_activation(1).clone(),
            trace.samples[0].probs.clone(),
            EstimateSource::Auxiliary { sample_count: 1 },
        )
        .unwrap();
        let outcome = run_attack(&model, &share, &estimates).unwrap();
        assert_eq!(outcome.labels.counts, vec![0, 0, 8]);
        assert!(!outcome.ill_conditioned);
        // conservation: raw counts sum to B when the bridge is exact
        assert!((outcome.labels.raw.sum() - 8.0).abs() < 1e-6);
    }
}
