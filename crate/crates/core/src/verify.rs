//! Runnable identity suite: every gradient identity, inversion rule and
//! recovery guarantee checked numerically on freshly drawn instances.
//!
//! `gdbr verify` prints one line per check; the acceptance tests call the
//! same functions. Oracles here are independent of the code paths they
//! check: identities are evaluated from their definitions and derivatives
//! are compared against central finite differences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attack::{bridge_fc_step, run_attack, AuxEstimates, EstimateSource};
use crate::flsim::{client_step, Batch};
use crate::model::{backward, build_model, forward, BottomStackSpec, InitScheme, Model};
use crate::nn;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_max_error(name: &'static str, instances: usize, max_error: f64, bound: f64) -> Self {
        CheckOutcome {
            name,
            passed: max_error <= bound,
            detail: format!("{instances} instances, max error {max_error:.3e} (bound {bound:.0e})"),
        }
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst element error relative to the reference vector's largest magnitude.
fn vector_relative_error(got: &Tensor, want: &Tensor) -> f64 {
    let scale = want
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    max_abs_diff(got, want) / scale
}

const IDENTITY_INSTANCES: usize = 120;
const IDENTITY_BOUND: f64 = 1e-9;
const STACK_BOUND: f64 = 1e-6;
const FD_BOUND: f64 = 1e-5;
const FD_STEP: f64 = 1e-4;

/// Lemma-style FC identities: grad_x xᵀ = Wᵀ grad_W, grad_z zᵀ = grad_W Wᵀ,
/// grad_z ⊙ z = diag(grad_W Wᵀ).
pub fn check_fc_gradient_identities(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let mut max_input = 0.0_f64;
    let mut max_output = 0.0_f64;
    let mut max_diag = 0.0_f64;
    for _ in 0..IDENTITY_INSTANCES {
        let w = random_tensor(vec![4, 6], &mut r);
        let x = random_tensor(vec![6], &mut r);
        let gz = random_tensor(vec![4], &mut r);
        let z = nn::fc_forward(&w, &x).unwrap();
        let (gw, gx) = nn::fc_backward(&w, &x, &gz).unwrap();

        let lhs = Tensor::outer(&gx, &x);
        let rhs = w.transposed().unwrap().matmul(&gw).unwrap();
        max_input = max_input.max(max_abs_diff(&lhs, &rhs));

        let lhs = Tensor::outer(&gz, &z);
        let rhs = gw.matmul(&w.transposed().unwrap()).unwrap();
        max_output = max_output.max(max_abs_diff(&lhs, &rhs));

        let lhs = gz.mul_elem(&z).unwrap();
        let rhs = gw
            .matmul(&w.transposed().unwrap())
            .unwrap()
            .diagonal()
            .unwrap();
        max_diag = max_diag.max(max_abs_diff(&lhs, &rhs));
    }
    vec![
        CheckOutcome::from_max_error(
            "fc identity: grad_x xT = WT grad_W",
            IDENTITY_INSTANCES,
            max_input,
            IDENTITY_BOUND,
        ),
        CheckOutcome::from_max_error(
            "fc identity: grad_z zT = grad_W WT",
            IDENTITY_INSTANCES,
            max_output,
            IDENTITY_BOUND,
        ),
        CheckOutcome::from_max_error(
            "fc identity: grad_z * z = diag(grad_W WT)",
            IDENTITY_INSTANCES,
            max_diag,
            IDENTITY_BOUND,
        ),
    ]
}

/// Gram inversion: (W Wᵀ)⁻¹ W grad_x recovers grad_z exactly.
pub fn check_gram_inversion(seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut max_error = 0.0_f64;
    let mut used = 0;
    for _ in 0..IDENTITY_INSTANCES {
        let w = random_tensor(vec![4, 7], &mut r);
        let gz = random_tensor(vec![4], &mut r);
        let gx = w.transposed().unwrap().matvec(&gz).unwrap();
        let step = bridge_fc_step(&w, &gx).unwrap();
        if step.ill_conditioned {
            continue;
        }
        used += 1;
        max_error = max_error.max(max_abs_diff(&step.grad, &gz));
    }
    CheckOutcome::from_max_error(
        "gram inversion recovers grad_z from grad_x",
        used,
        max_error,
        IDENTITY_BOUND,
    )
}

fn kernel_slice(t: &Tensor, kernel: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::vector(t.data()[kernel * per..(kernel + 1) * per].to_vec())
}

/// Conv identity: per kernel, ⟨grad_W_k, W_k⟩_F = ⟨grad_Z_k, Z_k⟩_F, which is
/// the plain scalar product for 1x1 outputs.
pub fn check_conv_frobenius_identity(seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut max_error = 0.0_f64;
    for instance in 0..IDENTITY_INSTANCES {
        // alternate general outputs and the 1x1 special case
        let (k, x) = if instance % 2 == 0 {
            (
                random_tensor(vec![3, 2, 2, 2], &mut r),
                random_tensor(vec![2, 3, 4], &mut r),
            )
        } else {
            (
                random_tensor(vec![3, 2, 2, 2], &mut r),
                random_tensor(vec![2, 2, 2], &mut r),
            )
        };
        let z = nn::conv_forward(&k, &x).unwrap();
        let gz = random_tensor(z.shape().to_vec(), &mut r);
        let gw = nn::conv_backward_weights(&k, &x, &gz).unwrap();
        for kernel in 0..k.shape()[0] {
            let lhs = kernel_slice(&gw, kernel)
                .frobenius(&kernel_slice(&k, kernel))
                .unwrap();
            let rhs = kernel_slice(&gz, kernel)
                .frobenius(&kernel_slice(&z, kernel))
                .unwrap();
            max_error = max_error.max((lhs - rhs).abs());
        }
    }
    CheckOutcome::from_max_error(
        "conv identity: <grad_W_k, W_k>_F = <grad_Z_k, Z_k>_F",
        IDENTITY_INSTANCES,
        max_error,
        IDENTITY_BOUND,
    )
}

/// ReLU identity: grad_z ⊙ z = grad_a ⊙ a, including mixed-sign inputs.
pub fn check_relu_identity(seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut max_error = 0.0_f64;
    for _ in 0..IDENTITY_INSTANCES {
        let z = random_tensor(vec![24], &mut r);
        let ga = random_tensor(vec![24], &mut r);
        let a = nn::relu_forward(&z);
        let gz = nn::relu_backward(&z, &ga).unwrap();
        let lhs = gz.mul_elem(&z).unwrap();
        let rhs = ga.mul_elem(&a).unwrap();
        max_error = max_error.max(max_abs_diff(&lhs, &rhs));
    }
    CheckOutcome::from_max_error(
        "relu identity: grad_z * z = grad_a * a",
        IDENTITY_INSTANCES,
        max_error,
        IDENTITY_BOUND,
    )
}

fn positive_mlp(seed: u64) -> (Model, Tensor) {
    let spec = BottomStackSpec::mlp(10, &[8, 6, 5], 3).unwrap();
    let model = build_model(&[10], &[], &spec, InitScheme::PositiveUniform, seed).unwrap();
    let mut r = rng(seed ^ 0x5EED);
    let x = positive_tensor(vec![10], &mut r);
    (model, x)
}

/// FC-ReLU stack inversion, both routes, against true per-sample gradients
/// on strictly positive activations.
pub fn check_fc_relu_stack_inversion(seed: u64) -> Vec<CheckOutcome> {
    let mut max_forward = 0.0_f64;
    let mut max_weight = 0.0_f64;
    for instance in 0..IDENTITY_INSTANCES as u64 {
        let (model, x) = positive_mlp(seed.wrapping_add(instance));
        let trace = forward(&model, std::slice::from_ref(&x)).unwrap();
        let label = (instance % 3) as usize;
        let pass = backward(&model, &trace, &[label]).unwrap();
        for stack in 1..model.bottom_stack_count() {
            let truth = pass.stack_activation_grad(0, stack);
            let w = model.stack_weight(stack).unwrap();

            // route 1: from the stack's input gradient
            if w.rows() <= w.cols() {
                let step = bridge_fc_step(w, pass.stack_input_grad(0, stack)).unwrap();
                max_forward = max_forward.max(vector_relative_error(&step.grad, truth));
            }

            // route 2: from the stack's weight gradient and activation
            let gw = pass.stack_weight_grad(stack);
            let a = trace.samples[0].stack_activation(stack);
            let mut estimate = vec![0.0; w.rows()];
            for (k, out) in estimate.iter_mut().enumerate() {
                let row = w.cols();
                let dot: f64 = gw.data()[k * row..(k + 1) * row]
                    .iter()
                    .zip(&w.data()[k * row..(k + 1) * row])
                    .map(|(g, wv)| g * wv)
                    .sum();
                *out = dot / a.data()[k];
            }
            max_weight =
                max_weight.max(vector_relative_error(&Tensor::vector(estimate), truth));
        }
    }
    vec![
        CheckOutcome::from_max_error(
            "fc-relu stack: gram route reproduces grad_a",
            IDENTITY_INSTANCES,
            max_forward,
            STACK_BOUND,
        ),
        CheckOutcome::from_max_error(
            "fc-relu stack: weight route reproduces grad_a",
            IDENTITY_INSTANCES,
            max_weight,
            STACK_BOUND,
        ),
    ]
}

/// Conv-ReLU stack inversion (1x1 outputs) against true per-sample gradients.
pub fn check_conv_relu_stack_inversion(seed: u64) -> CheckOutcome {
    let mut max_error = 0.0_f64;
    for instance in 0..IDENTITY_INSTANCES as u64 {
        let spec = BottomStackSpec::conv_first(2, 3, 3, 5, &[4], 3).unwrap();
        let model = build_model(
            &[2, 3, 3],
            &[],
            &spec,
            InitScheme::PositiveUniform,
            seed.wrapping_add(instance),
        )
        .unwrap();
        let mut r = rng(seed.wrapping_add(instance) ^ 0xC0FFEE);
        let x = positive_tensor(vec![2, 3, 3], &mut r);
        let trace = forward(&model, std::slice::from_ref(&x)).unwrap();
        let pass = backward(&model, &trace, &[(instance % 3) as usize]).unwrap();

        let w = model.stack_weight(1).unwrap();
        let gw = pass.stack_weight_grad(1);
        let a = trace.samples[0].stack_activation(1);
        let truth = pass
            .stack_activation_grad(0, 1)
            .reshape(vec![5])
            .unwrap();
        let mut estimate = vec![0.0; 5];
        for (k, out) in estimate.iter_mut().enumerate() {
            let lhs = kernel_slice(gw, k).frobenius(&kernel_slice(w, k)).unwrap();
            *out = lhs / a.data()[k];
        }
        max_error = max_error.max(vector_relative_error(&Tensor::vector(estimate), &truth));
    }
    CheckOutcome::from_max_error(
        "conv-relu stack: frobenius route reproduces grad_A",
        IDENTITY_INSTANCES,
        max_error,
        STACK_BOUND,
    )
}

/// Final-classifier inversion against the true per-sample logit gradient.
pub fn check_logit_gradient_inversion(seed: u64) -> CheckOutcome {
    let mut max_error = 0.0_f64;
    let mut used = 0;
    for instance in 0..IDENTITY_INSTANCES as u64 {
        let (model, x) = positive_mlp(seed.wrapping_add(instance));
        let trace = forward(&model, std::slice::from_ref(&x)).unwrap();
        let pass = backward(&model, &trace, &[(instance % 3) as usize]).unwrap();
        let stacks = model.bottom_stack_count();
        let w = model.stack_weight(stacks).unwrap();
        let step = bridge_fc_step(w, pass.stack_input_grad(0, stacks)).unwrap();
        if step.ill_conditioned {
            continue;
        }
        used += 1;
        max_error = max_error.max(vector_relative_error(&step.grad, &pass.logit_grads[0]));
    }
    CheckOutcome::from_max_error(
        "final fc: gram route reproduces grad_z_L",
        used,
        max_error,
        STACK_BOUND,
    )
}

fn fd_max_error(
    dims: usize,
    mut loss: impl FnMut(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
) -> f64 {
    let mut max_error = 0.0_f64;
    for idx in 0..dims {
        let mut plus = point.clone();
        plus.data_mut()[idx] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[idx] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let scale = analytic.data()[idx].abs().max(numeric.abs()).max(1.0);
        max_error = max_error.max((analytic.data()[idx] - numeric).abs() / scale);
    }
    max_error
}

/// Central-difference checks for every analytic derivative in the layer
/// arithmetic (ReLU points are kept away from the kink).
pub fn check_finite_differences(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let instances = 10;

    let mut fc_err = 0.0_f64;
    for _ in 0..instances {
        let w = random_tensor(vec![3, 5], &mut r);
        let x = random_tensor(vec![5], &mut r);
        let c = random_tensor(vec![3], &mut r);
        let (gw, gx) = nn::fc_backward(&w, &x, &c).unwrap();
        let loss_w = |wt: &Tensor| nn::fc_forward(wt, &x).unwrap().frobenius(&c).unwrap();
        let loss_x = |xt: &Tensor| nn::fc_forward(&w, xt).unwrap().frobenius(&c).unwrap();
        fc_err = fc_err.max(fd_max_error(w.len(), loss_w, &w, &gw));
        fc_err = fc_err.max(fd_max_error(x.len(), loss_x, &x, &gx));
    }

    let mut conv_err = 0.0_f64;
    for _ in 0..instances {
        let k = random_tensor(vec![2, 2, 2, 2], &mut r);
        let x = random_tensor(vec![2, 3, 3], &mut r);
        let z = nn::conv_forward(&k, &x).unwrap();
        let c = random_tensor(z.shape().to_vec(), &mut r);
        let gk = nn::conv_backward_weights(&k, &x, &c).unwrap();
        let gx = nn::conv_backward_input(&k, x.shape(), &c).unwrap();
        let loss_k = |kt: &Tensor| nn::conv_forward(kt, &x).unwrap().frobenius(&c).unwrap();
        let loss_x = |xt: &Tensor| nn::conv_forward(&k, xt).unwrap().frobenius(&c).unwrap();
        conv_err = conv_err.max(fd_max_error(k.len(), loss_k, &k, &gk));
        conv_err = conv_err.max(fd_max_error(x.len(), loss_x, &x, &gx));
    }

    let mut relu_err = 0.0_f64;
    for _ in 0..instances {
        let mut z = random_tensor(vec![12], &mut r);
        for v in z.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.05;
            }
        }
        let c = random_tensor(vec![12], &mut r);
        let gz = nn::relu_backward(&z, &c).unwrap();
        let loss = |zt: &Tensor| nn::relu_forward(zt).frobenius(&c).unwrap();
        relu_err = relu_err.max(fd_max_error(z.len(), loss, &z, &gz));
    }

    let mut ce_err = 0.0_f64;
    for instance in 0..instances {
        let z = random_tensor(vec![6], &mut r);
        let y = instance % 6;
        let (_, p) = nn::softmax_cross_entropy(&z, y).unwrap();
        let g = nn::ce_logit_gradient(&p, y).unwrap();
        let loss = |zt: &Tensor| nn::softmax_cross_entropy(zt, y).unwrap().0;
        ce_err = ce_err.max(fd_max_error(z.len(), loss, &z, &g));
    }

    vec![
        CheckOutcome::from_max_error("finite differences: fc", instances, fc_err, FD_BOUND),
        CheckOutcome::from_max_error("finite differences: conv", instances, conv_err, FD_BOUND),
        CheckOutcome::from_max_error("finite differences: relu", instances, relu_err, FD_BOUND),
        CheckOutcome::from_max_error(
            "finite differences: cross-entropy",
            instances,
            ce_err,
            FD_BOUND,
        ),
    ]
}

// widths shrink fast enough that every inverted Gram stays well-conditioned
fn depth_hidden_widths(depth: usize, class_count: usize) -> Vec<usize> {
    let step = 4 + class_count / 4;
    (0..depth - 1)
        .map(|i| class_count + step * (depth - 1 - i))
        .collect()
}

/// Exact single-sample recovery with true activation estimates, over bottom
/// depths 2..=6. Returns (checked cases, failures, conservation error).
pub fn single_sample_recovery_sweep(
    seed: u64,
    class_counts: &[usize],
) -> (usize, usize, f64) {
    let mut cases = 0;
    let mut failures = 0;
    let mut conservation = 0.0_f64;
    for &class_count in class_counts {
        for depth in 2..=6 {
            let hidden = depth_hidden_widths(depth, class_count);
            let input_dim = hidden[0];
            let spec = BottomStackSpec::mlp(input_dim, &hidden, class_count).unwrap();
            let model_seed = hash_pair(seed, (class_count * 100 + depth) as u64);
            let model =
                build_model(&[input_dim], &[], &spec, InitScheme::PositiveUniform, model_seed)
                    .unwrap();
            let mut r = rng(model_seed ^ 0xF00D);
            let x = positive_tensor(vec![input_dim], &mut r);
            let label = depth % class_count;

            let batch = Batch {
                inputs: vec![x.clone()],
                labels: vec![label],
                true_counts: onehot_counts(class_count, label, 1),
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
            cases += 1;
            if outcome.labels.counts != batch.true_counts {
                failures += 1;
            }
            conservation = conservation.max((outcome.labels.raw.sum() - 1.0).abs());
        }
    }
    (cases, failures, conservation)
}

fn onehot_counts(class_count: usize, class: usize, total: usize) -> Vec<usize> {
    let mut counts = vec![0; class_count];
    counts[class] = total;
    counts
}

fn hash_pair(a: u64, b: u64) -> u64 {
    crate::harness::hash64(&[a, b])
}

/// Exact recovery on an identical-sample batch with matching estimates.
pub fn check_identical_batch_recovery(seed: u64) -> CheckOutcome {
    let mut failures = 0;
    let mut conservation = 0.0_f64;
    let cases = 20;
    for instance in 0..cases as u64 {
        let (model, x) = positive_mlp(seed.wrapping_add(instance));
        let label = (instance % 3) as usize;
        let batch_size = 8;
        let batch = Batch {
            inputs: vec![x.clone(); batch_size],
            labels: vec![label; batch_size],
            true_counts: onehot_counts(3, label, batch_size),
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
        if outcome.labels.counts != batch.true_counts {
            failures += 1;
        }
        conservation = conservation.max((outcome.labels.raw.sum() - batch_size as f64).abs());
    }
    CheckOutcome {
        name: "identical-sample batch recovers exact counts",
        passed: failures == 0 && conservation <= 1e-6,
        detail: format!(
            "{cases} cases, {failures} failures, max |sum(raw) - B| = {conservation:.3e}"
        ),
    }
}

/// Runs every check; the `gdbr verify` command prints these.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut outcomes = Vec::new();
    outcomes.extend(check_fc_gradient_identities(hash_pair(seed, 1)));
    outcomes.push(check_gram_inversion(hash_pair(seed, 2)));
    outcomes.push(check_conv_frobenius_identity(hash_pair(seed, 3)));
    outcomes.push(check_relu_identity(hash_pair(seed, 4)));
    outcomes.extend(check_fc_relu_stack_inversion(hash_pair(seed, 5)));
    outcomes.push(check_conv_relu_stack_inversion(hash_pair(seed, 6)));
    outcomes.push(check_logit_gradient_inversion(hash_pair(seed, 7)));
    outcomes.extend(check_finite_differences(hash_pair(seed, 8)));

    let (cases, failures, conservation) =
        single_sample_recovery_sweep(hash_pair(seed, 9), &[2, 10]);
    outcomes.push(CheckOutcome {
        name: "single-sample recovery is exact across depths 2..6",
        passed: failures == 0,
        detail: format!("{cases} cases, {failures} failures"),
    });
    outcomes.push(CheckOutcome {
        name: "recovered raw counts sum to B under the exact bridge",
        passed: conservation <= 1e-6,
        detail: format!("max |sum(raw) - B| = {conservation:.3e}"),
    });
    outcomes.push(check_identical_batch_recovery(hash_pair(seed, 10)));
    outcomes
}
