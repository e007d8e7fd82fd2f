//! Forward/backward arithmetic for FC, Conv and ReLU layers plus softmax
//! cross-entropy, written as pure functions over [`Tensor`]s.
//!
//! Everything here is exact, framework-free f64 arithmetic so that the
//! gradient identities used by the label-recovery bridge can be checked as
//! numerical identities rather than approximations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// FC forward pass: `z = W x`, with `W` of shape `[N, M]`.
///
/// The input may carry any shape of total length `M`; it is treated as a
/// flat vector (layers have no bias).
pub fn fc_forward(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.ndim() != 2 {
        return Err(Error::Shape(format!(
            "fc weight must be a matrix, got {:?}",
            w.shape()
        )));
    }
    w.matvec(x)
}

/// FC backward pass: `grad_W = grad_z xᵀ` and `grad_x = Wᵀ grad_z`.
///
/// `grad_x` is returned flat with length `M`; callers reshape it to the
/// actual input layout when needed.
pub fn fc_backward(w: &Tensor, x: &Tensor, grad_z: &Tensor) -> Result<(Tensor, Tensor)> {
    if w.ndim() != 2 || w.cols() != x.len() || w.rows() != grad_z.len() {
        return Err(Error::Shape(format!(
            "fc backward shapes do not conform: W {:?}, x {:?}, grad_z {:?}",
            w.shape(),
            x.shape(),
            grad_z.shape()
        )));
    }
    let grad_w = Tensor::outer(grad_z, x);
    let grad_x = w.transposed()?.matvec(grad_z)?;
    Ok((grad_w, grad_x))
}

fn conv_check(k: &Tensor, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if k.ndim() != 4 || x.ndim() != 3 {
        return Err(Error::Shape(format!(
            "conv wants kernel [Cout,Cin,Hk,Wk] and input [Cin,H,W], got {:?} and {:?}",
            k.shape(),
            x.shape()
        )));
    }
    let (cin, hk, wk) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let (xc, hin, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if cin != xc {
        return Err(Error::Shape(format!(
            "conv channel mismatch: kernel Cin {cin}, input {xc}"
        )));
    }
    if hk > hin || wk > win {
        return Err(Error::Shape(format!(
            "conv kernel {hk}x{wk} larger than input {hin}x{win}"
        )));
    }
    Ok((k.shape()[0], cin, hin - hk + 1, win - wk + 1))
}

/// Conv forward pass (stride 1, no padding):
/// `Z[k,i,j] = sum_{c,h,w} K[k,c,h,w] * X[c,i+h,j+w]`.
pub fn conv_forward(k: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (cout, cin, hout, wout) = conv_check(k, x)?;
    let (hk, wk) = (k.shape()[2], k.shape()[3]);
    let mut z = Tensor::zeros(vec![cout, hout, wout]);
    for kk in 0..cout {
        for i in 0..hout {
            for j in 0..wout {
                let mut acc = 0.0;
                for c in 0..cin {
                    for h in 0..hk {
                        for w in 0..wk {
                            acc += k.at4(kk, c, h, w) * x.at3(c, i + h, j + w);
                        }
                    }
                }
                z.data_mut()[(kk * hout + i) * wout + j] = acc;
            }
        }
    }
    Ok(z)
}

/// Conv weight gradient:
/// `grad_K[k,c,h,w] = sum_{i,j} grad_Z[k,i,j] * X[c,i+h,j+w]`.
pub fn conv_backward_weights(k: &Tensor, x: &Tensor, grad_z: &Tensor) -> Result<Tensor> {
    let (cout, cin, hout, wout) = conv_check(k, x)?;
    if grad_z.shape() != [cout, hout, wout] {
        return Err(Error::Shape(format!(
            "conv grad_Z shape {:?} does not match output [{cout}, {hout}, {wout}]",
            grad_z.shape()
        )));
    }
    let (hk, wk) = (k.shape()[2], k.shape()[3]);
    let mut grad_k = Tensor::zeros(vec![cout, cin, hk, wk]);
    for kk in 0..cout {
        for c in 0..cin {
            for h in 0..hk {
                for w in 0..wk {
                    let mut acc = 0.0;
                    for i in 0..hout {
                        for j in 0..wout {
                            acc += grad_z.at3(kk, i, j) * x.at3(c, i + h, j + w);
                        }
                    }
                    grad_k.data_mut()[((kk * cin + c) * hk + h) * wk + w] = acc;
                }
            }
        }
    }
    Ok(grad_k)
}

/// Conv input gradient for chaining through stacked conv layers:
/// `grad_X[c,y,x] = sum_{k,i,j} grad_Z[k,i,j] * K[k,c,y-i,x-j]`
/// over valid kernel offsets.
pub fn conv_backward_input(k: &Tensor, x_shape: &[usize], grad_z: &Tensor) -> Result<Tensor> {
    if k.ndim() != 4 || x_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv input grad wants kernel [Cout,Cin,Hk,Wk] and input shape [Cin,H,W], got {:?} and {x_shape:?}",
            k.shape()
        )));
    }
    let (cout, cin, hk, wk) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (hin, win) = (x_shape[1], x_shape[2]);
    let (hout, wout) = (hin + 1 - hk, win + 1 - wk);
    if grad_z.shape() != [cout, hout, wout] {
        return Err(Error::Shape(format!(
            "conv grad_Z shape {:?} does not match output [{cout}, {hout}, {wout}]",
            grad_z.shape()
        )));
    }
    let mut grad_x = Tensor::zeros(x_shape.to_vec());
    for kk in 0..cout {
        for i in 0..hout {
            for j in 0..wout {
                let g = grad_z.at3(kk, i, j);
                if g == 0.0 {
                    continue;
                }
                for c in 0..cin {
                    for h in 0..hk {
                        for w in 0..wk {
                            grad_x.data_mut()[(c * hin + i + h) * win + j + w] +=
                                g * k.at4(kk, c, h, w);
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// ReLU forward pass: element-wise `max(0, z)`, shape preserved.
pub fn relu_forward(z: &Tensor) -> Tensor {
    let data = z.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(z.shape().to_vec(), data).expect("shape preserved")
}

/// ReLU backward pass: passes the upstream gradient where `z > 0`,
/// zero elsewhere (including at `z == 0`).
pub fn relu_backward(z: &Tensor, grad_a: &Tensor) -> Result<Tensor> {
    if z.shape() != grad_a.shape() {
        return Err(Error::Shape(format!(
            "relu backward shapes differ: {:?} vs {:?}",
            z.shape(),
            grad_a.shape()
        )));
    }
    let data = z
        .data()
        .iter()
        .zip(grad_a.data())
        .map(|(&zv, &gv)| if zv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Softmax with max-shift so large logits cannot overflow.
pub fn softmax(z: &Tensor) -> Tensor {
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy loss against a class index, returning the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy(z: &Tensor, y_index: usize) -> Result<(f64, Tensor)> {
    if y_index >= z.len() {
        return Err(Error::Index(format!(
            "class {y_index} out of range for {} logits",
            z.len()
        )));
    }
    let p = softmax(z);
    let loss = -p.data()[y_index].ln();
    Ok((loss, p))
}

/// Gradient of cross-entropy loss w.r.t. the logits: `p - onehot(y)`.
pub fn ce_logit_gradient(p: &Tensor, y_index: usize) -> Result<Tensor> {
    if y_index >= p.len() {
        return Err(Error::Index(format!(
            "class {y_index} out of range for {} probabilities",
            p.len()
        )));
    }
    let mut g = p.clone();
    g.data_mut()[y_index] -= 1.0;
    Ok(g)
}
