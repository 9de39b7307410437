//! Finite-difference verification of the analytic gradients.

use super::layers::Network;
use super::loss::softmax_cross_entropy;
use super::tensor::Tensor;
use super::NnError;

pub const DEFAULT_EPSILON: f64 = 1e-5;

fn loss_of(net: &Network<f64>, x: &Tensor<f64>, label: usize) -> Result<f64, NnError> {
    let logits = net.forward(x)?;
    Ok(softmax_cross_entropy(&logits, label)?.0)
}

/// Max relative error between analytic parameter gradients and central finite
/// differences of the cross-entropy loss, over every parameter. Relative
/// error uses the `max(1e-8, |a| + |b|)` denominator so near-zero gradients
/// do not blow up the ratio. Only meaningful in 64-bit mode.
pub fn grad_check(
    net: &Network<f64>,
    x: &Tensor<f64>,
    label: usize,
    epsilon: f64,
) -> Result<f64, NnError> {
    let trace = net.trace(x)?;
    let (_, dl) = softmax_cross_entropy(trace.last().unwrap(), label)?;
    let mut grads = net.zeros_like();
    net.backward(&trace, &dl, &mut grads)?;
    let analytic = grads.flat_params();

    let base = net.flat_params();
    let mut work = net.clone();
    let mut probe = base.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        probe[i] = base[i] + epsilon;
        work.set_flat_params(&probe)?;
        let plus = loss_of(&work, x, label)?;
        probe[i] = base[i] - epsilon;
        work.set_flat_params(&probe)?;
        let minus = loss_of(&work, x, label)?;
        probe[i] = base[i];

        let fd = (plus - minus) / (2.0 * epsilon);
        let err = (fd - analytic[i]).abs() / 1e-8f64.max(fd.abs() + analytic[i].abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
