use super::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub type Params64 = BTreeMap<String, Tensor<f64>>;

/// Compare analytic gradients against central finite differences on a
/// random sample of coordinates per parameter tensor.
///
/// `loss_and_grad` evaluates the scalar objective and its gradients at the
/// given parameters; perturbation evaluations reuse the same closure and
/// ignore the gradient part. Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss_and_grad: F,
    params: &Params64,
    h: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> f64
where
    F: Fn(&Params64) -> (f64, Params64),
{
    let (_, grads) = loss_and_grad(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (name, base) in params {
        let Some(analytic) = grads.get(name) else { continue };
        let n = base.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > samples_per_tensor {
            // Partial Fisher-Yates: first `samples_per_tensor` entries.
            for i in 0..samples_per_tensor {
                let j = rng.random_range(i..n);
                coords.swap(i, j);
            }
            coords.truncate(samples_per_tensor);
        }
        for &ci in &coords {
            let mut shifted = params.clone();
            let orig = base.data()[ci];
            shifted.get_mut(name).unwrap().data_mut()[ci] = orig + h;
            let (lp, _) = loss_and_grad(&shifted);
            shifted.get_mut(name).unwrap().data_mut()[ci] = orig - h;
            let (lm, _) = loss_and_grad(&shifted);
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
