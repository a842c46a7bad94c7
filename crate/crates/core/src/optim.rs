//! Loss and optimizer: categorical cross-entropy over softmax outputs and
//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::layers::{Gradients, NetworkConfig, NetworkParams};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of the true classes:
/// `-(1/n) Σ log(max(p_true, 1e-12))`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check_probs(probs, labels)?;
    let mut total = 0.0;
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        total -= row[label].max(1e-12).ln();
    }
    Ok(total / n as f64)
}

/// Gradient of [`cross_entropy`] with respect to the pre-softmax logits:
/// `(probs - onehot) / n`.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = check_probs(probs, labels)?;
    let mut data = probs.scale(1.0 / n as f64).into_vec();
    for (i, &label) in labels.iter().enumerate() {
        data[i * k + label] -= 1.0 / n as f64;
    }
    Tensor::from_vec(probs.dims(), data)
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.rank() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy needs probs [n,K], got rank {}",
            probs.rank()
        )));
    }
    let (n, k) = (probs.dims()[0], probs.dims()[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dimension(format!("label {bad} out of range 0..{k}")));
    }
    Ok((n, k))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First/second moment estimates and the step counter, one moment pair per
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    /// Completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(cfg: &NetworkConfig) -> Result<AdamState> {
        Ok(AdamState {
            m: Gradients::zeros(cfg)?,
            v: Gradients::zeros(cfg)?,
            t: 0,
        })
    }
}

/// One Adam update, elementwise over every parameter tensor:
///
/// ```text
/// t' = t + 1
/// m' = β1 m + (1-β1) g            v' = β2 v + (1-β2) g²
/// m̂ = m' / (1-β1^t')              v̂ = v' / (1-β2^t')
/// θ' = θ - lr · m̂ / (√v̂ + ε)
/// ```
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let t = state.t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (i, (p, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "adam_step: parameter {:?} vs gradient {:?}",
                p.dims(),
                g.dims()
            )));
        }
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        let pd = p.data_mut();
        let gd = g.data();
        let len = pd.len();
        // plain indexed loop over equal-length slices so the div/sqrt chain
        // vectorizes; the per-element arithmetic is unchanged
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let (c1, c2) = (1.0 - b1, 1.0 - b2);
        let (m, v, gd) = (&mut m[..len], &mut v[..len], &gd[..len]);
        for j in 0..len {
            let gv = gd[j];
            let mv = b1 * m[j] + c1 * gv;
            let vv = b2 * v[j] + c2 * gv * gv;
            m[j] = mv;
            v[j] = vv;
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            pd[j] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_probabilities_give_ln3() {
        let probs = Tensor::new(&[4, 3], 1.0 / 3.0).unwrap();
        let loss = cross_entropy(&probs, &[0, 1, 2, 0]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_is_zero() {
        let probs = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&probs, &[1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let probs = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy(&probs, &[2]).unwrap();
        assert!((loss - (-(1e-12f64.ln()))).abs() < 1e-9);
        assert!(loss.is_finite());
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let probs = Tensor::new(&[2, 3], 1.0 / 3.0).unwrap();
        assert!(cross_entropy(&probs, &[0, 3]).is_err());
        assert!(cross_entropy(&probs, &[0]).is_err());
    }

    #[test]
    fn grad_is_probs_minus_onehot_over_n() {
        let probs = Tensor::from_vec(&[2, 3], vec![0.5, 0.3, 0.2, 0.1, 0.6, 0.3]).unwrap();
        let g = cross_entropy_grad(&probs, &[0, 2]).unwrap();
        let want = [
            (0.5 - 1.0) / 2.0,
            0.3 / 2.0,
            0.2 / 2.0,
            0.1 / 2.0,
            0.6 / 2.0,
            (0.3 - 1.0) / 2.0,
        ];
        for (a, b) in g.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        // rows of the gradient sum to zero
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn grad_matches_finite_differences_through_softmax() {
        use crate::layers::softmax;
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -0.4, 1.1, -0.3, 0.8, 0.05]).unwrap();
        let labels = [2usize, 1];
        let g = cross_entropy_grad(&softmax(&logits).unwrap(), &labels).unwrap();
        let eps = 1e-6;
        for idx in 0..6 {
            let mut lo = logits.data().to_vec();
            let mut hi = lo.clone();
            lo[idx] -= eps;
            hi[idx] += eps;
            let f = |v: Vec<f64>| {
                cross_entropy(
                    &softmax(&Tensor::from_vec(&[2, 3], v).unwrap()).unwrap(),
                    &labels,
                )
                .unwrap()
            };
            let fd = (f(hi) - f(lo)) / (2.0 * eps);
            assert!((fd - g.data()[idx]).abs() < 1e-9);
        }
    }

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            input: 8,
            conv1: 2,
            conv2: 2,
            hidden: 8,
            classes: 3,
            drop_flat: 0.0,
            drop_hidden: 0.0,
        }
    }

    /// Sets every parameter to `p0` and every gradient to `g0`, so each
    /// element follows the same scalar recurrence.
    fn constant_setup(p0: f64, g0: f64) -> (NetworkParams, Gradients) {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = NetworkParams::init(&cfg, &mut rng).unwrap();
        for t in params.tensors_mut() {
            t.data_mut().fill(p0);
        }
        let mut grads = Gradients::zeros(&cfg).unwrap();
        for t in grads.tensors_mut() {
            t.data_mut().fill(g0);
        }
        (params, grads)
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = tiny_cfg();
        let (mut params, grads) = constant_setup(1.0, 1.0);
        let mut state = AdamState::new(&cfg).unwrap();
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        // m'=0.1, v'=0.001, m̂=1, v̂=1, θ' = 1 - 0.001·1/(1+1e-7)
        let want = 1.0 - 0.001 / (1.0 + 1e-7);
        for t in params.tensors() {
            for &v in t.data() {
                assert!((v - want).abs() < 1e-15, "{v} vs {want}");
            }
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn hundred_steps_match_scalar_recurrence() {
        // independent scalar implementation of the same recurrence
        let cfg = tiny_cfg();
        let (mut params, grads) = constant_setup(1.0, 1.0);
        let mut state = AdamState::new(&cfg).unwrap();
        let hyper = AdamHyper::default();

        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100u32 {
            adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= 0.001 * mhat / (vhat.sqrt() + 1e-7);
            let got = params.conv1_k.data()[0];
            assert!(
                (got - theta).abs() <= 1e-12,
                "step {t}: engine {got}, scalar {theta}"
            );
        }
    }

    #[test]
    fn moments_persist_across_steps() {
        let cfg = tiny_cfg();
        let (mut params, grads) = constant_setup(0.0, 0.5);
        let mut state = AdamState::new(&cfg).unwrap();
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        let after_one = params.conv1_k.data()[0];
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        let after_two = params.conv1_k.data()[0];
        // constant gradient keeps pushing the same way
        assert!(after_two < after_one && after_one < 0.0);
        assert_eq!(state.t, 2);
    }
}
