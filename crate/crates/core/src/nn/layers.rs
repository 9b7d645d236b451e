//! Dense affine map, ReLU, node-axis batch normalization and MSE, each with
//! a hand-derived reverse pass.

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor2D};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// `out = input * weight + bias`, `weight` row-major `F_in x F_out`.
pub fn affine_forward(input: &Tensor2D, weight: &[f64], bias: &[f64]) -> Result<Tensor2D> {
    let (n, f_in) = input.shape();
    let f_out = bias.len();
    if weight.len() != f_in * f_out {
        return Err(invalid(format!(
            "affine weight has {} entries, expected {f_in}x{f_out}",
            weight.len()
        )));
    }
    let mut out = Tensor2D::zeros(n, f_out);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(bias);
    }
    matmul_acc(input.as_slice(), weight, out.as_mut_slice(), n, f_in, f_out);
    Ok(out)
}

pub struct AffineGrads {
    pub input: Tensor2D,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn affine_backward(input: &Tensor2D, weight: &[f64], grad_out: &Tensor2D) -> Result<AffineGrads> {
    let (n, f_in) = input.shape();
    let f_out = grad_out.cols();
    grad_out.ensure_shape(n, f_out, "affine upstream gradient")?;
    if weight.len() != f_in * f_out {
        return Err(invalid("affine weight shape does not match gradient"));
    }
    let mut d_weight = vec![0.0; f_in * f_out];
    matmul_at_b_acc(input.as_slice(), grad_out.as_slice(), &mut d_weight, n, f_in, f_out);
    let mut d_bias = vec![0.0; f_out];
    for r in 0..n {
        for (b, g) in d_bias.iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }
    let mut d_input = Tensor2D::zeros(n, f_in);
    matmul_a_bt_acc(grad_out.as_slice(), weight, d_input.as_mut_slice(), n, f_out, f_in);
    Ok(AffineGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

pub fn relu(input: &Tensor2D) -> Tensor2D {
    let mut out = input.clone();
    for v in out.as_mut_slice() {
        *v = v.max(0.0);
    }
    out
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor2D, grad_out: &Tensor2D) -> Result<Tensor2D> {
    grad_out.ensure_shape(input.rows(), input.cols(), "relu upstream gradient")?;
    let data = input
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2D::new(input.rows(), input.cols(), data)
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Intermediates kept by [`batch_norm`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mode: Mode,
    pub x_hat: Tensor2D,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean and population variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalizes each channel over the node rows.
///
/// Train mode uses the population statistics of `input` and leaves `state`
/// untouched; the caller applies [`BatchNormState::update`] with the cached
/// batch statistics. Eval mode reads the running statistics only.
pub fn batch_norm(
    input: &Tensor2D,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Tensor2D, BatchNormCache)> {
    let (n, f) = input.shape();
    if gamma.len() != f || beta.len() != f || state.channels() != f {
        return Err(invalid(format!(
            "batch norm over {f} channels got mismatched parameters"
        )));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(invalid(format!(
                    "batch norm in train mode needs at least 2 rows, got {n}"
                )));
            }
            let mut mean = vec![0.0; f];
            for r in 0..n {
                for (m, x) in mean.iter_mut().zip(input.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; f];
            for r in 0..n {
                for ((v, x), m) in var.iter_mut().zip(input.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut x_hat = Tensor2D::zeros(n, f);
    let mut out = Tensor2D::zeros(n, f);
    for r in 0..n {
        let x = input.row(r);
        let xh = x_hat.row_mut(r);
        for c in 0..f {
            xh[c] = (x[c] - mean[c]) * inv_std[c];
        }
        let o = out.row_mut(r);
        let xh = x_hat.row(r);
        for c in 0..f {
            o[c] = gamma[c] * xh[c] + beta[c];
        }
    }
    let (batch_mean, batch_var) = match mode {
        Mode::Train => (mean, var),
        Mode::Eval => (Vec::new(), Vec::new()),
    };
    Ok((
        out,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor2D,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batch_norm_backward(cache: &BatchNormCache, gamma: &[f64], grad_out: &Tensor2D) -> Result<BatchNormGrads> {
    let (n, f) = cache.x_hat.shape();
    grad_out.ensure_shape(n, f, "batch norm upstream gradient")?;
    let mut d_gamma = vec![0.0; f];
    let mut d_beta = vec![0.0; f];
    for r in 0..n {
        let g = grad_out.row(r);
        let xh = cache.x_hat.row(r);
        for c in 0..f {
            d_gamma[c] += g[c] * xh[c];
            d_beta[c] += g[c];
        }
    }
    let mut d_input = Tensor2D::zeros(n, f);
    match cache.mode {
        Mode::Train => {
            // dx = gamma * inv_std / N * (N dy - sum(dy) - x_hat * sum(dy * x_hat))
            let nf = n as f64;
            for r in 0..n {
                let g = grad_out.row(r);
                let xh = cache.x_hat.row(r);
                let d = d_input.row_mut(r);
                for c in 0..f {
                    d[c] = gamma[c] * cache.inv_std[c] / nf * (nf * g[c] - d_beta[c] - xh[c] * d_gamma[c]);
                }
            }
        }
        Mode::Eval => {
            for r in 0..n {
                let g = grad_out.row(r);
                let d = d_input.row_mut(r);
                for c in 0..f {
                    d[c] = g[c] * gamma[c] * cache.inv_std[c];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    })
}

/// Mean over all entries of `(pred - target)^2` and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor2D, target: &Tensor2D) -> Result<(f64, Tensor2D)> {
    target.ensure_shape(pred.rows(), pred.cols(), "mse target")?;
    let count = pred.as_slice().len().max(1) as f64;
    let mut grad = Tensor2D::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let diff = p - t;
        sum += diff * diff;
        *g = 2.0 * diff / count;
    }
    Ok((sum / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_function;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
        Tensor2D::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let x = Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = affine_forward(&x, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);

        let x = Tensor2D::from_rows(&[[1.0, 1.0]]).unwrap();
        let out = affine_forward(&x, &[2.0, 3.0], &[1.0]).unwrap();
        assert_eq!(out.as_slice(), &[6.0]);

        let zero = Tensor2D::zeros(3, 2);
        let out = affine_forward(&zero, &[5.0, -1.0, 2.0, 7.0], &[0.25, -0.5]).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, -0.5]);
        }
        assert!(affine_forward(&zero, &[1.0; 3], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, 4, 3);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = random_tensor(&mut rng, 4, 2);
        // loss = sum(out * r) so the upstream gradient is r
        let loss = |x: &Tensor2D, w: &[f64], b: &[f64]| -> f64 {
            let out = affine_forward(x, w, b).unwrap();
            out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
        };
        let grads = affine_backward(&x, &w, &r).unwrap();

        let mut wv = w.clone();
        let err = check_function(&mut wv, &grads.weight, |w| loss(&x, w, &b), 1e-6, None, 0);
        assert!(err.max_rel_error <= 1e-7, "{err:?}");
        let mut bv = b.clone();
        let err = check_function(&mut bv, &grads.bias, |b| loss(&x, &w, b), 1e-6, None, 0);
        assert!(err.max_rel_error <= 1e-7, "{err:?}");
        let mut xv = x.as_slice().to_vec();
        let err = check_function(
            &mut xv,
            grads.input.as_slice(),
            |xs| loss(&Tensor2D::new(4, 3, xs.to_vec()).unwrap(), &w, &b),
            1e-6,
            None,
            0,
        );
        assert!(err.max_rel_error <= 1e-7, "{err:?}");
    }

    #[test]
    fn relu_examples() {
        let x = Tensor2D::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let pos = Tensor2D::from_rows(&[[0.5, 3.0]]).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&x, &Tensor2D::from_rows(&[[1.0, 1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs: Vec<f64> = (0..20)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let r: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor2D::new(4, 5, xs.clone()).unwrap();
        let analytic = relu_backward(&x, &Tensor2D::new(4, 5, r.clone()).unwrap()).unwrap();
        let report = check_function(
            &mut xs,
            analytic.as_slice(),
            |v| {
                let out = relu(&Tensor2D::new(4, 5, v.to_vec()).unwrap());
                out.as_slice().iter().zip(&r).map(|(a, b)| a * b).sum()
            },
            1e-6,
            None,
            0,
        );
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn batch_norm_examples() {
        let state = BatchNormState::new(1);
        let x = Tensor2D::from_rows(&[[1.0], [3.0]]).unwrap();
        let (out, cache) = batch_norm(&x, &[1.0], &[0.0], &state, Mode::Train).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-5 && (out.get(1, 0) - 1.0).abs() < 1e-5);
        assert_eq!(cache.batch_mean, vec![2.0]);
        assert_eq!(cache.batch_var, vec![1.0]);

        let mut state = BatchNormState::new(1);
        state.running_mean = vec![2.0];
        state.running_var = vec![1.0];
        let (out, _) = batch_norm(
            &Tensor2D::from_rows(&[[2.0]]).unwrap(),
            &[3.0],
            &[0.5],
            &state,
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(out.as_slice(), &[0.5]);

        let constant = Tensor2D::from_rows(&[[4.0], [4.0], [4.0]]).unwrap();
        let (out, _) = batch_norm(&constant, &[1.0], &[0.0], &BatchNormState::new(1), Mode::Train).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);

        let single = Tensor2D::from_rows(&[[1.0]]).unwrap();
        assert!(batch_norm(&single, &[1.0], &[0.0], &BatchNormState::new(1), Mode::Train).is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut state = BatchNormState::new(1);
        state.update(&[2.0], &[3.0]);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 17, 4);
        let state = BatchNormState {
            eps: 0.0,
            ..BatchNormState::new(4)
        };
        let (_, cache) = batch_norm(&x, &[1.0; 4], &[0.0; 4], &state, Mode::Train).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..17).map(|r| cache.x_hat.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 17.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 6, 3);
        let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = random_tensor(&mut rng, 6, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let mut state = BatchNormState::new(3);
            state.running_mean = vec![0.1, -0.2, 0.3];
            state.running_var = vec![0.5, 1.5, 2.0];
            let loss = |x: &Tensor2D, g: &[f64], b: &[f64]| -> f64 {
                let (out, _) = batch_norm(x, g, b, &state, mode).unwrap();
                out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = batch_norm(&x, &gamma, &beta, &state, mode).unwrap();
            let grads = batch_norm_backward(&cache, &gamma, &r).unwrap();

            let mut xs = x.as_slice().to_vec();
            let rep = check_function(
                &mut xs,
                grads.input.as_slice(),
                |v| loss(&Tensor2D::new(6, 3, v.to_vec()).unwrap(), &gamma, &beta),
                1e-6,
                None,
                0,
            );
            assert!(rep.max_rel_error <= 1e-6, "{mode:?} input {rep:?}");
            let mut g = gamma.clone();
            let rep = check_function(&mut g, &grads.gamma, |g| loss(&x, g, &beta), 1e-6, None, 0);
            assert!(rep.max_rel_error <= 1e-6, "{mode:?} gamma {rep:?}");
            let mut b = beta.clone();
            let rep = check_function(&mut b, &grads.beta, |b| loss(&x, &gamma, b), 1e-6, None, 0);
            assert!(rep.max_rel_error <= 1e-6, "{mode:?} beta {rep:?}");
        }
    }

    #[test]
    fn mse_examples() {
        let a = Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let t = Tensor2D::from_rows(&[[1.0, 4.0]]).unwrap();
        let (loss, grad) = mse_loss(&a, &t).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grad.as_slice(), &[0.0, -2.0]);
        assert!(mse_loss(&a, &Tensor2D::zeros(2, 1)).is_err());
    }
}
