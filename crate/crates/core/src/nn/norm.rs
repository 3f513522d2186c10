use super::Param;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
struct Cache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

/// Per-channel batch normalization.
///
/// With `frozen` set, training passes normalize with the running statistics
/// and leave them untouched.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub frozen: bool,
    cache: Option<Cache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::filled(vec![channels], 1.0),
            bias: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            frozen: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn running_inv_std(&self) -> Vec<f32> {
        self.running_var
            .iter()
            .map(|v| (1.0 / (*v as f64 + EPS).sqrt()) as f32)
            .collect()
    }

    fn normalize(&self, x: &Tensor, mean: &[f32], inv_std: &[f32]) -> (Tensor, Tensor) {
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                let (m, s) = (mean[c], inv_std[c]);
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                let xh = x_hat.plane_mut(n, c);
                for v in xh.iter_mut() {
                    *v = (*v - m) * s;
                }
                let xh = x_hat.plane(n, c).to_vec();
                for (o, v) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                    *o = g * v + b;
                }
            }
        }
        (x_hat, y)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.channels());
        let inv = self.running_inv_std();
        self.normalize(x, &self.running_mean, &inv).1
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.channels());
        if self.frozen {
            let inv = self.running_inv_std();
            let (x_hat, y) = self.normalize(x, &self.running_mean, &inv);
            self.cache = Some(Cache {
                x_hat,
                inv_std: inv,
                batch_stats: false,
            });
            return y;
        }
        let count = (x.batch() * x.plane_len()) as f64;
        let mut mean = vec![0.0f32; self.channels()];
        let mut inv_std = vec![0.0f32; self.channels()];
        for c in 0..self.channels() {
            let mut s = 0.0f64;
            for n in 0..x.batch() {
                s += x.plane(n, c).iter().map(|v| *v as f64).sum::<f64>();
            }
            let mu = s / count;
            let mut sq = 0.0f64;
            for n in 0..x.batch() {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|v| (*v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            mean[c] = mu as f32;
            inv_std[c] = (1.0 / (var + EPS).sqrt()) as f32;
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mu as f32;
            self.running_var[c] =
                (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * unbiased as f32;
        }
        let (x_hat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            batch_stats: true,
        });
        y
    }

    /// Backward through `relu(bn(x))`; the rectifier mask is recovered from
    /// the cached normalized input so the activation need not be stored.
    pub fn backward_after_relu(&mut self, mut grad_out: Tensor) -> Tensor {
        let cache = self
            .cache
            .as_ref()
            .expect("BatchNorm2d::backward called without forward_train");
        for n in 0..grad_out.batch() {
            for c in 0..self.channels() {
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                let xh = cache.x_hat.plane(n, c);
                for (d, x) in grad_out.plane_mut(n, c).iter_mut().zip(xh) {
                    if g * x + b <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        self.backward(&grad_out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward called without forward_train");
        let x_hat = &cache.x_hat;
        let count = (grad_out.batch() * grad_out.plane_len()) as f64;
        let mut grad_in = grad_out.clone();
        for c in 0..self.channels() {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for n in 0..grad_out.batch() {
                for (dy, xh) in grad_out.plane(n, c).iter().zip(x_hat.plane(n, c)) {
                    sum_dy += *dy as f64;
                    sum_dy_xh += (*dy as f64) * (*xh as f64);
                }
            }
            self.weight.grad[c] += sum_dy_xh as f32;
            self.bias.grad[c] += sum_dy as f32;
            let scale = self.weight.value[c] * cache.inv_std[c];
            let mean_dy = (sum_dy / count) as f32;
            let mean_dy_xh = (sum_dy_xh / count) as f32;
            for n in 0..grad_out.batch() {
                let xh = x_hat.plane(n, c);
                for (g, x) in grad_in.plane_mut(n, c).iter_mut().zip(xh) {
                    *g = if cache.batch_stats {
                        scale * (*g - mean_dy - x * mean_dy_xh)
                    } else {
                        scale * *g
                    };
                }
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}
