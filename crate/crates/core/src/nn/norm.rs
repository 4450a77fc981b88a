use ndarray::{Array4, Axis};

use super::{join, Module, Param};

const EPS: f64 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over (N, H, W).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    training: bool,
    cache: Option<(Array4<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; channels], vec![channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: Param::buffer(vec![0.0; channels], vec![channels]),
            running_var: Param::buffer(vec![1.0; channels], vec![channels]),
            training: true,
            cache: None,
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "batch norm channels");
        let count = n * h * w;
        let mut out = x.to_owned();
        if !self.training {
            for (ch, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
                let inv = 1.0 / (self.running_var.value[ch] as f64 + EPS).sqrt();
                let (mean, g, b) = (
                    self.running_mean.value[ch] as f64,
                    self.gamma.value[ch] as f64,
                    self.beta.value[ch] as f64,
                );
                plane.mapv_inplace(|v| ((v as f64 - mean) * inv * g + b) as f32);
            }
            return out;
        }

        let mut xhat = Array4::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(c);
        for (ch, (mut plane, mut xh)) in out
            .axis_iter_mut(Axis(1))
            .zip(xhat.axis_iter_mut(Axis(1)))
            .enumerate()
        {
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / count as f64;
            let var = plane
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            let (g, b) = (self.gamma.value[ch] as f64, self.beta.value[ch] as f64);
            xh.zip_mut_with(&plane, |xh, &v| *xh = ((v as f64 - mean) * inv) as f32);
            plane.zip_mut_with(&xh, |o, &xh| *o = (xh as f64 * g + b) as f32);
            inv_std.push(inv as f32);

            let unbiased = if count > 1 {
                var * count as f64 / (count - 1) as f64
            } else {
                var
            };
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (xhat, inv_std) = self
            .cache
            .as_ref()
            .expect("batch norm backward without training forward");
        let (n, _, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        for (ch, ((mut dxc, dyc), xh)) in dx
            .axis_iter_mut(Axis(1))
            .zip(dy.axis_iter(Axis(1)))
            .zip(xhat.axis_iter(Axis(1)))
            .enumerate()
        {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for (&d, &x) in dyc.iter().zip(xh.iter()) {
                sum_dy += d as f64;
                sum_dy_xhat += d as f64 * x as f64;
            }
            self.beta.grad[ch] += sum_dy as f32;
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            let g = self.gamma.value[ch] as f64;
            let scale = g * inv_std[ch] as f64 / count;
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| {
                    *o = (scale * (count * d as f64 - sum_dy - x as f64 * sum_dy_xhat)) as f32;
                });
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
