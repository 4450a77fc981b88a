use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use super::{join, Module, Param};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        self.mask = Some(x.mapv(|v| v > 0.0));
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let mask = self.mask.as_ref().expect("relu backward without forward");
        let mut dx = dy.to_owned();
        dx.zip_mut_with(mask, |d, &m| {
            if !m {
                *d = 0.0
            }
        });
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu {
    slope: f32,
    positive: Option<Array4<bool>>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        LeakyRelu {
            slope,
            positive: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        self.positive = Some(x.mapv(|v| v > 0.0));
        let a = self.slope;
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let pos = self
            .positive
            .as_ref()
            .expect("leaky relu backward without forward");
        let a = self.slope;
        let mut dx = dy.to_owned();
        dx.zip_mut_with(pos, |d, &p| {
            if !p {
                *d *= a
            }
        });
        dx
    }
}

/// Fully connected layer on (N, in) rows.
#[derive(Clone, Debug)]
pub struct Linear {
    /// (out, in)
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Linear {
            weight: Param::uniform(vec![outputs, inputs], bound, rng),
            bias: Param::zeros(vec![outputs]),
            input: None,
        }
    }

    fn weight_matrix(&self) -> Array2<f32> {
        Array2::from_shape_vec(
            (self.weight.shape[0], self.weight.shape[1]),
            self.weight.value.clone(),
        )
        .expect("linear weight shape")
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight_matrix().t());
        for mut row in y.rows_mut() {
            row.iter_mut()
                .zip(&self.bias.value)
                .for_each(|(v, b)| *v += b);
        }
        self.input = Some(x.to_owned());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self
            .input
            .as_ref()
            .expect("linear backward without forward");
        let dw = dy.t().dot(x);
        self.weight
            .grad
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, d)| *g += d);
        for row in dy.rows() {
            self.bias
                .grad
                .iter_mut()
                .zip(row.iter())
                .for_each(|(g, d)| *g += d);
        }
        dy.dot(&self.weight_matrix())
    }
}

impl Module for Linear {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Mean over (H, W), giving (N, C).
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let (_, _, h, w) = x.dim();
        self.hw = Some((h, w));
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f32
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.hw.expect("pool backward without forward");
        let (n, c) = dy.dim();
        let scale = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] * scale)
    }
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("concat operands share batch and spatial size")
        .as_standard_layout()
        .into_owned()
}

/// Inverse of [`concat_channels`] for gradients: splits after `first` channels.
pub fn split_channels(x: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = Array2::from_shape_vec((2, 3), vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.4]).unwrap();
        lin.forward(&x);
        let dy = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let dx = lin.backward(&dy);
        // dx[0] = row 0 of W, dx[1] = 2 * row 1 of W
        assert_eq!(dx[[0, 1]], lin.weight.value[1]);
        assert!((dx[[1, 2]] - 2.0 * lin.weight.value[5]).abs() < 1e-6);
        assert_eq!(lin.bias.grad, vec![1.0, 2.0]);
        assert!((lin.weight.grad[3] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Array4::from_elem((1, 2, 2, 2), 1.0);
        let b = Array4::from_elem((1, 3, 2, 2), 2.0);
        let c = concat_channels(&a, &b);
        assert_eq!(c.dim(), (1, 5, 2, 2));
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn leaky_relu_slope() {
        let mut l = LeakyRelu::new(0.2);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(l.forward(&x).into_raw_vec_and_offset().0, vec![-0.2, 2.0]);
        let g = l.backward(&Array4::ones((1, 1, 1, 2)));
        assert_eq!(g.into_raw_vec_and_offset().0, vec![0.2, 1.0]);
    }
}
