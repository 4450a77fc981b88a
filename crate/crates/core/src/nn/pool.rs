use ndarray::Array4;

use crate::error::{Error, Result};

/// Argmax positions of a 2x2/stride-2 max pool, as flat offsets into each
/// input (H, W) plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub indices: Array4<u32>,
    pub input_hw: (usize, usize),
}

/// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
/// row-major window order.
pub fn max_pool2x2(x: &Array4<f32>) -> Result<(Array4<f32>, PoolIndices)> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeError(format!(
            "max pool needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut indices = Array4::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0u32;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                        let v = x[[b, ch, iy, ix]];
                        if v > best || (dy, dx) == (0, 0) {
                            best = v;
                            arg = (iy * w + ix) as u32;
                        }
                    }
                    out[[b, ch, y, xx]] = best;
                    indices[[b, ch, y, xx]] = arg;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            indices,
            input_hw: (h, w),
        },
    ))
}

/// Routes the pooled-output gradient back to the argmax positions.
pub fn max_pool2x2_backward(dy: &Array4<f32>, idx: &PoolIndices) -> Array4<f32> {
    max_unpool2x2(dy, idx).expect("gradient matches pooled shape")
}

/// Places each value at its recorded argmax position; zeros elsewhere.
pub fn max_unpool2x2(x: &Array4<f32>, idx: &PoolIndices) -> Result<Array4<f32>> {
    if x.dim() != idx.indices.dim() {
        return Err(Error::ShapeError(format!(
            "unpool input {:?} does not match pool indices {:?}",
            x.dim(),
            idx.indices.dim()
        )));
    }
    let (n, c, _, _) = x.dim();
    let (h, w) = idx.input_hw;
    let mut out = Array4::zeros((n, c, h, w));
    for ((b, ch, y, xx), &v) in x.indexed_iter() {
        let flat = idx.indices[[b, ch, y, xx]] as usize;
        out[[b, ch, flat / w, flat % w]] = v;
    }
    Ok(out)
}

/// Gathers the unpooled-output gradient at the argmax positions.
pub fn max_unpool2x2_backward(dy: &Array4<f32>, idx: &PoolIndices) -> Array4<f32> {
    let w = idx.input_hw.1;
    Array4::from_shape_fn(idx.indices.raw_dim(), |(b, ch, y, xx)| {
        let flat = idx.indices[[b, ch, y, xx]] as usize;
        dy[[b, ch, flat / w, flat % w]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn pool_and_unpool_small() {
        let plane = arr2(&[
            [1.0f32, 2.0, 0.0, 0.0],
            [4.0, 3.0, 0.0, 5.0],
            [0.0, 0.0, 7.0, 7.0],
            [9.0, 0.0, 7.0, 7.0],
        ]);
        let x = plane.into_shape_with_order((1, 1, 4, 4)).unwrap();
        let (y, idx) = max_pool2x2(&x).unwrap();
        assert_eq!(
            y.iter().copied().collect::<Vec<_>>(),
            vec![4.0, 5.0, 9.0, 7.0]
        );
        assert_eq!(
            idx.indices.iter().copied().collect::<Vec<_>>(),
            vec![4, 7, 12, 10]
        );
        let u = max_unpool2x2(&y, &idx).unwrap();
        assert_eq!(u[[0, 0, 1, 0]], 4.0);
        assert_eq!(u[[0, 0, 2, 2]], 7.0);
        assert_eq!(u.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn odd_input_rejected() {
        assert!(max_pool2x2(&Array4::zeros((1, 1, 3, 4))).is_err());
    }

    #[test]
    fn unpool_backward_is_gather() {
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, y, x)| (c * 16 + y * 4 + x) as f32);
        let (y, idx) = max_pool2x2(&x).unwrap();
        let up = max_unpool2x2(&y, &idx).unwrap();
        assert_eq!(max_unpool2x2_backward(&up, &idx), y);
    }
}
