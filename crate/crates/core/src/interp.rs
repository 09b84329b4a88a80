//! Bilinear resampling with corner-aligned grids: output corners land exactly
//! on input corners, so corner values are preserved.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Samples channel `c` of an `H x W x C` tensor at fractional position `(y, x)`.
pub fn bilinear_sample<T: Scalar>(t: &Tensor<T>, y: f64, x: f64, c: usize) -> T {
    let s = t.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::lit(y - y0 as f64);
    let fx = T::lit(x - x0 as f64);
    let at = |i: usize, j: usize| t.data()[(i * w + j) * ch + c];
    let one = T::one();
    let top = at(y0, x0) * (one - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (one - fx) + at(y1, x1) * fx;
    top * (one - fy) + bottom * fy
}

fn source_coord(i: usize, out: usize, input: usize) -> f64 {
    if out <= 1 {
        0.0
    } else {
        i as f64 * (input - 1) as f64 / (out - 1) as f64
    }
}

/// Resizes an `H x W x C` tensor to `height x width`.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = t.dims3()?;
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(dim_err!("cannot resize {:?} to {height}x{width}", t.shape()));
    }
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        let y = source_coord(i, height, h);
        for j in 0..width {
            let x = source_coord(j, width, w);
            for ci in 0..c {
                out.push(bilinear_sample(t, y, x, ci));
            }
        }
    }
    Tensor::new(vec![height, width, c], out)
}
