//! Grad-CAM for an embedding network.
//!
//! There is no class score to explain, so the target scalar is the
//! similarity `s = -||f(query) - f(reference)||^2`. The feature maps `A` are
//! the activations entering the global max pool (the output of the last
//! convolution after its relu), taken from the query's pass:
//!
//! ```text
//! alpha_k = mean_{i,j} ds/dA[i,j,k]
//! map     = relu(sum_k alpha_k * A[.,.,k])
//! ```
//!
//! Hot regions are those whose activation increases similarity to the
//! reference.

use crate::data::to_rgb_image;
use crate::error::{dim_err, Error, Result};
use crate::interp::{bilinear_sample, resize_bilinear};
use crate::layer::{apply_all, Layer};
use crate::network::Network;
use crate::ops;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T> {
    /// Raw `H x W` map at the feature-map resolution, non-negative.
    pub map: Tensor<T>,
    /// `map / max(map)`, or all zeros when the raw map is identically zero.
    pub normalized: Tensor<T>,
    pub query_id: String,
    pub neighbor_id: String,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn with_ids(mut self, query_id: impl Into<String>, neighbor_id: impl Into<String>) -> Self {
        self.query_id = query_id.into();
        self.neighbor_id = neighbor_id.into();
        self
    }

    /// Rows of comma-separated raw values.
    pub fn to_csv(&self) -> String {
        let w = self.map.shape()[1];
        self.map
            .data()
            .chunks(w)
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Grad-CAM combination of feature maps `A` (`H x W x K`) and the gradient of
/// the target scalar with respect to them.
pub fn cam_from_gradients<T: Scalar>(activations: &Tensor<T>, grads: &Tensor<T>) -> Result<SaliencyMap<T>> {
    let (h, w, k) = activations.dims3()?;
    if grads.shape() != activations.shape() {
        return Err(dim_err!(
            "gradient shape {:?} does not match feature maps {:?}",
            grads.shape(),
            activations.shape()
        ));
    }
    let area = T::lit((h * w) as f64);
    let mut alpha = vec![T::zero(); k];
    for px in grads.data().chunks(k) {
        for (a, &g) in alpha.iter_mut().zip(px) {
            *a += g;
        }
    }
    for a in &mut alpha {
        *a /= area;
    }
    let raw: Vec<T> = activations
        .data()
        .chunks(k)
        .map(|px| px.iter().zip(&alpha).map(|(&v, &a)| v * a).sum::<T>().max(T::zero()))
        .collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("saliency map is not finite".into()));
    }
    let peak = raw.iter().copied().fold(T::zero(), T::max);
    let normalized = if peak > T::zero() {
        raw.iter().map(|&v| v / peak).collect()
    } else {
        vec![T::zero(); raw.len()]
    };
    Ok(SaliencyMap {
        map: Tensor::new(vec![h, w], raw)?,
        normalized: Tensor::new(vec![h, w], normalized)?,
        query_id: String::new(),
        neighbor_id: String::new(),
    })
}

pub fn grad_cam<T: Scalar>(network: &Network<T>, query: &Tensor<T>, reference: &Tensor<T>) -> Result<SaliencyMap<T>> {
    let layers = network.layers();
    let Some((Layer::GlobalMaxPool, body)) = layers.split_last() else {
        return Err(Error::Config("grad_cam needs a network ending in a global max pool".into()));
    };
    network.check_input(query)?;
    let activations = apply_all(body, query)?;
    let (f_query, argmax) = ops::global_max_pool_with_indices(&activations)?;
    let f_reference = network.embed(reference)?;

    // ds/df(query) for s = -||f(q) - f(r)||^2
    let two = T::lit(2.0);
    let grad_embedding: Vec<T> = f_query
        .data()
        .iter()
        .zip(&f_reference)
        .map(|(&q, &r)| -two * (q - r))
        .collect();
    let grads = ops::scatter_argmax(activations.shape(), &argmax, &Tensor::from_vec(grad_embedding))?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient at the feature maps".into()));
    }
    cam_from_gradients(&activations, &grads)
}

/// Fixed blue-to-red ramp: `t = 0` is pure blue, `t = 1` pure red.
pub fn color_ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 0.0, 1.0 - t]
}

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Normalized map upsampled to `height x width` with corner-aligned
/// bilinear interpolation.
pub fn upsample<T: Scalar>(map: &SaliencyMap<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let shape = map.normalized.shape();
    let as3 = map.normalized.clone().reshape(vec![shape[0], shape[1], 1])?;
    let up = resize_bilinear(&as3, height, width)?;
    up.reshape(vec![height, width])
}

/// Heat-map overlay: the ramp color of the upsampled map blended at
/// [`OVERLAY_ALPHA`] over the grayscale version of `image`.
pub fn overlay<T: Scalar>(map: &SaliencyMap<T>, image: &Tensor<T>) -> Result<image::RgbImage> {
    let (h, w, c) = image.dims3()?;
    let heat = upsample(map, h, w)?;
    let mut blended = Vec::with_capacity(h * w * 3);
    for (px, &t) in image.data().chunks(c).zip(heat.data()) {
        let gray = if c >= 3 {
            0.299 * px[0].as_f64() + 0.587 * px[1].as_f64() + 0.114 * px[2].as_f64()
        } else {
            px[0].as_f64()
        };
        for channel in color_ramp(t.as_f64()) {
            blended.push(T::lit(OVERLAY_ALPHA * channel + (1.0 - OVERLAY_ALPHA) * gray));
        }
    }
    to_rgb_image(&Tensor::new(vec![h, w, 3], blended)?)
}

/// Value of the normalized map at a fractional feature-map position.
pub fn sample_normalized<T: Scalar>(map: &SaliencyMap<T>, y: f64, x: f64) -> Result<T> {
    let shape = map.normalized.shape();
    let as3 = map.normalized.clone().reshape(vec![shape[0], shape[1], 1])?;
    Ok(bilinear_sample(&as3, y, x, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::network::build_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> (Network<f64>, ChaCha8Rng) {
        let cfg = NetworkConfig::desk().with_input_size(24, 24);
        (build_network(&cfg, 3).unwrap(), ChaCha8Rng::seed_from_u64(4))
    }

    #[test]
    fn shape_and_sign() {
        let (net, mut rng) = desk();
        let q = Tensor::random_uniform(&[24, 24, 3], 0.0, 1.0, &mut rng);
        let r = Tensor::random_uniform(&[24, 24, 3], 0.0, 1.0, &mut rng);
        let m = grad_cam(&net, &q, &r).unwrap();
        assert_eq!(m.map.shape(), &[3, 3]);
        assert!(m.map.data().iter().all(|&v| v >= 0.0));
        assert!(m.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn self_reference_is_zero() {
        let (net, mut rng) = desk();
        let q = Tensor::random_uniform(&[24, 24, 3], 0.0, 1.0, &mut rng);
        let m = grad_cam(&net, &q, &q).unwrap();
        assert!(m.map.data().iter().all(|&v| v == 0.0));
        assert!(m.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_combination() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap();
        let g = Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        // alpha = [1, 2]; px0 = 1 + 4 = 5; px1 = 3 - 2 = 1
        let m = cam_from_gradients(&a, &g).unwrap();
        assert_eq!(m.map.data(), &[5.0, 1.0]);
        assert_eq!(m.normalized.data(), &[1.0, 0.2]);
        assert!(cam_from_gradients(&a, &Tensor::zeros(&[2, 1, 2])).is_err());
    }

    #[test]
    fn ramp_and_overlay() {
        assert_eq!(color_ramp(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(color_ramp(1.0), [1.0, 0.0, 0.0]);
        let map = SaliencyMap {
            map: Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap(),
            normalized: Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            query_id: String::new(),
            neighbor_id: String::new(),
        };
        assert!((sample_normalized(&map, 0.5, 0.5).unwrap() - 0.5).abs() < 1e-15);
        let img = overlay(&map, &Tensor::full(&[8, 8, 3], 0.5)).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        // top-left corner is t = 0: blue over mid gray
        let p = img.get_pixel(0, 0).0;
        assert!(p[2] > p[0]);
        let p = img.get_pixel(7, 0).0;
        assert!(p[0] > p[2]);
        let csv = map.to_csv();
        assert_eq!(csv, "0,1\n1,0\n");
    }

    #[test]
    fn rejects_stack_without_global_pool() {
        let (mut net, mut rng) = desk();
        let q = Tensor::random_uniform(&[24, 24, 3], 0.0, 1.0, &mut rng);
        let last = net.layers_mut().last_mut().unwrap();
        *last = Layer::Relu;
        assert!(matches!(grad_cam(&net, &q, &q), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_scaling_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::random_uniform(&[3, 3, 4], 0.0, 1.0, &mut rng);
        let g = Tensor::random_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let base = cam_from_gradients(&a, &g).unwrap();
        let scaled = cam_from_gradients(&a, &g.map(|v| v * 2.5)).unwrap();
        for (x, y) in base.map.data().iter().zip(scaled.map.data()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
        for (x, y) in base.normalized.data().iter().zip(scaled.normalized.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_map_overlays_coldest_color() {
        let map = cam_from_gradients(&Tensor::<f64>::zeros(&[2, 2, 1]), &Tensor::zeros(&[2, 2, 1])).unwrap();
        let img = overlay(&map, &Tensor::full(&[4, 4, 1], 0.5)).unwrap();
        let q = |v: f64| (v * 255.0).round() as u8;
        let want = [q(0.6 * 0.5), q(0.6 * 0.5), q(0.4 + 0.6 * 0.5)];
        assert!(img.pixels().all(|p| p.0 == want));
    }
}
