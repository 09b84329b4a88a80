//! The twin ("sister") embedding network.
//!
//! Both branches of a pair run through the one [`Network`] value, so weight
//! sharing holds by construction: there is only one copy of each parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layer::{apply_all, backward_all, forward_all, Cache, Conv2d, Layer, LayerGrads, LayerSpec, Mode, Residual};
use crate::ops::Padding;
use crate::store::euclidean_distance;
use crate::tensor::Tensor;
use crate::Scalar;

/// Declarative description of the twin network's layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub preset_name: String,
    /// `(H, W, C)` of the input patch.
    pub input_shape: [usize; 3],
    pub head_filters: Vec<usize>,
    pub head_strides: Vec<usize>,
    pub residual_filters: Vec<usize>,
    pub kernel_size: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
}

impl NetworkConfig {
    /// 224x224 BreaKHis patches.
    pub fn breast_twins() -> Self {
        Self {
            preset_name: "breast-twins".into(),
            input_shape: [224, 224, 3],
            head_filters: vec![32, 64, 128, 256],
            head_strides: vec![1, 2, 2, 2],
            residual_filters: vec![64, 32, 1, 256],
            kernel_size: 3,
            embedding_dim: 2,
            dropout_rate: 0.2,
        }
    }

    /// 512x512 spitzoid skin patches.
    pub fn skin_twins() -> Self {
        Self {
            preset_name: "skin-twins".into(),
            input_shape: [512, 512, 3],
            residual_filters: vec![32, 16, 1, 256],
            ..Self::breast_twins()
        }
    }

    /// Small stack that trains on a laptop CPU in seconds.
    pub fn desk() -> Self {
        Self {
            preset_name: "desk".into(),
            input_shape: [64, 64, 3],
            head_filters: vec![8, 16],
            head_strides: vec![1, 2],
            residual_filters: vec![8, 4, 1, 16],
            kernel_size: 3,
            embedding_dim: 2,
            dropout_rate: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "breast-twins" => Ok(Self::breast_twins()),
            "skin-twins" => Ok(Self::skin_twins()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected breast-twins, skin-twins or desk)"
            ))),
        }
    }

    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_shape[0] = height;
        self.input_shape[1] = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_filters.len() != self.head_strides.len() {
            return Err(Error::Config(format!(
                "head_filters has {} entries but head_strides has {}",
                self.head_filters.len(),
                self.head_strides.len()
            )));
        }
        if self.head_filters.is_empty() {
            return Err(Error::Config("at least one head convolution is required".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.head_strides.contains(&0) {
            return Err(Error::Config("head strides must be positive".into()));
        }
        if self.head_filters.contains(&0) || self.residual_filters.contains(&0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has an empty axis", self.input_shape)));
        }
        crate::ops::check_dropout_rate(self.dropout_rate)?;
        let head_out = *self.head_filters.last().unwrap();
        if let Some(&last) = self.residual_filters.last() {
            if last != head_out {
                return Err(Error::Config(format!(
                    "residual block must return to {head_out} channels for the identity skip, last filter count is {last}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    seed: u64,
    layers: Vec<Layer<T>>,
    mode: Mode,
}

/// Uniform `±sqrt(6 / fan_in)` kernels, zero bias.
fn init_conv<T: Scalar, R: Rng>(kernel: usize, cin: usize, filters: usize, stride: usize, padding: Padding, rng: &mut R) -> Layer<T> {
    let limit = (6.0 / (kernel * kernel * cin) as f64).sqrt();
    let mut conv = Conv2d::zeros(kernel, cin, filters, stride, padding);
    conv.kernels = Tensor::random_uniform(conv.kernels.shape(), -limit, limit, rng);
    Layer::Conv2d(conv)
}

/// Layer sequence: head convs (valid) with relu, 2x2 max pool, dropout, a
/// residual block of same-padded stride-1 convs with an identity skip, then
/// an `embedding_dim`-filter conv with relu and a global max pool.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let mut shape = config.input_shape.to_vec();
    let mut layers = Vec::new();
    let push = |name: String, layer: Layer<T>, shape: &mut Vec<usize>, layers: &mut Vec<Layer<T>>| -> Result<()> {
        *shape = layer
            .output_shape(shape)
            .map_err(|e| Error::Config(format!("{name} collapses the {:?} feature map: {e}", shape)))?;
        layers.push(layer);
        Ok(())
    };

    let mut channels = config.input_shape[2];
    for (i, (&f, &s)) in config.head_filters.iter().zip(&config.head_strides).enumerate() {
        push(format!("head conv {i}"), init_conv(k, channels, f, s, Padding::Valid, &mut rng), &mut shape, &mut layers)?;
        layers.push(Layer::Relu);
        channels = f;
    }
    push("max pool".into(), Layer::MaxPool2d { window: 2, stride: 2 }, &mut shape, &mut layers)?;
    layers.push(Layer::Dropout {
        rate: config.dropout_rate,
    });

    if !config.residual_filters.is_empty() {
        let mut body = Vec::new();
        let mut cin = channels;
        for (i, &f) in config.residual_filters.iter().enumerate() {
            if i > 0 {
                body.push(Layer::Relu);
            }
            body.push(init_conv(k, cin, f, 1, Padding::Same, &mut rng));
            cin = f;
        }
        push("residual block".into(), Layer::Residual(Residual { body }), &mut shape, &mut layers)?;
    }

    push(
        "embedding conv".into(),
        init_conv(k, channels, config.embedding_dim, 1, Padding::Valid, &mut rng),
        &mut shape,
        &mut layers,
    )?;
    layers.push(Layer::Relu);
    layers.push(Layer::GlobalMaxPool);

    Ok(Network {
        config: config.clone(),
        seed,
        layers,
        mode: Mode::Inference,
    })
}

/// Per-twin forward state kept for backpropagation.
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Network<T> {
    /// Wraps an arbitrary layer stack. The stack must map `config.input_shape`
    /// to a vector of `config.embedding_dim` values.
    pub fn from_layers(config: NetworkConfig, seed: u64, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = config.input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [config.embedding_dim] {
            return Err(dim_err!(
                "layer stack emits shape {:?}, embedding_dim is {}",
                shape,
                config.embedding_dim
            ));
        }
        Ok(Self {
            config,
            seed,
            layers,
            mode: Mode::Inference,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.config.input_shape {
            return Err(dim_err!(
                "image shape {:?} does not match network input {:?}",
                image.shape(),
                self.config.input_shape
            ));
        }
        Ok(())
    }

    /// The feature vector `f(x)`. Always evaluated with dropout disabled,
    /// hence deterministic.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(image)?;
        Ok(apply_all(&self.layers, image)?.into_data())
    }

    /// Embeds both images through the same parameters and returns their
    /// Euclidean distance.
    pub fn embed_pair(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<(Vec<T>, Vec<T>, T)> {
        let v1 = self.embed(x1)?;
        let v2 = self.embed(x2)?;
        let d = euclidean_distance(&v1, &v2)?;
        Ok((v1, v2, d))
    }

    /// Forward pass that records what [`Network::backward`] needs.
    /// Dropout is active only in [`Mode::Training`].
    pub fn forward_traced<R: Rng + ?Sized>(&self, image: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<(Vec<T>, Trace<T>)> {
        self.check_input(image)?;
        let (out, caches) = forward_all(&self.layers, image, mode, rng)?;
        Ok((out.into_data(), Trace { caches }))
    }

    /// Gradients of a loss with respect to parameters and input, given the
    /// loss gradient with respect to the embedding.
    pub fn backward(&self, trace: &Trace<T>, grad_embedding: &[T]) -> Result<LayerGrads<T>> {
        if grad_embedding.len() != self.config.embedding_dim {
            return Err(dim_err!(
                "embedding gradient has {} entries, embedding_dim is {}",
                grad_embedding.len(),
                self.config.embedding_dim
            ));
        }
        backward_all(&self.layers, &trace.caches, &Tensor::from_vec(grad_embedding.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for cfg in [NetworkConfig::breast_twins(), NetworkConfig::skin_twins(), NetworkConfig::desk()] {
            let net = build_network::<f32>(&cfg, 1).unwrap();
            assert_eq!(net.embedding_dim(), 2);
        }
    }

    #[test]
    fn desk_shapes_follow_stride_arithmetic() {
        let cfg = NetworkConfig::desk();
        let net = build_network::<f64>(&cfg, 0).unwrap();
        let mut shape = vec![64, 64, 3];
        let mut seen = Vec::new();
        for layer in net.layers() {
            shape = layer.output_shape(&shape).unwrap();
            seen.push(shape.clone());
        }
        // 64 -> 62 (valid, s1) -> 30 (valid, s2) -> 15 (pool) -> 15 (residual) -> 13 (valid) -> GMP
        assert_eq!(seen[0], vec![62, 62, 8]);
        assert_eq!(seen[2], vec![30, 30, 16]);
        assert_eq!(seen[4], vec![15, 15, 16]);
        assert_eq!(seen[6], vec![15, 15, 16]);
        assert_eq!(seen[7], vec![13, 13, 2]);
        assert_eq!(shape, vec![2]);
    }

    #[test]
    fn spatial_collapse_is_reported() {
        let cfg = NetworkConfig::desk().with_input_size(8, 8);
        let err = build_network::<f64>(&cfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)), "{msg}");
        assert!(msg.contains("conv") || msg.contains("pool"), "{msg}");
    }

    #[test]
    fn config_invariants() {
        let mut cfg = NetworkConfig::desk();
        cfg.head_strides.push(1);
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.residual_filters = vec![8, 4, 1, 12];
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.embedding_dim = 0;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::preset("nope").is_err());
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let net = build_network::<f64>(&NetworkConfig::desk(), 0).unwrap();
        let err = net.embed(&Tensor::zeros(&[32, 32, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let net = build_network::<f64>(&NetworkConfig::desk().with_input_size(24, 24), 5).unwrap();
        let v = net.embed(&Tensor::zeros(&[24, 24, 3])).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }
}
