//! Toy convolutional encoder producing channel-grouped feature maps.
//!
//! Architecture (all convolutions stride 1, "same" padding):
//!
//! ```text
//! image H₀×W₀×3
//!   -> conv3×3(3 → s) + relu -> mean-pool 2×2
//!   -> conv3×3(s → 2s) + relu -> mean-pool 2×2
//!   -> pyramid: conv3×3 dil 1 (2s → 2s) + conv3×3 dil 2 (2s → 2s), summed, relu
//!   -> conv1×1(2s → B·D) + relu
//! ```
//!
//! The pyramid block is one reading of "coarse to fine" convolution layers:
//! two parallel receptive fields merged by addition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::filtering::{DecoderParams, DecoderVars};
use crate::params::{ConvParams, ConvVars};
use crate::tensor::Tensor;

/// Spatial reduction between image and feature map.
pub const DOWNSAMPLE: usize = 4;

/// H×W×(B·D) feature map living in a [`Graph`]; group `b` owns channels
/// `[b·D, (b+1)·D)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedFeatureMap {
    pub values: Var,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub group_dim: usize,
}

impl GroupedFeatureMap {
    /// Wraps `values`, checking that its channel count is exactly `groups·group_dim`.
    pub fn new(g: &Graph, values: Var, groups: usize, group_dim: usize) -> Result<Self> {
        let &[height, width, c] = g.shape(values) else {
            return Err(Error::shape("feature map", format!("expected H×W×C, got {:?}", g.shape(values))));
        };
        if groups == 0 || group_dim == 0 || c != groups * group_dim {
            return Err(Error::shape(
                "feature map",
                format!("{c} channels cannot hold {groups} groups of {group_dim}"),
            ));
        }
        Ok(GroupedFeatureMap { values, height, width, groups, group_dim })
    }

    pub fn channels(&self) -> usize {
        self.groups * self.group_dim
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Copies out the D-channel sub-map of group `b` as a plain tensor.
    pub fn group_values(&self, g: &Graph, b: usize) -> Tensor {
        let d = self.group_dim;
        let data = g
            .value(self.values)
            .data()
            .chunks(self.channels())
            .flat_map(|px| px[b * d..(b + 1) * d].iter().copied())
            .collect();
        Tensor::from_parts(vec![self.height, self.width, d], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub groups: usize,
    pub group_dim: usize,
    pub stem_channels: usize,
    /// Channel count of the fused map fed to the decoder.
    pub decoder_in: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub stem: ConvParams,
    pub conv2: ConvParams,
    pub pyramid_fine: ConvParams,
    pub pyramid_coarse: ConvParams,
    pub merge: ConvParams,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub stem: ConvVars,
    pub conv2: ConvVars,
    pub pyramid_fine: ConvVars,
    pub pyramid_coarse: ConvVars,
    pub merge: ConvVars,
    pub groups: usize,
    pub group_dim: usize,
}

impl EncoderParams {
    pub fn layers(&self) -> [(&'static str, &ConvParams); 5] {
        [
            ("encoder.stem", &self.stem),
            ("encoder.conv2", &self.conv2),
            ("encoder.pyramid_fine", &self.pyramid_fine),
            ("encoder.pyramid_coarse", &self.pyramid_coarse),
            ("encoder.merge", &self.merge),
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvParams; 5] {
        [
            &mut self.stem,
            &mut self.conv2,
            &mut self.pyramid_fine,
            &mut self.pyramid_coarse,
            &mut self.merge,
        ]
    }

    pub fn bind(&self, g: &mut Graph, groups: usize, group_dim: usize) -> EncoderVars {
        EncoderVars {
            stem: self.stem.bind(g),
            conv2: self.conv2.bind(g),
            pyramid_fine: self.pyramid_fine.bind(g),
            pyramid_coarse: self.pyramid_coarse.bind(g),
            merge: self.merge.bind(g),
            groups,
            group_dim,
        }
    }
}

impl EncoderVars {
    pub fn layers(&self) -> [ConvVars; 5] {
        [self.stem, self.conv2, self.pyramid_fine, self.pyramid_coarse, self.merge]
    }
}

/// Encoder and decoder weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// All convolution layers with stable names, encoder first.
    pub fn layers(&self) -> Vec<(&'static str, &ConvParams)> {
        let mut out = self.encoder.layers().to_vec();
        out.extend(self.decoder.layers());
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut out: Vec<&mut ConvParams> = self.encoder.layers_mut().into_iter().collect();
        out.extend(self.decoder.layers_mut());
        out
    }

    /// Flat `(name, tensor)` list used for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, p)| [(format!("{name}.kernel"), &p.kernel), (format!("{name}.bias"), &p.bias)])
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.layers().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Rebuilds parameters from named tensors, checking shapes against a
    /// freshly initialised model of the same config.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut params = init_params(&config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::shape("checkpoint", format!("{} tensors, expected {}", named.len(), expected.len())));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{got_name} {:?} does not match {name} {:?}", t.shape(), shape),
                ));
            }
        }
        let mut it = named.iter().map(|(_, t)| t.clone());
        for layer in params.layers_mut() {
            layer.kernel = it.next().unwrap();
            layer.bias = it.next().unwrap();
        }
        Ok(params)
    }
}

/// Seeded initialisation of encoder and decoder. Hidden layers are `s` wide
/// after the stem and `2s` afterwards; the decoder runs at `2s`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    let ModelConfig { groups, group_dim, stem_channels: s, decoder_in, seed } = *config;
    if groups == 0 || group_dim == 0 || s == 0 || decoder_in == 0 {
        return Err(Error::Invalid(format!("model dimensions must be positive: {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams {
        stem: ConvParams::init(&mut rng, 3, 3, s),
        conv2: ConvParams::init(&mut rng, 3, s, 2 * s),
        pyramid_fine: ConvParams::init(&mut rng, 3, 2 * s, 2 * s),
        pyramid_coarse: ConvParams::init(&mut rng, 3, 2 * s, 2 * s),
        merge: ConvParams::init(&mut rng, 1, 2 * s, groups * group_dim),
    };
    let decoder = DecoderParams {
        conv1: ConvParams::init(&mut rng, 3, decoder_in, 2 * s),
        conv2: ConvParams::init(&mut rng, 3, 2 * s, 2 * s),
        head: ConvParams::init(&mut rng, 1, 2 * s, 2),
    };
    Ok(ModelParams { config: *config, encoder, decoder })
}

/// Graph handles for a whole model.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl ModelParams {
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, self.config.groups, self.config.group_dim),
            decoder: self.decoder.bind(g),
        }
    }
}

impl ModelVars {
    /// Rebuilds handles from a flat list ordered like
    /// [`ModelParams::named_tensors`] (kernel then bias, layer by layer).
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        if vars.len() != 16 {
            return Err(Error::shape("ModelVars::from_vars", format!("16 handles expected, got {}", vars.len())));
        }
        let c = |i: usize| ConvVars { kernel: vars[2 * i], bias: vars[2 * i + 1] };
        Ok(ModelVars {
            encoder: EncoderVars {
                stem: c(0),
                conv2: c(1),
                pyramid_fine: c(2),
                pyramid_coarse: c(3),
                merge: c(4),
                groups: config.groups,
                group_dim: config.group_dim,
            },
            decoder: DecoderVars { conv1: c(5), conv2: c(6), head: c(7) },
        })
    }

    /// Handles in the same order as [`ModelParams::layers_mut`].
    pub fn layers(&self) -> Vec<ConvVars> {
        let mut out = self.encoder.layers().to_vec();
        out.extend(self.decoder.layers());
        out
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("encode", format!("expected H×W×3 image, got {:?}", image.shape())));
    };
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::shape("encode", format!("{h}×{w} is not divisible by {DOWNSAMPLE}")));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("encode", format!("pixel value {v} outside [0, 1]")));
    }
    Ok((h, w))
}

/// Encodes an image into an (H₀/4)×(W₀/4)×(B·D) grouped feature map.
pub fn encode(g: &mut Graph, image: &Tensor, params: &EncoderVars) -> Result<GroupedFeatureMap> {
    check_image(image)?;
    let x = g.constant(image.clone());
    let x = params.stem.apply(g, x, 1)?;
    let x = g.relu(x)?;
    let x = g.mean_pool2(x)?;
    let x = params.conv2.apply(g, x, 1)?;
    let x = g.relu(x)?;
    let x = g.mean_pool2(x)?;
    let fine = params.pyramid_fine.apply(g, x, 1)?;
    let coarse = params.pyramid_coarse.apply(g, x, 2)?;
    let x = g.add(fine, coarse)?;
    let x = g.relu(x)?;
    let x = params.merge.apply(g, x, 1)?;
    let x = g.relu(x)?;
    GroupedFeatureMap::new(g, x, params.groups, params.group_dim)
}

/// Nearest-neighbour downsampling of a binary mask by an integer factor:
/// output `(y, x)` takes input `(f·y + f/2, f·x + f/2)`.
pub fn downsample_mask(mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let &[mh, mw] = mask.shape() else {
        return Err(Error::shape("mask", format!("expected H×W mask, got {:?}", mask.shape())));
    };
    if height == 0 || width == 0 || mh % height != 0 || mw % width != 0 || mh / height != mw / width {
        return Err(Error::shape("mask", format!("{mh}×{mw} mask does not map onto {height}×{width}")));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain("mask", "mask must be binary"));
    }
    let f = mh / height;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(mask.data()[(f * y + f / 2) * mw + f * x + f / 2]);
        }
    }
    Ok(Tensor::from_parts(vec![height, width], out))
}

/// Multiplies every channel by the (downsampled) binary mask.
pub fn mask_features(g: &mut Graph, features: GroupedFeatureMap, mask: &Tensor) -> Result<GroupedFeatureMap> {
    let small = downsample_mask(mask, features.height, features.width)?;
    let c = features.channels();
    let expanded: Vec<f64> = small.data().iter().flat_map(|&m| std::iter::repeat_n(m, c)).collect();
    let m = g.constant(Tensor::from_parts(vec![features.height, features.width, c], expanded));
    let masked = g.mul(features.values, m)?;
    GroupedFeatureMap::new(g, masked, features.groups, features.group_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn config(seed: u64) -> ModelConfig {
        ModelConfig { groups: 2, group_dim: 3, stem_channels: 2, decoder_in: 3, seed }
    }

    fn all_tensors(p: &ModelParams) -> Vec<f64> {
        p.named_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(&config(0)).unwrap();
        let b = init_params(&config(0)).unwrap();
        let c = init_params(&config(1)).unwrap();
        let (va, vb, vc) = (all_tensors(&a), all_tensors(&b), all_tensors(&c));
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(va.iter().zip(&vc).any(|(x, y)| x != y));
    }

    #[test]
    fn init_rejects_zero_dimensions() {
        let mut c = config(0);
        c.stem_channels = 0;
        assert!(matches!(init_params(&c), Err(Error::Invalid(_))));
        let mut c = config(0);
        c.groups = 0;
        assert!(init_params(&c).is_err());
    }

    #[test]
    fn encode_shape_contract() {
        let params = init_params(&ModelConfig { groups: 4, group_dim: 2, stem_channels: 2, decoder_in: 2, seed: 7 })
            .unwrap();
        let mut g = Graph::new();
        let vars = params.encoder.bind(&mut g, 4, 2);
        let image = Tensor::full(&[64, 64, 3], 0.5);
        let f = encode(&mut g, &image, &vars).unwrap();
        assert_eq!(g.shape(f.values), &[16, 16, 8]);
        assert_eq!((f.height, f.width, f.groups, f.group_dim), (16, 16, 4, 2));

        let image = Tensor::full(&[12, 20, 3], 0.5);
        let f = encode(&mut g, &image, &vars).unwrap();
        assert_eq!((f.height, f.width), (3, 5));
    }

    #[test]
    fn encode_rejects_bad_images() {
        let params = init_params(&config(0)).unwrap();
        let mut g = Graph::new();
        let vars = params.encoder.bind(&mut g, 2, 3);
        assert!(encode(&mut g, &Tensor::full(&[10, 8, 3], 0.1), &vars).is_err());
        assert!(encode(&mut g, &Tensor::full(&[8, 8, 3], 1.5), &vars).is_err());
        assert!(encode(&mut g, &Tensor::full(&[8, 8, 1], 0.5), &vars).is_err());
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let params = init_params(&config(3)).unwrap();
        let mut g = Graph::new();
        let vars = params.encoder.bind(&mut g, 2, 3);
        let f = encode(&mut g, &Tensor::zeros(&[16, 16, 3]), &vars).unwrap();
        assert!(g.value(f.values).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        let mut params = init_params(&config(11)).unwrap();
        // Positive biases keep most units away from the relu kink.
        for layer in params.encoder.layers_mut() {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = 0.05);
        }
        let image = Tensor::new(
            vec![8, 8, 3],
            (0..192).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        let flat: Vec<Tensor> = params
            .encoder
            .layers()
            .iter()
            .flat_map(|(_, p)| [p.kernel.clone(), p.bias.clone()])
            .collect();
        let f = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let c = |i: usize| ConvVars { kernel: p[2 * i], bias: p[2 * i + 1] };
            let vars = EncoderVars {
                stem: c(0),
                conv2: c(1),
                pyramid_fine: c(2),
                pyramid_coarse: c(3),
                merge: c(4),
                groups: 2,
                group_dim: 3,
            };
            let feats = encode(g, &image, &vars)?;
            g.sum_all(feats.values)
        };
        let err = grad_check(&f, &flat, 200, 5).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    fn column_map(g: &mut Graph, p: f64, q: f64) -> GroupedFeatureMap {
        let v = g.constant(Tensor::new(vec![2, 1, 1], vec![p, q]).unwrap());
        GroupedFeatureMap::new(g, v, 1, 1).unwrap()
    }

    #[test]
    fn mask_examples() {
        let mut g = Graph::new();
        let f = column_map(&mut g, 2.5, -1.5);
        let m = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let out = mask_features(&mut g, f, &m).unwrap();
        assert_eq!(g.value(out.values).data(), &[2.5, 0.0]);

        let data: Vec<f64> = (0..4 * 4 * 6).map(|i| i as f64).collect();
        let v = g.constant(Tensor::new(vec![4, 4, 6], data).unwrap());
        let f = GroupedFeatureMap::new(&g, v, 2, 3).unwrap();
        let ones = mask_features(&mut g, f, &Tensor::full(&[16, 16], 1.0)).unwrap();
        assert_eq!(g.value(ones.values), g.value(f.values));
        let zeros = mask_features(&mut g, f, &Tensor::zeros(&[16, 16])).unwrap();
        assert!(g.value(zeros.values).data().iter().all(|&x| x == 0.0));
        assert!(mask_features(&mut g, f, &Tensor::zeros(&[16, 12])).is_err());
        assert!(mask_features(&mut g, f, &Tensor::full(&[16, 16], 0.5)).is_err());
    }

    #[test]
    fn mask_is_idempotent_and_commutes_with_group_slicing() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..4 * 4 * 6).map(|i| (i as f64 * 0.7).sin()).collect();
        let v = g.constant(Tensor::new(vec![4, 4, 6], data).unwrap());
        let f = GroupedFeatureMap::new(&g, v, 2, 3).unwrap();
        let mask = Tensor::new(vec![16, 16], (0..256).map(|i| ((i / 5) % 2) as f64).collect()).unwrap();
        let once = mask_features(&mut g, f, &mask).unwrap();
        let twice = mask_features(&mut g, once, &mask).unwrap();
        assert_eq!(g.value(once.values), g.value(twice.values));

        let small = downsample_mask(&mask, 4, 4).unwrap();
        for b in 0..2 {
            let sliced_then_masked: Vec<f64> = f
                .group_values(&g, b)
                .data()
                .chunks(3)
                .zip(small.data())
                .flat_map(|(px, &m)| px.iter().map(move |x| x * m))
                .collect();
            assert_eq!(once.group_values(&g, b).data(), sliced_then_masked.as_slice());
        }
    }
}
