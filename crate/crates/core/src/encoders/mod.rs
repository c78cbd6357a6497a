//! Patch-based encoders.
//!
//! An encoder turns an input (an image, or a precomputed backbone feature
//! map) into a `C×H×W` feature map in the shared embedding space: backbone
//! projection per patch (or loaded features), channel layernorm, then a
//! D→C projection. The backbone in `random-projection` mode is a frozen
//! seeded random linear map standing in for a pretrained vision tower;
//! `feature-file` mode consumes features exported by a real backbone.

pub mod features;

pub use features::{load_feature_map, save_feature_map, FeatureMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::kernels as k;
use crate::numeric::optim::ParamSet;
use crate::numeric::scalar::{c as sc, Scalar};
use crate::numeric::tensor::Tensor;
use crate::raster::Raster;
use crate::rng;

/// Where backbone features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// Frozen seeded random linear projection of raw patches.
    RandomProjection,
    /// Features precomputed by an external backbone and loaded from `.vtft`.
    FeatureFile,
}

impl BackboneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-projection" => Ok(BackboneKind::RandomProjection),
            "feature-file" => Ok(BackboneKind::FeatureFile),
            other => Err(Error::invalid(format!(
                "unknown backbone kind '{other}' (expected random-projection or feature-file)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::RandomProjection => "random-projection",
            BackboneKind::FeatureFile => "feature-file",
        }
    }
}

/// Encoder geometry and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Square input image side in pixels.
    pub image_side: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Raster channels expected in random-projection mode (1 or 3).
    pub input_channels: usize,
    /// Backbone feature dimension D.
    pub backbone_dim: usize,
    /// Shared embedding dimension C.
    pub shared_dim: usize,
    pub backbone: BackboneKind,
    /// Layernorm stabilizer.
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 224,
            patch: 16,
            input_channels: 3,
            backbone_dim: 32,
            shared_dim: 16,
            backbone: BackboneKind::FeatureFile,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side == 0 {
            return Err(Error::invalid("encoder: zero patch or image side".to_string()));
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::invalid(format!(
                "encoder: image side {} not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::invalid("encoder: input channels must be 1 or 3".to_string()));
        }
        if self.backbone_dim == 0 || self.shared_dim == 0 {
            return Err(Error::invalid("encoder: zero feature dimension".to_string()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::invalid("encoder: ln eps must be positive".to_string()));
        }
        Ok(())
    }

    /// Patch-grid side G = image side / patch.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Flattened patch length K = P·P·channels.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.input_channels
    }
}

/// Splits an image into non-overlapping P×P patches and flattens each into a
/// column of a `[K, gh·gw]` matrix. Patch `(i, j)` covers pixel rows
/// `iP..iP+P` and columns `jP..jP+P`; within a patch, values are ordered
/// (row, col, channel) and scaled from `0..=255` to `[0, 1]`.
pub fn patchify<T: Scalar>(image: &Raster, patch: usize) -> Result<(Tensor<T>, usize, usize)> {
    if patch == 0 || image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::invalid(format!(
            "patchify: {}x{} image not divisible into {patch}x{patch} patches",
            image.width, image.height
        )));
    }
    let gh = image.height / patch;
    let gw = image.width / patch;
    let k_len = patch * patch * image.channels;
    let m = gh * gw;
    let inv = sc::<T>(1.0 / 255.0);
    let mut data = vec![T::zero(); k_len * m];
    for gi in 0..gh {
        for gj in 0..gw {
            let col = gi * gw + gj;
            let mut row = 0usize;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..image.channels {
                        let v = image.get(gj * patch + px, gi * patch + py, ch);
                        data[row * m + col] = sc::<T>(f64::from(v)) * inv;
                        row += 1;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![k_len, m], data)?, gh, gw))
}

/// All tensors of one encoder. Backbone tensors participate only in
/// random-projection mode but always exist, so checkpoints have one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar> {
    pub backbone_weight: Tensor<T>,
    pub backbone_bias: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

/// Tensor-name suffixes of one encoder, in the fixed serialization order.
pub const PARAM_SUFFIXES: [&str; 6] = [
    "backbone.weight",
    "backbone.bias",
    "ln.gamma",
    "ln.beta",
    "proj.weight",
    "proj.bias",
];

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    // Box-Muller on two uniform draws; deterministic given the stream.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sc::<T>((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
}

/// Random matrix with every output unit (row) normalized to unit L2 norm.
fn random_projection<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let mut sq = T::zero();
        for c in 0..cols {
            let v = gaussian::<T>(rng);
            data[r * cols + c] = v;
            sq = sq + v * v;
        }
        let norm = sq.sqrt();
        if norm > T::zero() {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] / norm;
            }
        }
    }
    Tensor::new(vec![rows, cols], data)
}

impl<T: Scalar> EncoderParams<T> {
    /// Seeded initialization: Gaussian projections with unit-norm output
    /// units, identity layernorm affine, zero biases. The `modality` tag
    /// keeps the two encoders' streams independent.
    pub fn init(cfg: &EncoderConfig, seed: u64, modality: &str) -> Result<Self> {
        cfg.validate()?;
        let mut r1 = rng::derive_rng(seed, &[rng::tag("encoder-init"), rng::tag(modality), 0]);
        let mut r2 = rng::derive_rng(seed, &[rng::tag("encoder-init"), rng::tag(modality), 1]);
        Ok(EncoderParams {
            backbone_weight: random_projection(cfg.backbone_dim, cfg.patch_len(), &mut r1)?,
            backbone_bias: Tensor::zeros(vec![cfg.backbone_dim]),
            ln_gamma: Tensor::full(vec![cfg.backbone_dim], T::one())?,
            ln_beta: Tensor::zeros(vec![cfg.backbone_dim]),
            proj_weight: random_projection(cfg.shared_dim, cfg.backbone_dim, &mut r2)?,
            proj_bias: Tensor::zeros(vec![cfg.shared_dim]),
        })
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.backbone_dim;
        let c = cfg.shared_dim;
        let want: [(&str, &[usize]); 6] = [
            ("backbone.weight", &[d, cfg.patch_len()]),
            ("backbone.bias", &[d]),
            ("ln.gamma", &[d]),
            ("ln.beta", &[d]),
            ("proj.weight", &[c, d]),
            ("proj.bias", &[c]),
        ];
        for (name, shape) in want {
            if self.by_suffix(name).shape() != shape {
                return Err(Error::shape(format!(
                    "encoder tensor {name}: expected {:?}, got {:?}",
                    shape,
                    self.by_suffix(name).shape()
                )));
            }
        }
        Ok(())
    }

    pub fn by_suffix(&self, suffix: &str) -> &Tensor<T> {
        match suffix {
            "backbone.weight" => &self.backbone_weight,
            "backbone.bias" => &self.backbone_bias,
            "ln.gamma" => &self.ln_gamma,
            "ln.beta" => &self.ln_beta,
            "proj.weight" => &self.proj_weight,
            "proj.bias" => &self.proj_bias,
            other => panic!("unknown encoder tensor suffix '{other}'"),
        }
    }

    /// Registers all six tensors under `{prefix}.{suffix}` names.
    /// Backbone tensors get `backbone_trainable`, the rest `aligner_trainable`.
    pub fn register(
        &self,
        params: &mut ParamSet<T>,
        prefix: &str,
        backbone_trainable: bool,
        aligner_trainable: bool,
    ) -> Result<()> {
        for suffix in PARAM_SUFFIXES {
            let trainable = if suffix.starts_with("backbone") {
                backbone_trainable
            } else {
                aligner_trainable
            };
            params.insert(&format!("{prefix}.{suffix}"), self.by_suffix(suffix).clone(), trainable)?;
        }
        Ok(())
    }

    /// Rebuilds the struct from `{prefix}.{suffix}` entries of a set.
    pub fn from_param_set(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        let get = |s: &str| params.tensor(&format!("{prefix}.{s}")).cloned();
        Ok(EncoderParams {
            backbone_weight: get("backbone.weight")?,
            backbone_bias: get("backbone.bias")?,
            ln_gamma: get("ln.gamma")?,
            ln_beta: get("ln.beta")?,
            proj_weight: get("proj.weight")?,
            proj_bias: get("proj.bias")?,
        })
    }
}

/// Encoder input: a raw image (random-projection mode) or a precomputed
/// backbone feature map (feature-file mode).
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a, T: Scalar> {
    Image(&'a Raster),
    Features(&'a FeatureMap<T>),
}

/// Validates an input against the config and returns the backbone-input
/// matrix `[rows, M]` plus the spatial extent.
fn backbone_input<T: Scalar>(
    input: &EncoderInput<'_, T>,
    cfg: &EncoderConfig,
) -> Result<(Tensor<T>, usize, usize)> {
    match (input, cfg.backbone) {
        (EncoderInput::Image(img), BackboneKind::RandomProjection) => {
            if img.width != cfg.image_side || img.height != cfg.image_side {
                return Err(Error::shape(format!(
                    "encode: image {}x{} vs configured side {}",
                    img.width, img.height, cfg.image_side
                )));
            }
            if img.channels != cfg.input_channels {
                return Err(Error::shape(format!(
                    "encode: image has {} channels, config expects {}",
                    img.channels, cfg.input_channels
                )));
            }
            patchify(img, cfg.patch)
        }
        (EncoderInput::Features(fm), BackboneKind::FeatureFile) => {
            if fm.channels() != cfg.backbone_dim {
                return Err(Error::shape(format!(
                    "encode: feature map has {} channels, config expects D = {}",
                    fm.channels(),
                    cfg.backbone_dim
                )));
            }
            if fm.locations() == 0 {
                return Err(Error::invalid("encode: empty spatial extent".to_string()));
            }
            Ok((fm.as_matrix(), fm.height(), fm.width()))
        }
        (EncoderInput::Image(_), BackboneKind::FeatureFile) => Err(Error::invalid(
            "encode: feature-file mode requires a feature-map input".to_string(),
        )),
        (EncoderInput::Features(_), BackboneKind::RandomProjection) => Err(Error::invalid(
            "encode: random-projection mode requires an image input".to_string(),
        )),
    }
}

/// Forward encoding to a `C×H×W` feature map in the shared space.
pub fn encode<T: Scalar>(
    input: EncoderInput<'_, T>,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
) -> Result<FeatureMap<T>> {
    cfg.validate()?;
    params.validate(cfg)?;
    let (x, h, w) = backbone_input(&input, cfg)?;
    let feats = match cfg.backbone {
        BackboneKind::RandomProjection => {
            k::add_bias(&k::matmul(&params.backbone_weight, &x)?, &params.backbone_bias)?
        }
        BackboneKind::FeatureFile => x,
    };
    let eps = sc::<T>(cfg.ln_eps);
    let normed = k::layernorm_cols(&feats, &params.ln_gamma, &params.ln_beta, eps)?;
    let out = k::add_bias(&k::matmul(&params.proj_weight, &normed)?, &params.proj_bias)?;
    FeatureMap::from_matrix(&out, h, w)
}

/// Graph handles for one encoder's tensors: leaves for trainable parameters,
/// constants for frozen ones.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub backbone_weight: Var,
    pub backbone_bias: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// Inserts `{prefix}.{suffix}` tensors of a parameter set into the graph.
pub fn encoder_vars<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<EncoderVars> {
    let mut vars = Vec::with_capacity(6);
    for suffix in PARAM_SUFFIXES {
        let name = format!("{prefix}.{suffix}");
        let p = params.get(&name)?;
        let var = if p.trainable {
            graph.leaf(&name, p.tensor.clone())
        } else {
            graph.constant(p.tensor.clone())
        };
        vars.push(var);
    }
    Ok(EncoderVars {
        backbone_weight: vars[0],
        backbone_bias: vars[1],
        ln_gamma: vars[2],
        ln_beta: vars[3],
        proj_weight: vars[4],
        proj_bias: vars[5],
    })
}

/// Differentiable encode; mirrors [`encode`] on the graph and returns the
/// `[C, M]` feature-matrix node plus the spatial extent.
pub fn graph_encode<T: Scalar>(
    graph: &mut Graph<T>,
    input: EncoderInput<'_, T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<(Var, usize, usize)> {
    let (x, h, w) = backbone_input(&input, cfg)?;
    let xv = graph.constant(x);
    let feats = match cfg.backbone {
        BackboneKind::RandomProjection => {
            let proj = graph.matmul(vars.backbone_weight, xv)?;
            graph.add_bias(proj, vars.backbone_bias)?
        }
        BackboneKind::FeatureFile => xv,
    };
    let eps = sc::<T>(cfg.ln_eps);
    let normed = graph.layernorm_cols(feats, vars.ln_gamma, vars.ln_beta, eps)?;
    let proj = graph.matmul(vars.proj_weight, normed)?;
    let out = graph.add_bias(proj, vars.proj_bias)?;
    Ok((out, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_cfg(side: usize, patch: usize, channels: usize, d: usize, c: usize) -> EncoderConfig {
        EncoderConfig {
            image_side: side,
            patch,
            input_channels: channels,
            backbone_dim: d,
            shared_dim: c,
            backbone: BackboneKind::RandomProjection,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn patchify_hand_example() {
        // 4x4 gray image with pixel value = flat index; P=2.
        let img = Raster::new(4, 4, 1, (0..16).collect()).unwrap();
        let (t, gh, gw) = patchify::<f64>(&img, 2).unwrap();
        assert_eq!((gh, gw), (2, 2));
        assert_eq!(t.shape(), &[4, 4]);
        // patch (0,0) is column 0: pixels 0,1,4,5 scaled by 1/255
        let col0: Vec<f64> = (0..4).map(|r| t.at2(r, 0)).collect();
        assert_eq!(col0, vec![0.0, 1.0 / 255.0, 4.0 / 255.0, 5.0 / 255.0]);
        // patch (1,0) (second row of patches) is column 2: pixels 8,9,12,13
        let col2: Vec<f64> = (0..4).map(|r| t.at2(r, 2)).collect();
        assert_eq!(col2, vec![8.0 / 255.0, 9.0 / 255.0, 12.0 / 255.0, 13.0 / 255.0]);
    }

    #[test]
    fn patchify_geometry_and_range() {
        let img = Raster::filled(224, 224, 3, 255).unwrap();
        let (t, gh, gw) = patchify::<f64>(&img, 16).unwrap();
        assert_eq!((gh, gw), (14, 14));
        assert_eq!(t.shape(), &[768, 196]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn patchify_constant_image_has_identical_patches() {
        let img = Raster::filled(8, 8, 1, 51).unwrap();
        let (t, _, _) = patchify::<f64>(&img, 4).unwrap();
        let m = t.shape()[1];
        for r in 0..t.shape()[0] {
            for c in 0..m {
                assert_eq!(t.at2(r, c), 51.0 / 255.0);
            }
        }
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Raster::filled(225, 225, 1, 0).unwrap();
        assert!(patchify::<f64>(&img, 16).is_err());
    }

    #[test]
    fn encode_shape_contract() {
        let cfg = image_cfg(224, 16, 3, 8, 8);
        let params = EncoderParams::<f64>::init(&cfg, 11, "visual").unwrap();
        let img = Raster::filled(224, 224, 3, 77).unwrap();
        let fm = encode(EncoderInput::Image(&img), &params, &cfg).unwrap();
        assert_eq!((fm.channels(), fm.height(), fm.width()), (8, 14, 14));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = image_cfg(32, 8, 3, 6, 4);
        let params = EncoderParams::<f64>::init(&cfg, 3, "tactile").unwrap();
        let img = Raster::new(32, 32, 3, (0..32 * 32 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
        let a = encode(EncoderInput::Image(&img), &params, &cfg).unwrap();
        let b = encode(EncoderInput::Image(&img), &params, &cfg).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn encode_identity_composition() {
        // feature-file mode, D = C, identity projection, near-zero eps,
        // per-location zero-mean unit-variance input => output ~ input
        let d = 2;
        let cfg = EncoderConfig {
            backbone_dim: d,
            shared_dim: d,
            backbone: BackboneKind::FeatureFile,
            ln_eps: 1e-12,
            ..EncoderConfig::default()
        };
        let mut params = EncoderParams::<f64>::init(&cfg, 0, "tactile").unwrap();
        params.proj_weight =
            Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }).unwrap();
        // channel vectors (+1, -1): mean 0, population variance 1
        let fm = FeatureMap::new(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
        let out = encode(EncoderInput::Features(&fm), &params, &cfg).unwrap();
        for (a, b) in out.tensor().data().iter().zip(fm.tensor().data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_rejects_mode_mismatch_and_bad_dims() {
        let cfg = image_cfg(32, 8, 3, 6, 4);
        let params = EncoderParams::<f64>::init(&cfg, 3, "x").unwrap();
        let fm = FeatureMap::new(6, 4, 4, vec![0.0; 96]).unwrap();
        assert!(encode(EncoderInput::Features(&fm), &params, &cfg).is_err());

        let ff_cfg = EncoderConfig {
            backbone: BackboneKind::FeatureFile,
            backbone_dim: 6,
            shared_dim: 4,
            ..EncoderConfig::default()
        };
        let ff_params = EncoderParams::<f64>::init(&ff_cfg, 3, "x").unwrap();
        let img = Raster::filled(224, 224, 3, 0).unwrap();
        assert!(encode(EncoderInput::Image(&img), &ff_params, &ff_cfg).is_err());
        let wrong_d = FeatureMap::new(5, 4, 4, vec![0.0; 80]).unwrap();
        assert!(encode(EncoderInput::Features(&wrong_d), &ff_params, &ff_cfg).is_err());
    }

    #[test]
    fn graph_encode_matches_plain_encode() {
        let cfg = image_cfg(16, 4, 1, 5, 3);
        let params = EncoderParams::<f64>::init(&cfg, 9, "tactile").unwrap();
        let img = Raster::new(16, 16, 1, (0..256).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
        let plain = encode(EncoderInput::Image(&img), &params, &cfg).unwrap();

        let mut pset = ParamSet::new();
        params.register(&mut pset, "tactile", true, true).unwrap();
        let mut g = Graph::new();
        let vars = encoder_vars(&mut g, &pset, "tactile").unwrap();
        let (out, h, w) = graph_encode(&mut g, EncoderInput::Image(&img), &vars, &cfg).unwrap();
        assert_eq!((h, w), (4, 4));
        let fm = FeatureMap::from_matrix(g.value(out), h, w).unwrap();
        assert!(fm.tensor().bit_eq(plain.tensor()));
    }

    #[test]
    fn init_is_seeded_and_modality_tagged() {
        let cfg = image_cfg(16, 4, 1, 5, 3);
        let a = EncoderParams::<f64>::init(&cfg, 9, "tactile").unwrap();
        let b = EncoderParams::<f64>::init(&cfg, 9, "tactile").unwrap();
        let c = EncoderParams::<f64>::init(&cfg, 9, "visual").unwrap();
        assert!(a.backbone_weight.bit_eq(&b.backbone_weight));
        assert!(!a.backbone_weight.bit_eq(&c.backbone_weight));
        // output units have unit norm
        for r in 0..5 {
            let norm: f64 = (0..cfg.patch_len())
                .map(|c| a.backbone_weight.at2(r, c).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
