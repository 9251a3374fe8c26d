//! Frozen convolutional feature extractors used by the perceptual loss and
//! by the FID/LPIPS metrics.

use std::fmt;
use std::path::{Path, PathBuf};

use dhvae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{Init, ModelParams};
use crate::util::{derive_seed, rng_from};

/// Environment variable naming the directory with optional pretrained weights.
pub const ASSET_DIR_ENV: &str = "DHVAE_ASSET_DIR";
/// File expected inside the asset directory for the pretrained extractor.
pub const PRETRAINED_FILE: &str = "vgg16_features.ckpt";
pub const DEFAULT_TAPS: [usize; 4] = [2, 7, 12, 21];

// Channel plan of the 16-layer stack; 0 marks a 2x2 max pool.
const VGG16_PLAN: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    #[serde(rename = "pretrained-16-layer-conv")]
    Pretrained16LayerConv,
    FixedRandomTest,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Pretrained16LayerConv => "pretrained-16-layer-conv",
            ExtractorKind::FixedRandomTest => "fixed-random-test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv(usize),
    Relu,
    Pool,
}

/// Settings for building an extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub taps: Vec<usize>,
    /// Channel width divisor applied to the 16-layer plan for the random
    /// test extractor (8 gives 8/16/32/64 channels).
    pub width_divisor: usize,
    pub seed: u64,
    /// Bilinear resize target applied before the network, if any.
    pub input_size: Option<[usize; 2]>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { kind: ExtractorKind::FixedRandomTest, taps: DEFAULT_TAPS.to_vec(), width_divisor: 8, seed: 0, input_size: None }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    taps: Vec<usize>,
    layers: Vec<Layer>,
    weights: ModelParams,
    input_size: Option<[usize; 2]>,
    identity: String,
}

fn layer_list(widths: impl Fn(usize) -> usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    for &c in &VGG16_PLAN {
        if c == 0 {
            layers.push(Layer::Pool);
        } else {
            layers.push(Layer::Conv(widths(c)));
            layers.push(Layer::Relu);
        }
    }
    layers
}

fn check_taps(taps: &[usize], n_layers: usize) -> Result<()> {
    if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("tap indices {taps:?} must be nonempty and strictly increasing")));
    }
    if taps[taps.len() - 1] >= n_layers {
        return Err(Error::Config(format!("tap index {} beyond the {n_layers}-layer stack", taps[taps.len() - 1])));
    }
    Ok(())
}

impl FeatureExtractor {
    pub fn build(cfg: &ExtractorConfig) -> Result<Self> {
        match cfg.kind {
            ExtractorKind::FixedRandomTest => Self::fixed_random(cfg.seed, &cfg.taps, cfg.width_divisor, cfg.input_size),
            ExtractorKind::Pretrained16LayerConv => {
                let dir = std::env::var_os(ASSET_DIR_ENV)
                    .ok_or_else(|| Error::Config(format!("{ASSET_DIR_ENV} is not set; pretrained extractor unavailable")))?;
                Self::pretrained(PathBuf::from(dir).join(PRETRAINED_FILE), &cfg.taps, cfg.input_size.or(Some([224, 224])))
            }
        }
    }

    /// Pretrained extractor when the asset directory provides one, else the
    /// random test extractor.
    pub fn from_env(cfg: &ExtractorConfig) -> Result<Self> {
        let available = std::env::var_os(ASSET_DIR_ENV).is_some_and(|d| PathBuf::from(d).join(PRETRAINED_FILE).is_file());
        if cfg.kind == ExtractorKind::Pretrained16LayerConv && available {
            Self::build(cfg)
        } else {
            Self::build(&ExtractorConfig { kind: ExtractorKind::FixedRandomTest, ..cfg.clone() })
        }
    }

    /// Seeded random convolution stack with the 16-layer structure and
    /// reduced widths.
    pub fn fixed_random(seed: u64, taps: &[usize], width_divisor: usize, input_size: Option<[usize; 2]>) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        let layers = layer_list(|c| (c / width_divisor).max(1));
        check_taps(taps, layers.len())?;
        let mut rng = rng_from(derive_seed(seed, &[0xfea7]));
        let mut init = Init::new(&mut rng, false);
        let mut cin = 3;
        for (i, l) in layers.iter().enumerate().take(taps[taps.len() - 1] + 1) {
            if let Layer::Conv(c) = *l {
                init.conv(&format!("features.{i}"), c, cin, 3, 1.0);
                cin = c;
            }
        }
        let identity = format!(
            "fixed-random-test(seed={seed},width_divisor={width_divisor},taps={})",
            taps.iter().map(usize::to_string).collect::<Vec<_>>().join("/")
        );
        Ok(FeatureExtractor { kind: ExtractorKind::FixedRandomTest, taps: taps.to_vec(), layers, weights: init.params, input_size, identity })
    }

    /// Loads converted 16-layer weights (`features.<i>.weight` / `.bias`
    /// arrays) from a checkpoint archive.
    pub fn pretrained(path: impl AsRef<Path>, taps: &[usize], input_size: Option<[usize; 2]>) -> Result<Self> {
        let path = path.as_ref();
        let layers = layer_list(|c| c);
        check_taps(taps, layers.len())?;
        let ckpt = Checkpoint::load(path)?;
        let mut weights = ModelParams::new();
        let mut cin = 3;
        for (i, l) in layers.iter().enumerate().take(taps[taps.len() - 1] + 1) {
            if let Layer::Conv(c) = *l {
                for (suffix, shape) in [("weight", vec![c, cin, 3, 3]), ("bias", vec![c])] {
                    let name = format!("features.{i}.{suffix}");
                    let (s, d) = ckpt.array(&name).ok_or_else(|| Error::Config(format!("{}: missing {name}", path.display())))?;
                    if s != shape.as_slice() {
                        return Err(Error::Shape(format!("{name}: shape {s:?}, expected {shape:?}")));
                    }
                    weights.insert(name, Tensor::from_vec(d.to_vec(), s));
                }
                cin = c;
            }
        }
        let identity = format!("pretrained-16-layer-conv({})", path.display());
        Ok(FeatureExtractor { kind: ExtractorKind::Pretrained16LayerConv, taps: taps.to_vec(), layers, weights, input_size, identity })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Human-readable backbone identity for reports.
    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn preprocessing(&self) -> String {
        let resize = match self.input_size {
            Some([h, w]) => format!("bilinear resize to {h}x{w}"),
            None => "native resolution".into(),
        };
        format!("{resize}; 3-channel replication; ImageNet mean/std normalization")
    }

    fn pools_before_last_tap(&self) -> u32 {
        self.layers[..=self.taps[self.taps.len() - 1]].iter().filter(|l| **l == Layer::Pool).count() as u32
    }

    /// Feature maps at the tap layers for `[N, 1, H, W]` images in `[0, 1]`.
    /// Gradients flow to the input; the weights are constants.
    pub fn extract(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("extractor expects [N, 1, H, W] images, got {s:?}")));
        }
        let mut x = match self.input_size {
            Some([h, w]) if [h, w] != [s[2], s[3]] => bilinear_resize(images, h, w),
            _ => images.clone(),
        };
        let f = 1usize << self.pools_before_last_tap();
        if x.dim(2) % f != 0 || x.dim(3) % f != 0 {
            return Err(Error::Shape(format!("extractor input {}x{} not divisible by {f}", x.dim(2), x.dim(3))));
        }
        let n = x.dim(0);
        x = Tensor::cat(&[x.clone(), x.clone(), x], 1);
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), &[1, 3, 1, 1]);
        let inv_std = Tensor::from_vec(IMAGENET_STD.iter().map(|v| 1.0 / v).collect(), &[1, 3, 1, 1]);
        x = x.sub(&mean).mul(&inv_std);
        let last = self.taps[self.taps.len() - 1];
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, l) in self.layers.iter().enumerate().take(last + 1) {
            x = match l {
                Layer::Conv(c) => {
                    let w = self.weights.get(&format!("features.{i}.weight"));
                    let b = self.weights.get(&format!("features.{i}.bias"));
                    x.conv2d(w, 1, 1).add(&b.reshape(&[1, *c, 1, 1]))
                }
                Layer::Relu => x.relu(),
                Layer::Pool => x.max_pool2(),
            };
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
        }
        debug_assert_eq!(out[0].dim(0), n);
        Ok(out)
    }

    /// Per-image embedding: spatially averaged tap features, concatenated.
    pub fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let feats = dhvae_autograd::no_grad(|| self.extract(images))?;
        let n = images.dim(0);
        let mut rows = vec![Vec::new(); n];
        for f in &feats {
            let pooled = f.mean_axes(&[2, 3], false);
            let c = pooled.dim(1);
            for (i, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(&pooled.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(rows)
    }
}

/// Interpolation matrix `[out, inp]` for align-corners-false bilinear resizing.
fn resize_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[o * inp + i0] += 1.0 - t;
        m[o * inp + i1] += t;
    }
    m
}

/// Bilinear resize of `[N, C, H, W]` as two constant matrix products.
pub fn bilinear_resize(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape().to_vec();
    let (nc, hi, wi) = (s[0] * s[1], s[2], s[3]);
    let rh = Tensor::from_vec(resize_matrix(h, hi), &[h, hi]);
    let rw = Tensor::from_vec(resize_matrix(w, wi), &[w, wi]);
    // rows: [nc*hi, wi] x rw^T -> [nc*hi, w]
    let y = x.reshape(&[nc * hi, wi]).matmul_t(&rw, false, true);
    // columns: per image rh x [hi, w]
    let y = y.reshape(&[nc, hi, w]);
    let rhb = rh.reshape(&[1, h, hi]).broadcast_to(&[nc, h, hi]);
    rhb.matmul(&y).reshape(&[s[0], s[1], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taps_and_determinism() {
        let fx = FeatureExtractor::build(&ExtractorConfig::default()).unwrap();
        assert_eq!(fx.taps().len(), 4);
        let x = Tensor::from_vec((0..2 * 256).map(|i| (i % 7) as f64 / 7.0).collect(), &[2, 1, 16, 16]);
        let a = fx.extract(&x).unwrap();
        let b = FeatureExtractor::build(&ExtractorConfig::default()).unwrap().extract(&x).unwrap();
        assert_eq!(a.len(), 4);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.data(), q.data());
        }
        assert_eq!(a[0].shape(), &[2, 8, 16, 16]);
        assert_eq!(a[3].shape(), &[2, 64, 2, 2]);
    }

    #[test]
    fn bad_taps_and_shapes() {
        assert!(FeatureExtractor::fixed_random(0, &[7, 2], 8, None).is_err());
        assert!(FeatureExtractor::fixed_random(0, &[40], 8, None).is_err());
        let fx = FeatureExtractor::fixed_random(0, &DEFAULT_TAPS, 8, None).unwrap();
        assert!(fx.extract(&Tensor::zeros(&[1, 1, 12, 12])).is_err());
        assert!(fx.extract(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn weights_are_frozen() {
        let fx = FeatureExtractor::fixed_random(0, &DEFAULT_TAPS, 8, None).unwrap();
        assert!(fx.weights.tensors().iter().all(|t| !t.requires_grad()));
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_identity() {
        let x = Tensor::full(&[1, 1, 4, 6], 0.25);
        let y = bilinear_resize(&x, 8, 3);
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let r = Tensor::from_vec((0..12).map(f64::from).collect(), &[1, 1, 3, 4]);
        assert_eq!(bilinear_resize(&r, 3, 4).data(), r.data());
    }

    #[test]
    fn pretrained_missing_file_is_error() {
        assert!(FeatureExtractor::pretrained("/nonexistent/x.ckpt", &DEFAULT_TAPS, None).is_err());
    }
}
