//! Encoder/decoder generator, patch discriminator and tensor conversions.

use dhvae_autograd::{no_grad, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_io::SlicePair;
use crate::error::{Error, Result};
use crate::params::{attention, conv, norm, resblock, ws_conv, Init, ModelParams};
use crate::util::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image channels plus the mask channel.
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub max_filters: usize,
    pub latent_channels: usize,
    pub slice_shape: [usize; 2],
    /// Encoder block indices carrying self-attention; decoder blocks mirror
    /// them. Defaults to the deepest block.
    pub attention_at: Option<Vec<usize>>,
    pub disc_filters: usize,
    pub disc_depth: usize,
    /// Initialization seed; set by the caller (training uses its own seed).
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 2,
            base_filters: 32,
            depth: 4,
            max_filters: 128,
            latent_channels: 16,
            slice_shape: [64, 64],
            attention_at: None,
            disc_filters: 32,
            disc_depth: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels != 2 {
            return err(format!("in_channels must be 2 (image + mask), got {}", self.in_channels));
        }
        if self.depth == 0 || self.base_filters == 0 || self.latent_channels == 0 || self.disc_filters == 0 || self.disc_depth == 0 {
            return err("depth, filter counts and latent channels must be positive".into());
        }
        if self.max_filters < self.base_filters {
            return err(format!("max_filters {} < base_filters {}", self.max_filters, self.base_filters));
        }
        let [h, w] = self.slice_shape;
        for (what, d) in [("depth", self.depth), ("disc_depth", self.disc_depth)] {
            let f = 1usize << d;
            if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
                return err(format!("slice shape {h}x{w} is not divisible by 2^{what} = {f}"));
            }
        }
        if let Some(i) = self.attention_blocks().iter().find(|&&i| i >= self.depth) {
            return err(format!("attention block {i} out of range for depth {}", self.depth));
        }
        Ok(())
    }

    pub fn attention_blocks(&self) -> Vec<usize> {
        self.attention_at.clone().unwrap_or_else(|| vec![self.depth.saturating_sub(1)])
    }

    /// Filter count of encoder block `i` (and of decoder block depth-1-i).
    pub fn filters(&self, i: usize) -> usize {
        (self.base_filters << i).min(self.max_filters)
    }

    /// `[channels, h, w]` of the latent grid.
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = 1 << self.depth;
        [self.latent_channels, self.slice_shape[0] / f, self.slice_shape[1] / f]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn disc_map_shape(&self) -> [usize; 2] {
        let f = 1 << self.disc_depth;
        [self.slice_shape[0] / f, self.slice_shape[1] / f]
    }
}

/// Posterior parameters over the latent grid, batch-first `[N, C, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentGaussian {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// Decoder outputs, each `[N, 1, H, W]` in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: Tensor,
    pub mask: Tensor,
}

/// `z0 = mean + exp(log_variance / 2) * noise`.
pub fn reparameterize(g: &LatentGaussian, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != g.mean.shape() {
        return Err(Error::Shape(format!("noise {:?} vs mean {:?}", noise.shape(), g.mean.shape())));
    }
    Ok(g.mean.add(&g.log_variance.mul_scalar(0.5).exp().mul(noise)))
}

fn check_nchw(t: &Tensor, c: usize, hw: [usize; 2], what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != c || s[2] != hw[0] || s[3] != hw[1] {
        return Err(Error::Shape(format!("{what}: expected [N, {c}, {}, {}], got {s:?}", hw[0], hw[1])));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: ModelConfig,
    params: ModelParams,
}

impl Generator {
    /// Fresh parameters, deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[0x6e6e]));
        let mut init = Init::new(&mut rng, true);
        let att = cfg.attention_blocks();
        let lc = cfg.latent_channels;

        init.conv("enc.stem", cfg.filters(0), cfg.in_channels, 3, 1.0);
        let mut c = cfg.filters(0);
        for i in 0..cfg.depth {
            let f = cfg.filters(i);
            init.resblock(&format!("enc.{i}.res"), c, f);
            if att.contains(&i) {
                init.attention(&format!("enc.{i}.attn"), f);
            }
            init.conv(&format!("enc.{i}.down"), f, f, 3, 1.0);
            c = f;
        }
        init.norm("enc.out.norm", c);
        init.conv("enc.out.conv", 2 * lc, c, 3, 0.1);

        let top = cfg.filters(cfg.depth - 1);
        init.conv("dec.stem", top, lc, 3, 1.0);
        init.attention("latent.attn", top);
        c = top;
        for j in 0..cfg.depth {
            let mirror = cfg.depth - 1 - j;
            let f = cfg.filters(mirror);
            init.conv(&format!("dec.{j}.up"), f, c, 3, 1.0);
            init.resblock(&format!("dec.{j}.res"), f, f);
            if att.contains(&mirror) {
                init.attention(&format!("dec.{j}.attn"), f);
            }
            c = f;
        }
        init.norm("dec.out.norm", c);
        init.conv("dec.out.conv", 2, c, 3, 0.1);
        Ok(Generator { cfg: cfg.clone(), params: init.params })
    }

    /// Wraps existing parameters after checking them against the layout of `cfg`.
    pub fn from_params(cfg: &ModelConfig, params: &ModelParams) -> Result<Self> {
        let layout = Generator::init(cfg)?;
        let params = params.conform_to(&layout.params)?;
        Ok(Generator { cfg: cfg.clone(), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Encodes `[N, 1, H, W]` images and masks.
    pub fn encode(&self, image: &Tensor, mask: &Tensor) -> Result<LatentGaussian> {
        let hw = self.cfg.slice_shape;
        check_nchw(image, 1, hw, "encode image")?;
        check_nchw(mask, 1, hw, "encode mask")?;
        if image.dim(0) != mask.dim(0) {
            return Err(Error::Shape("image and mask batch sizes differ".into()));
        }
        let p = &self.params;
        let att = self.cfg.attention_blocks();
        let mut h = ws_conv(p, "enc.stem", &Tensor::cat(&[image.clone(), mask.clone()], 1), 1);
        for i in 0..self.cfg.depth {
            h = resblock(p, &format!("enc.{i}.res"), &h);
            if att.contains(&i) {
                h = attention(p, &format!("enc.{i}.attn"), &h);
            }
            h = ws_conv(p, &format!("enc.{i}.down"), &h, 2);
        }
        let out = conv(p, "enc.out.conv", &norm(p, "enc.out.norm", &h).swish(), 1);
        let lc = self.cfg.latent_channels;
        Ok(LatentGaussian { mean: out.narrow(1, 0, lc), log_variance: out.narrow(1, lc, lc) })
    }

    /// Decodes `[N, C, h, w]` latents.
    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        let [lc, lh, lw] = self.cfg.latent_shape();
        check_nchw(z, lc, [lh, lw], "decode latent")?;
        let p = &self.params;
        let att = self.cfg.attention_blocks();
        let mut h = conv(p, "dec.stem", z, 1);
        h = attention(p, "latent.attn", &h);
        for j in 0..self.cfg.depth {
            h = ws_conv(p, &format!("dec.{j}.up"), &h.upsample_nearest(2), 1);
            h = resblock(p, &format!("dec.{j}.res"), &h);
            if att.contains(&(self.cfg.depth - 1 - j)) {
                h = attention(p, &format!("dec.{j}.attn"), &h);
            }
        }
        let out = conv(p, "dec.out.conv", &norm(p, "dec.out.norm", &h).swish(), 1).sigmoid();
        Ok(Decoded { image: out.narrow(1, 0, 1), mask: out.narrow(1, 1, 1) })
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: ModelConfig,
    params: ModelParams,
}

impl Discriminator {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[0xd15c]));
        let mut init = Init::new(&mut rng, true);
        let mut c = cfg.in_channels;
        for k in 0..cfg.disc_depth {
            let f = cfg.disc_filters << k;
            init.conv(&format!("disc.{k}.conv"), f, c, 3, 1.0);
            init.norm(&format!("disc.{k}.norm"), f);
            c = f;
        }
        init.conv("disc.out", 1, c, 3, 1.0);
        Ok(Discriminator { cfg: cfg.clone(), params: init.params })
    }

    pub fn from_params(cfg: &ModelConfig, params: &ModelParams) -> Result<Self> {
        let layout = Discriminator::init(cfg)?;
        let params = params.conform_to(&layout.params)?;
        Ok(Discriminator { cfg: cfg.clone(), params })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Patch realness logits `[N, 1, H/2^k, W/2^k]` for an image/mask pair.
    pub fn discriminate(&self, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let hw = self.cfg.slice_shape;
        check_nchw(image, 1, hw, "discriminate image")?;
        check_nchw(mask, 1, hw, "discriminate mask")?;
        let p = &self.params;
        let mut h = Tensor::cat(&[image.clone(), mask.clone()], 1);
        for k in 0..self.cfg.disc_depth {
            h = ws_conv(p, &format!("disc.{k}.conv"), &h, 2);
            h = norm(p, &format!("disc.{k}.norm"), &h).leaky_relu(0.2);
        }
        Ok(conv(p, "disc.out", &h, 1))
    }
}

/// Stacks 2D arrays into a constant `[N, 1, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array2<f64>>) -> Tensor {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for im in images {
        shape.get_or_insert(im.dim());
        assert_eq!(Some(im.dim()), shape, "images must share a shape");
        data.extend(im.iter().copied());
        n += 1;
    }
    let (h, w) = shape.unwrap_or((0, 0));
    Tensor::from_vec(data, &[n, 1, h, w])
}

pub fn stack_masks<'a>(masks: impl IntoIterator<Item = &'a Array2<u8>>) -> Tensor {
    let owned: Vec<Array2<f64>> = masks.into_iter().map(|m| m.mapv(f64::from)).collect();
    stack_images(&owned)
}

/// Image and mask tensors for a batch of pairs.
pub fn pair_tensors(pairs: &[&SlicePair]) -> (Tensor, Tensor) {
    (stack_images(pairs.iter().map(|p| p.image())), stack_masks(pairs.iter().map(|p| p.mask())))
}

/// Splits a `[N, 1, H, W]` tensor back into 2D arrays.
pub fn unstack(t: &Tensor) -> Vec<Array2<f64>> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    t.data().chunks(h * w).map(|c| Array2::from_shape_vec((h, w), c.to_vec()).unwrap()).collect()
}

/// Posterior-mean reconstructions of `pairs`, without recording a graph.
pub fn reconstruct(gen: &Generator, pairs: &[&SlicePair]) -> Result<Decoded> {
    no_grad(|| {
        let (x, m) = pair_tensors(pairs);
        let g = gen.encode(&x, &m)?;
        gen.decode(&g.mean)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dhvae_autograd::grad;

    fn small() -> ModelConfig {
        ModelConfig {
            base_filters: 4,
            max_filters: 8,
            depth: 2,
            latent_channels: 2,
            slice_shape: [8, 8],
            disc_filters: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = Generator::init(&small()).unwrap();
        let b = Generator::init(&small()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Generator::init(&ModelConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn shape_arithmetic() {
        let cfg = ModelConfig { slice_shape: [64, 64], ..ModelConfig::default() };
        assert_eq!(cfg.latent_shape(), [16, 4, 4]);
        assert_eq!(cfg.disc_map_shape(), [8, 8]);
        let bad = ModelConfig { slice_shape: [60, 60], ..ModelConfig::default() };
        assert!(matches!(Generator::init(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn mirror_symmetric_filters() {
        let cfg = ModelConfig::default();
        let g = Generator::init(&cfg).unwrap();
        for i in 0..cfg.depth {
            let enc = g.params().get(&format!("enc.{i}.res.conv2.weight")).dim(0);
            let dec = g.params().get(&format!("dec.{}.res.conv2.weight", cfg.depth - 1 - i)).dim(0);
            assert_eq!(enc, dec);
        }
        assert!(g.params().try_get("enc.3.attn.q.weight").is_some());
        assert!(g.params().try_get("dec.0.attn.q.weight").is_some());
        assert!(g.params().try_get("enc.0.attn.q.weight").is_none());
    }

    #[test]
    fn encode_decode_shapes_and_ranges() {
        let g = Generator::init(&small()).unwrap();
        let x = Tensor::zeros(&[3, 1, 8, 8]);
        let lat = g.encode(&x, &x).unwrap();
        assert_eq!(lat.mean.shape(), &[3, 2, 2, 2]);
        assert!(lat.mean.all_finite() && lat.log_variance.all_finite());
        let d = g.decode(&lat.mean).unwrap();
        assert_eq!(d.image.shape(), &[3, 1, 8, 8]);
        assert!(d.image.data().iter().chain(d.mask.data()).all(|&v| v > 0.0 && v < 1.0));
        assert!(g.encode(&Tensor::zeros(&[1, 1, 8, 4]), &Tensor::zeros(&[1, 1, 8, 4])).is_err());
        assert!(g.decode(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn batch_matches_single_calls() {
        let g = Generator::init(&small()).unwrap();
        let vals: Vec<f64> = (0..2 * 64).map(|i| ((i * 17) % 23) as f64 / 23.0).collect();
        let x = Tensor::from_vec(vals, &[2, 1, 8, 8]);
        let m = x.clamp(0.5, 1.0).add_scalar(-0.5).mul_scalar(2.0);
        let both = g.encode(&x, &m).unwrap();
        for i in 0..2 {
            let one = g.encode(&x.narrow(0, i, 1), &m.narrow(0, i, 1)).unwrap();
            let k = one.mean.numel();
            for (a, b) in both.mean.data()[i * k..(i + 1) * k].iter().zip(one.mean.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn encoder_responds_to_single_pixel() {
        let g = Generator::init(&small()).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let mut v = x.to_vec();
        v[27] += 1e-3;
        let x2 = Tensor::from_vec(v, &[1, 1, 8, 8]);
        let m = Tensor::zeros(&[1, 1, 8, 8]);
        let a = g.encode(&x, &m).unwrap().mean;
        let b = g.encode(&x2, &m).unwrap().mean;
        assert!(a.data().iter().zip(b.data()).any(|(p, q)| p != q));
    }

    #[test]
    fn reparameterize_examples() {
        let g = LatentGaussian { mean: Tensor::full(&[1], 1.0), log_variance: Tensor::full(&[1], 4f64.ln()) };
        assert_eq!(reparameterize(&g, &Tensor::full(&[1], 0.0)).unwrap().item(), 1.0);
        assert_eq!(reparameterize(&g, &Tensor::full(&[1], 0.5)).unwrap().item(), 2.0);
        let u = LatentGaussian { mean: Tensor::full(&[1], 1.0), log_variance: Tensor::zeros(&[1]) };
        assert_eq!(reparameterize(&u, &Tensor::full(&[1], 0.25)).unwrap().item(), 1.25);
        assert!(reparameterize(&u, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn discriminator_map_shape_and_determinism() {
        let cfg = ModelConfig { slice_shape: [64, 64], base_filters: 4, max_filters: 8, disc_filters: 4, ..ModelConfig::default() };
        let d = Discriminator::init(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let s = d.discriminate(&x, &x).unwrap();
        assert_eq!(s.shape(), &[1, 1, 8, 8]);
        assert!(s.all_finite());
        assert_eq!(s.data(), d.discriminate(&x, &x).unwrap().data());
    }

    #[test]
    fn weight_standardized_kernels_have_unit_moments() {
        let g = Generator::init(&small()).unwrap();
        let w = g.params().get("enc.0.res.conv1.weight");
        let ws = dhvae_autograd::functional::weight_standardize(w, crate::params::WS_EPS);
        let per = ws.numel() / ws.dim(0);
        for row in ws.data().chunks(per) {
            let mean = row.iter().sum::<f64>() / per as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let cfg = ModelConfig { latent_channels: 1, ..small() };
        let g = Generator::init(&cfg).unwrap();
        let z0 = vec![0.3, -0.7, 1.1, 0.2];
        let f = |z: &Tensor| {
            let d = g.decode(z).unwrap();
            d.image.sum_all().add(&d.mask.sum_all())
        };
        let z = Tensor::param(z0.clone(), &[1, 1, 2, 2]);
        let an = grad(&f(&z), &[&z], false).remove(0);
        let h = 1e-5;
        for i in 0..4 {
            let mut p = z0.clone();
            p[i] += h;
            let mut m = z0.clone();
            m[i] -= h;
            let fd = (f(&Tensor::from_vec(p, &[1, 1, 2, 2])).item() - f(&Tensor::from_vec(m, &[1, 1, 2, 2])).item()) / (2.0 * h);
            let rel = (fd - an.data()[i]).abs() / an.data()[i].abs().max(1e-8);
            assert!(rel <= 1e-4, "dim {i}: fd {fd} vs analytic {}", an.data()[i]);
        }
    }
}
