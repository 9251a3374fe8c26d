//! Hamiltonian ELBO, perceptual and pixel reconstruction terms, the
//! adversarial terms and their weighted combination.

use std::cell::RefCell;
use std::fmt;

use dhvae_autograd::functional::binary_cross_entropy;
use dhvae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::hmc::{evolve, kinetic_energy, log_std_normal, sample_momentum, LeapfrogParams, LogLikelihood, PhaseState, Potential, LN_2PI};
use crate::networks::{reparameterize, Decoded, Discriminator, Generator, LatentGaussian};
use crate::util::{derive_seed, standard_normals};

/// Probability clamp used by every cross-entropy.
pub const DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ImageLikelihood {
    /// Pixelwise binary cross-entropy against intensities in `[0, 1]`.
    Bernoulli,
    /// Isotropic Gaussian with fixed standard deviation.
    Gaussian { sigma: f64 },
}

/// How the final-state density term of the Hamiltonian ELBO is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyTerm {
    /// Encoder density of `z0` carried through the volume-preserving flow:
    /// `log q(z0) − log N(zK; 0, I)`, plus the kinetic change
    /// `½ρKᵀM⁻¹ρK − ½ρ0ᵀM⁻¹ρ0`.
    Flow,
    /// Encoder Gaussian evaluated directly at `zK`:
    /// `log N(zK; μ, σ²) − log N(zK; 0, I)`, with kinetic term `½ρKᵀM⁻¹ρK`.
    Literal,
}

/// `α` with `β = 1 − α` derived, and the warm-up length gating the
/// adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    alpha: f64,
    pub warmup_iters: u64,
}

impl LossWeights {
    pub fn new(alpha: f64, warmup_iters: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(LossWeights { alpha, warmup_iters })
    }

    pub fn from_beta(beta: f64, warmup_iters: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
        }
        Self::new(1.0 - beta, warmup_iters)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    /// Whether the adversarial terms are active at `iteration`.
    pub fn adversarial_active(&self, iteration: u64) -> bool {
        iteration >= self.warmup_iters
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.99, warmup_iters: 1000 }
    }
}

/// Scalar loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub iteration: u64,
    pub disc_disc: f64,
    pub disc_gen: f64,
    pub elbo_h: f64,
    pub feature: f64,
    pub global: f64,
    pub kinetic: f64,
    pub kl_or_entropy: f64,
    pub l1: f64,
    pub recon_image: f64,
    pub recon_mask: f64,
}

pub const LOSS_COLUMNS: [&str; 11] = [
    "iteration",
    "disc_disc",
    "disc_gen",
    "elbo_h",
    "feature",
    "global",
    "kinetic",
    "kl_or_entropy",
    "l1",
    "recon_image",
    "recon_mask",
];

impl LossReport {
    fn values(&self) -> [f64; 10] {
        [
            self.disc_disc,
            self.disc_gen,
            self.elbo_h,
            self.feature,
            self.global,
            self.kinetic,
            self.kl_or_entropy,
            self.l1,
            self.recon_image,
            self.recon_mask,
        ]
    }

    pub fn csv_header() -> String {
        LOSS_COLUMNS.join(",")
    }

    /// Row in [`LOSS_COLUMNS`] order; floats use the shortest exact form.
    pub fn csv_row(&self) -> String {
        let mut s = self.iteration.to_string();
        for v in self.values() {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != LOSS_COLUMNS.len() {
            return Err(Error::Config(format!("loss row has {} fields, expected {}", f.len(), LOSS_COLUMNS.len())));
        }
        let bad = |s: &str| Error::Config(format!("bad loss field {s:?}"));
        let mut v = [0.0; 10];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| bad(s))?;
        }
        Ok(LossReport {
            iteration: f[0].parse().map_err(|_| bad(f[0]))?,
            disc_disc: v[0],
            disc_gen: v[1],
            elbo_h: v[2],
            feature: v[3],
            global: v[4],
            kinetic: v[5],
            kl_or_entropy: v[6],
            l1: v[7],
            recon_image: v[8],
            recon_mask: v[9],
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.values().iter().position(|v| !v.is_finite()).map(|i| LOSS_COLUMNS[i + 1])
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "it {} global {:.4} elbo_h {:.4} (img {:.4} mask {:.4} kl {:.4} kin {:.4}) feat {:.4} l1 {:.4} gen {:.4} disc {:.4}",
            self.iteration,
            self.global,
            self.elbo_h,
            self.recon_image,
            self.recon_mask,
            self.kl_or_entropy,
            self.kinetic,
            self.feature,
            self.l1,
            self.disc_gen,
            self.disc_disc
        )
    }
}

/// Gated combination of the components. The same expression (and
/// evaluation order) is used for the training objective, so recomputing
/// from logged values reproduces the logged total.
pub fn global_loss(elbo_h: f64, feature: f64, l1: f64, disc_gen: f64, w: &LossWeights, iteration: u64) -> f64 {
    if w.adversarial_active(iteration) {
        w.alpha() * elbo_h + w.beta() * (disc_gen + (feature + l1))
    } else {
        w.alpha() * elbo_h + w.beta() * (feature + l1)
    }
}

pub fn global_loss_of(r: &LossReport, w: &LossWeights) -> f64 {
    global_loss(r.elbo_h, r.feature, r.l1, r.disc_gen, w, r.iteration)
}

fn global_loss_tensor(elbo_h: &Tensor, feature: &Tensor, l1: &Tensor, disc_gen: &Tensor, w: &LossWeights, iteration: u64) -> Tensor {
    let rec = feature.add(l1);
    let reg = if w.adversarial_active(iteration) { disc_gen.add(&rec) } else { rec };
    elbo_h.mul_scalar(w.alpha()).add(&reg.mul_scalar(w.beta()))
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("{what} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Log-likelihoods of image and mask, each summed over every pixel of the
/// batch.
pub fn recon_log_likelihood(x: &Tensor, m: &Tensor, image_out: &Tensor, mask_prob: &Tensor, kind: ImageLikelihood) -> Result<(Tensor, Tensor)> {
    check_unit_range(x, "image target")?;
    check_unit_range(m, "mask target")?;
    if x.shape() != image_out.shape() || m.shape() != mask_prob.shape() {
        return Err(Error::Shape(format!("targets {:?}/{:?} vs predictions {:?}/{:?}", x.shape(), m.shape(), image_out.shape(), mask_prob.shape())));
    }
    let ll_img = match kind {
        ImageLikelihood::Bernoulli => binary_cross_entropy(image_out, x, DELTA).sum_all().neg(),
        ImageLikelihood::Gaussian { sigma } => {
            let n = x.numel() as f64;
            x.sub(image_out)
                .square()
                .sum_all()
                .mul_scalar(-0.5 / (sigma * sigma))
                .add_scalar(-0.5 * n * (LN_2PI + 2.0 * sigma.ln()))
        }
    };
    let ll_mask = binary_cross_entropy(mask_prob, m, DELTA).sum_all().neg();
    Ok((ll_img, ll_mask))
}

/// Decoder likelihood `log p(x, m | z)` for fixed targets. Remembers the
/// decoder output of its last evaluation so the final leapfrog position
/// does not need a second decode.
pub struct DecoderLikelihood<'a> {
    gen: &'a Generator,
    x: Tensor,
    m: Tensor,
    kind: ImageLikelihood,
    last: RefCell<Option<(Tensor, Decoded)>>,
}

impl<'a> DecoderLikelihood<'a> {
    pub fn new(gen: &'a Generator, x: &Tensor, m: &Tensor, kind: ImageLikelihood) -> Self {
        DecoderLikelihood { gen, x: x.clone(), m: m.clone(), kind, last: RefCell::new(None) }
    }

    /// Decoder output at `z`, reused from the last evaluation when possible.
    pub fn decoded_at(&self, z: &Tensor) -> Result<Decoded> {
        if let Some((zc, d)) = self.last.borrow().as_ref() {
            if zc.same_as(z) {
                return Ok(d.clone());
            }
        }
        self.gen.decode(z)
    }
}

impl LogLikelihood for DecoderLikelihood<'_> {
    fn log_likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.gen.decode(z)?;
        for (t, what) in [(&d.image, "decoded image"), (&d.mask, "decoded mask")] {
            if !t.all_finite() {
                let bad = t.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::numeric("decoder", format!("{what}: {bad} non-finite values")));
            }
        }
        let (li, lm) = recon_log_likelihood(&self.x, &self.m, &d.image, &d.mask, self.kind)?;
        *self.last.borrow_mut() = Some((z.clone(), d));
        Ok(li.add(&lm))
    }
}

/// Graph-carrying pieces of the Hamiltonian ELBO for one batch, each a
/// batch mean.
pub struct ElboTerms {
    pub recon_image: Tensor,
    pub recon_mask: Tensor,
    pub kl_or_entropy: Tensor,
    pub kinetic: Tensor,
    pub elbo_h: Tensor,
    pub decoded: Decoded,
    pub latent: LatentGaussian,
    pub z_k: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboOptions {
    pub likelihood: ImageLikelihood,
    pub entropy: EntropyTerm,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions { likelihood: ImageLikelihood::Bernoulli, entropy: EntropyTerm::Flow }
    }
}

/// `log q(z0)` of the reparameterized sample `z0 = μ + σ ε`, summed.
fn log_q0(lat: &LatentGaussian, eps0: &Tensor) -> Tensor {
    let n = eps0.numel() as f64;
    lat.log_variance
        .sum_all()
        .mul_scalar(-0.5)
        .sub(&eps0.square().sum_all().mul_scalar(0.5))
        .add_scalar(-0.5 * LN_2PI * n)
}

/// `log N(z; μ, σ²)` under the encoder Gaussian, summed.
fn log_encoder_density(lat: &LatentGaussian, z: &Tensor) -> Tensor {
    let n = z.numel() as f64;
    let sq = z.sub(&lat.mean).square().mul(&lat.log_variance.neg().exp());
    lat.log_variance.add(&sq).sum_all().mul_scalar(-0.5).add_scalar(-0.5 * LN_2PI * n)
}

/// Single-sample Hamiltonian ELBO estimate, negated (a loss), for images
/// and masks of shape `[N, 1, H, W]`. Noise is drawn from `seed`.
pub fn hvae_elbo(gen: &Generator, lf: &LeapfrogParams, x: &Tensor, m: &Tensor, seed: u64, opts: ElboOptions) -> Result<ElboTerms> {
    let n = x.dim(0) as f64;
    let latent = gen.encode(x, m)?;
    let shape = latent.mean.shape().to_vec();
    let eps0 = Tensor::from_vec(standard_normals(derive_seed(seed, &[1]), latent.mean.numel()), &shape);
    let z0 = reparameterize(&latent, &eps0)?;
    let rho0 = sample_momentum(lf.mass().data(), &shape, derive_seed(seed, &[2]))?;

    let potential = Potential::new(DecoderLikelihood::new(gen, x, m, opts.likelihood));
    let mut gradfn = |z: &Tensor| potential.grad(z);
    let (end, _) = evolve(&PhaseState::new(z0, rho0.clone())?, lf, &mut gradfn, false)?;
    let decoded = potential.likelihood.decoded_at(&end.z)?;
    let (ll_img, ll_mask) = recon_log_likelihood(x, m, &decoded.image, &decoded.mask, opts.likelihood)?;

    let kin_k = kinetic_energy(&end.rho, lf.mass());
    let log_p_zk = log_std_normal(&end.z);
    let (kl, kinetic) = match opts.entropy {
        EntropyTerm::Flow => (log_q0(&latent, &eps0).sub(&log_p_zk), kin_k.sub(&kinetic_energy(&rho0, lf.mass()))),
        EntropyTerm::Literal => (log_encoder_density(&latent, &end.z).sub(&log_p_zk), kin_k),
    };
    let inv_n = 1.0 / n;
    let recon_image = ll_img.neg().mul_scalar(inv_n);
    let recon_mask = ll_mask.neg().mul_scalar(inv_n);
    let kl_or_entropy = kl.mul_scalar(inv_n);
    let kinetic = kinetic.mul_scalar(inv_n);
    let elbo_h = recon_image.add(&recon_mask).add(&kl_or_entropy).add(&kinetic);
    for (t, name) in [(&recon_image, "recon_image"), (&recon_mask, "recon_mask"), (&kl_or_entropy, "kl_or_entropy"), (&kinetic, "kinetic")] {
        if !t.all_finite() {
            return Err(Error::numeric(name, format!("value {}", t.item())));
        }
    }
    Ok(ElboTerms { recon_image, recon_mask, kl_or_entropy, kinetic, elbo_h, decoded, latent, z_k: end.z })
}

/// Perceptual term `Σ_j ‖φ_j(x̂) − φ_j(x)‖²` (batch mean) and mean absolute
/// pixel error.
pub fn feature_recon_loss(x_hat: &Tensor, x: &Tensor, fx: &FeatureExtractor) -> Result<(Tensor, Tensor)> {
    if x_hat.shape() != x.shape() {
        return Err(Error::Shape(format!("x_hat {:?} vs x {:?}", x_hat.shape(), x.shape())));
    }
    let n = x.dim(0) as f64;
    let fa = fx.extract(x_hat)?;
    let fb = fx.extract(x)?;
    let mut feature = Tensor::scalar(0.0);
    for (a, b) in fa.iter().zip(&fb) {
        feature = feature.add(&a.sub(b).square().sum_all());
    }
    let l1 = x_hat.sub(x).abs().mean_all();
    Ok((feature.mul_scalar(1.0 / n), l1))
}

/// Discriminator objective `−mean log D(real) − mean log(1 − D(fake))` and
/// the non-saturating generator objective `−mean log D(fake)`, from patch
/// logits.
pub fn adversarial_from_logits(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    if !real_logits.all_finite() || !fake_logits.all_finite() {
        return Err(Error::numeric("discriminator", "non-finite patch logits"));
    }
    let d_real = real_logits.sigmoid().clamp(DELTA, 1.0 - DELTA);
    let d_fake = fake_logits.sigmoid().clamp(DELTA, 1.0 - DELTA);
    let disc = d_real.ln().mean_all().add(&d_fake.neg().add_scalar(1.0).ln().mean_all()).neg();
    let gen = d_fake.ln().mean_all().neg();
    Ok((disc, gen))
}

pub fn adversarial_losses(d: &Discriminator, real: (&Tensor, &Tensor), fake: (&Tensor, &Tensor)) -> Result<(Tensor, Tensor)> {
    let r = d.discriminate(real.0, real.1)?;
    let f = d.discriminate(fake.0, fake.1)?;
    adversarial_from_logits(&r, &f)
}

/// Everything one training iteration needs from the forward pass.
pub struct IterationLosses {
    pub report: LossReport,
    /// Generator objective (depends on encoder, decoder and log ε).
    pub global: Tensor,
    /// Discriminator objective (depends on the discriminator parameters).
    pub disc_term: Tensor,
}

/// Forward pass of the full objective. `z_prior` feeds the decoder for the
/// fake samples seen by the discriminator.
#[allow(clippy::too_many_arguments)]
pub fn iteration_losses(
    gen: &Generator,
    disc: &Discriminator,
    lf: &LeapfrogParams,
    fx: &FeatureExtractor,
    x: &Tensor,
    m: &Tensor,
    z_prior: &Tensor,
    w: &LossWeights,
    iteration: u64,
    seed: u64,
    opts: ElboOptions,
) -> Result<IterationLosses> {
    let terms = hvae_elbo(gen, lf, x, m, seed, opts)?;
    let (feature, l1) = feature_recon_loss(&terms.decoded.image, x, fx)?;
    let active = w.adversarial_active(iteration);
    let adv = || -> Result<(Tensor, Tensor)> {
        let fake = gen.decode(z_prior)?;
        adversarial_losses(disc, (x, m), (&fake.image, &fake.mask))
    };
    let (disc_term, gen_term) = if active { adv()? } else { dhvae_autograd::no_grad(adv)? };
    let global = global_loss_tensor(&terms.elbo_h, &feature, &l1, &gen_term, w, iteration);
    let report = LossReport {
        iteration,
        disc_disc: disc_term.item(),
        disc_gen: gen_term.item(),
        elbo_h: terms.elbo_h.item(),
        feature: feature.item(),
        global: global.item(),
        kinetic: terms.kinetic.item(),
        kl_or_entropy: terms.kl_or_entropy.item(),
        l1: l1.item(),
        recon_image: terms.recon_image.item(),
        recon_mask: terms.recon_mask.item(),
    };
    if let Some(name) = report.first_non_finite() {
        return Err(Error::numeric(name, format!("non-finite loss component at iteration {iteration}")));
    }
    Ok(IterationLosses { report, global, disc_term })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), &[1, 1, 1, v.len()])
    }

    #[test]
    fn recon_examples() {
        let ones = t(&[1.0; 16]);
        let (_, lm) = recon_log_likelihood(&ones, &ones, &t(&[0.5; 16]), &t(&[1.0 - DELTA; 16]), ImageLikelihood::Bernoulli).unwrap();
        assert!(-lm.item() <= 16.0 * 2e-6 && -lm.item() >= 0.0);
        let (_, lm) = recon_log_likelihood(&ones, &t(&[0.0; 16]), &t(&[0.5; 16]), &t(&[0.5; 16]), ImageLikelihood::Bernoulli).unwrap();
        assert!((-lm.item() - 16.0 * 2f64.ln()).abs() < 1e-12);
        let (li, _) = recon_log_likelihood(&t(&[0.3]), &t(&[1.0]), &t(&[0.3]), &t(&[0.5]), ImageLikelihood::Bernoulli).unwrap();
        let entropy = -(0.3 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((-li.item() - entropy).abs() < 1e-12);
        assert!((entropy - 0.6109).abs() < 1e-4);
        assert!(recon_log_likelihood(&t(&[1.2]), &t(&[1.0]), &t(&[0.3]), &t(&[0.5]), ImageLikelihood::Bernoulli).is_err());
    }

    #[test]
    fn gaussian_likelihood_matches_density() {
        let (li, _) = recon_log_likelihood(&t(&[0.2, 0.9]), &t(&[0.0, 0.0]), &t(&[0.5, 0.5]), &t(&[0.5, 0.5]), ImageLikelihood::Gaussian { sigma: 0.5 }).unwrap();
        let dens = |x: f64| -0.5 * ((x - 0.5) / 0.5f64).powi(2) - 0.5 * LN_2PI - 0.5f64.ln();
        assert!((li.item() - dens(0.2) - dens(0.9)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_examples() {
        let zero = t(&[0.0; 4]);
        let (d, g) = adversarial_from_logits(&zero, &zero).unwrap();
        assert!((d.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.item() - 2f64.ln()).abs() < 1e-12);
        let (d, _) = adversarial_from_logits(&t(&[50.0; 4]), &t(&[-50.0; 4])).unwrap();
        assert!(d.item() <= 4e-6);
        assert!(adversarial_from_logits(&t(&[f64::NAN]), &zero).is_err());
    }

    #[test]
    fn weights_and_gating() {
        let w = LossWeights::new(1.0, 10).unwrap();
        assert_eq!(global_loss(2.0, 5.0, 7.0, 9.0, &w, 100), 2.0);
        let w = LossWeights::from_beta(0.01, 10).unwrap();
        assert_eq!(w.alpha() + w.beta(), 1.0);
        assert!((global_loss(2.0, 0.2, 0.1, 0.5, &w, 10) - 1.988).abs() < 1e-12);
        let before = global_loss(2.0, 0.2, 0.1, 1.0, &w, 9);
        let after = global_loss(2.0, 0.2, 0.1, 1.0, &w, 10);
        assert!((after - before - w.beta()).abs() < 1e-15);
        assert!(LossWeights::new(1.5, 0).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let r = LossReport { iteration: 3, disc_disc: 0.1, disc_gen: 1.0 / 3.0, elbo_h: 1234.5678, global: -0.0, ..LossReport::default() };
        assert_eq!(LossReport::parse_csv_row(&r.csv_row()).unwrap(), r);
        assert!(LossReport::csv_header().starts_with("iteration,disc_disc,disc_gen,elbo_h"));
    }
}
