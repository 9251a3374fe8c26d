//! Image-fidelity, distribution and overlap metrics, plus the CSV report
//! they are collected into.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use dhvae_autograd::{no_grad, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2, ArrayViewD};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;

/// Norm guard for unit-normalizing feature vectors.
pub const LPIPS_NORM_EPS: f64 = 1e-10;
pub const DEFAULT_DIVERGENCE_EPS: f64 = 1e-6;

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// Peak signal-to-noise ratio in decibels; `+∞` when the inputs agree.
pub fn psnr(a: ArrayViewD<f64>, b: ArrayViewD<f64>, max_val: f64) -> Result<f64> {
    same_shape(a.shape(), b.shape(), "psnr")?;
    if !(max_val > 0.0) {
        return Err(Error::Domain(format!("psnr max_val must be positive, got {max_val}")));
    }
    if a.is_empty() {
        return Err(Error::InsufficientSamples("psnr of empty arrays".into()));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_val / mse.sqrt()).log10()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<EmbeddingStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("covariance needs at least 2 embeddings, got {n}")));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Shape(format!("embedding widths {d} and {}", r.len())));
    }
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(EmbeddingStats { mean, covariance: cov })
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetric(m));
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. The cross term uses
/// `Tr((Σr Σf)^½) = Tr((Σr^½ Σf Σr^½)^½)`, which keeps every
/// decomposition symmetric.
pub fn fid(r: &EmbeddingStats, f: &EmbeddingStats) -> Result<f64> {
    if r.dim() != f.dim() {
        return Err(Error::Shape(format!("fid: dimensions {} and {}", r.dim(), f.dim())));
    }
    let diff = (&r.mean - &f.mean).norm_squared();
    let sr = psd_sqrt(&r.covariance);
    let inner = symmetric(&(&sr * &f.covariance * &sr));
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let v = diff + r.covariance.trace() + f.covariance.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

fn unit_normalize(f: &Tensor) -> Vec<f64> {
    let s = f.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = f.data();
    let mut out = d.to_vec();
    for b in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + p;
            let norm = (0..c).map(|k| d[idx(k)] * d[idx(k)]).sum::<f64>().sqrt() + LPIPS_NORM_EPS;
            for k in 0..c {
                out[idx(k)] /= norm;
            }
        }
    }
    out
}

/// Per-pair perceptual distances between the images of two `[N, 1, H, W]`
/// batches: unit-normalized feature differences, squared and summed over
/// channels, averaged over positions, summed over tap layers.
pub fn lpips_pairs(a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<Vec<f64>> {
    same_shape(a.shape(), b.shape(), "lpips")?;
    let (fa, fb) = no_grad(|| -> Result<_> { Ok((fx.extract(a)?, fx.extract(b)?)) })?;
    let n = a.dim(0);
    let mut dist = vec![0.0; n];
    for (ta, tb) in fa.iter().zip(&fb) {
        let s = ta.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let (ua, ub) = (unit_normalize(ta), unit_normalize(tb));
        for (i, d) in dist.iter_mut().enumerate() {
            let lo = i * c * hw;
            let sq: f64 = ua[lo..lo + c * hw].iter().zip(&ub[lo..lo + c * hw]).map(|(x, y)| (x - y) * (x - y)).sum();
            *d += sq / hw as f64;
        }
    }
    Ok(dist)
}

/// Mean of [`lpips_pairs`].
pub fn lpips(a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<f64> {
    let d = lpips_pairs(a, b, fx)?;
    if d.is_empty() {
        return Err(Error::InsufficientSamples("lpips of an empty batch".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelClassDistribution {
    pub prob: Array2<f64>,
    pub n_masks: usize,
}

/// Per-pixel foreground frequency over a set of binary masks.
pub fn pixel_class_distribution<'a>(masks: impl IntoIterator<Item = ArrayView2<'a, u8>>) -> Result<PixelClassDistribution> {
    let mut acc: Option<Array2<f64>> = None;
    let mut n = 0usize;
    for m in masks {
        let a = acc.get_or_insert_with(|| Array2::zeros(m.raw_dim()));
        same_shape(a.shape(), m.shape(), "mask distribution")?;
        a.zip_mut_with(&m, |p, &v| {
            if v != 0 {
                *p += 1.0
            }
        });
        n += 1;
    }
    let prob = acc.ok_or_else(|| Error::InsufficientSamples("pixel class distribution of an empty mask set".into()))?;
    Ok(PixelClassDistribution { prob: prob / n as f64, n_masks: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DivergenceMode {
    Kld,
    Jsd,
}

impl fmt::Display for DivergenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceMode::Kld => "KLD",
            DivergenceMode::Jsd => "JSD",
        })
    }
}

impl FromStr for DivergenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "KLD" => Ok(DivergenceMode::Kld),
            "JSD" => Ok(DivergenceMode::Jsd),
            _ => Err(Error::Config(format!("unknown divergence {s:?}"))),
        }
    }
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Mean per-pixel Bernoulli divergence between smoothed foreground
/// probabilities `p' = (p + eps) / (1 + 2 eps)`.
pub fn divergence(p: &PixelClassDistribution, q: &PixelClassDistribution, mode: DivergenceMode, eps: f64) -> Result<f64> {
    same_shape(p.prob.shape(), q.prob.shape(), "divergence")?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("divergence eps must be positive, got {eps}")));
    }
    let smooth = |x: f64| (x + eps) / (1.0 + 2.0 * eps);
    let total: f64 = p
        .prob
        .iter()
        .zip(q.prob.iter())
        .map(|(&a, &b)| {
            let (a, b) = (smooth(a), smooth(b));
            match mode {
                DivergenceMode::Kld => bernoulli_kl(a, b),
                DivergenceMode::Jsd => {
                    let m = 0.5 * (a + b);
                    0.5 * bernoulli_kl(a, m) + 0.5 * bernoulli_kl(b, m)
                }
            }
        })
        .sum();
    Ok(total / p.prob.len() as f64)
}

/// Dice overlap of two binary arrays (nonzero is foreground); two empty
/// masks score 1.
pub fn dsc(pred: ArrayViewD<u8>, gt: ArrayViewD<u8>) -> Result<f64> {
    same_shape(pred.shape(), gt.shape(), "dsc")?;
    let (inter, total) = dice_counts(pred.iter().copied(), gt.iter().copied());
    Ok(dice_from_counts(inter, total))
}

/// `(|A ∩ B|, |A| + |B|)` for paired binary streams.
pub fn dice_counts(pred: impl Iterator<Item = u8>, gt: impl Iterator<Item = u8>) -> (u64, u64) {
    pred.zip(gt).fold((0, 0), |(i, t), (p, g)| {
        let (p, g) = (p != 0, g != 0);
        (i + (p && g) as u64, t + p as u64 + g as u64)
    })
}

pub fn dice_from_counts(inter: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

/// Named metric values with their provenance. The CSV carries the
/// per-row columns; extractor identity and preprocessing go into a TOML
/// sidecar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub seed: u64,
    pub config_hash: String,
    pub backbone: Option<String>,
    pub preprocessing: Option<String>,
}

pub const METRICS_COLUMNS: [&str; 6] = ["metric", "value", "n_real", "n_synth", "seed", "config_hash"];

impl MetricsReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        MetricsReport { rows: Vec::new(), seed, config_hash: config_hash.into(), backbone: None, preprocessing: None }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64, n_real: usize, n_synth: usize) {
        self.rows.push(MetricRow { metric: metric.into(), value, n_real, n_synth });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Config(format!("metrics csv: {e}"));
        w.write_record(METRICS_COLUMNS).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.metric.clone(),
                r.value.to_string(),
                r.n_real.to_string(),
                r.n_synth.to_string(),
                self.seed.to_string(),
                self.config_hash.clone(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("metrics csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.csv` and, when extractor details are known,
    /// `<stem>.meta.toml` next to it.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let path = csv_path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))?;
        if self.backbone.is_some() || self.preprocessing.is_some() {
            let mut t = toml::Table::new();
            if let Some(b) = &self.backbone {
                t.insert("backbone".into(), b.clone().into());
            }
            if let Some(p) = &self.preprocessing {
                t.insert("preprocessing".into(), p.clone().into());
            }
            t.insert("seed".into(), (self.seed as i64).into());
            t.insert("config_hash".into(), self.config_hash.clone().into());
            let meta = path.with_extension("meta.toml");
            fs::write(&meta, toml::to_string(&t).expect("table serializes")).map_err(|e| Error::io(&meta, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};

    #[test]
    fn psnr_examples() {
        let a = Array1::from(vec![0.0, 0.5]).into_dyn();
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        let b = Array1::from(vec![0.0]).into_dyn();
        assert!(psnr(a.view(), b.view(), 1.0).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(matches!(gaussian_stats(&[vec![1.0]]), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn fid_examples() {
        let uni = |m: f64, v: f64| EmbeddingStats { mean: DVector::from_element(1, m), covariance: DMatrix::from_element(1, 1, v) };
        assert!((fid(&uni(0.0, 1.0), &uni(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((fid(&uni(0.0, 1.0), &uni(0.0, 9.0)).unwrap() - 4.0).abs() < 1e-12);
        let s = gaussian_stats(&[vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 3.0], vec![2.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        assert!(fid(&s, &s).unwrap() <= 1e-6);
    }

    #[test]
    fn divergence_examples() {
        let d = |v: f64| PixelClassDistribution { prob: Array2::from_elem((3, 3), v), n_masks: 1 };
        assert!(divergence(&d(0.3), &d(0.3), DivergenceMode::Jsd, 1e-6).unwrap().abs() < 1e-15);
        let j = divergence(&d(1.0), &d(0.0), DivergenceMode::Jsd, 1e-12).unwrap();
        assert!((j - 2f64.ln()).abs() < 1e-9);
        let a = divergence(&d(0.2), &d(0.7), DivergenceMode::Kld, 1e-6).unwrap();
        let b = divergence(&d(0.7), &d(0.2), DivergenceMode::Kld, 1e-6).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn distribution_and_dsc_examples() {
        let one = Array2::<u8>::ones((2, 2));
        let zero = Array2::<u8>::zeros((2, 2));
        let p = pixel_class_distribution([one.view(), zero.view()]).unwrap();
        assert!(p.prob.iter().all(|&v| v == 0.5));
        assert_eq!(p.n_masks, 2);
        assert!(pixel_class_distribution(std::iter::empty()).is_err());
        let pred = arr2(&[[1u8, 1, 0, 0]]).into_dyn();
        let gt = arr2(&[[1u8, 1, 1, 1]]).into_dyn();
        assert!((dsc(pred.view(), gt.view()).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dsc(zero.view().into_dyn(), zero.view().into_dyn()).unwrap(), 1.0);
    }

    #[test]
    fn report_csv_columns() {
        let mut r = MetricsReport::new(5, "abc");
        r.push("psnr", f64::INFINITY, 3, 3);
        r.push("fid", 0.25, 3, 4);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv, "metric,value,n_real,n_synth,seed,config_hash\npsnr,inf,3,3,5,abc\nfid,0.25,3,4,5,abc\n");
    }
}
