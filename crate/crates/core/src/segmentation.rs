//! Slice-wise U-Net segmenter and volume-level evaluation by stacking
//! slice predictions.

use std::ops::Range;

use dhvae_autograd::functional::binary_cross_entropy;
use dhvae_autograd::{grad, no_grad, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_io::{slice_view, MaskVolume3D, SliceDataset, Volume3D, AXIAL};
use crate::error::{Error, Result};
use crate::losses::DELTA;
use crate::metrics::{dice_counts, dice_from_counts};
use crate::networks::{stack_images, stack_masks};
use crate::optim::{AdamConfig, AdamW};
use crate::params::{conv, norm, Init, ModelParams};
use crate::util::{derive_seed, mean_std, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; one pass over the data when unset.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig { depth: 4, base_filters: 16, epochs: 20, steps_per_epoch: None, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

impl SegConfig {
    pub fn validate(&self, slice_shape: (usize, usize)) -> Result<()> {
        if self.depth == 0 || self.base_filters == 0 || self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("segmenter depth, filters, epochs, steps and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("segmenter lr must be positive, got {}", self.lr)));
        }
        let f = 1 << self.depth;
        let (h, w) = slice_shape;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("slice shape {h}x{w} is not divisible by 2^depth = {f}")));
        }
        Ok(())
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

/// Trained U-Net weights with the configuration and slice shape they
/// belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct SegParams {
    cfg: SegConfig,
    slice_shape: (usize, usize),
    params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_dsc: f64,
}

fn block(p: &ModelParams, name: &str, x: &Tensor) -> Tensor {
    let h = norm(p, &format!("{name}.norm1"), &conv(p, &format!("{name}.conv1"), x, 1)).relu();
    norm(p, &format!("{name}.norm2"), &conv(p, &format!("{name}.conv2"), &h, 1)).relu()
}

fn init_block(init: &mut Init, name: &str, cin: usize, cout: usize) {
    init.conv(&format!("{name}.conv1"), cout, cin, 3, 1.0);
    init.norm(&format!("{name}.norm1"), cout);
    init.conv(&format!("{name}.conv2"), cout, cout, 3, 1.0);
    init.norm(&format!("{name}.norm2"), cout);
}

impl SegParams {
    pub fn init(cfg: &SegConfig, slice_shape: (usize, usize)) -> Result<Self> {
        cfg.validate(slice_shape)?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[0x5e9]));
        let mut init = Init::new(&mut rng, true);
        let mut cin = 1;
        for i in 0..cfg.depth {
            init_block(&mut init, &format!("enc.{i}"), cin, cfg.filters(i));
            cin = cfg.filters(i);
        }
        init_block(&mut init, "mid", cin, cfg.filters(cfg.depth));
        for i in (0..cfg.depth).rev() {
            init_block(&mut init, &format!("dec.{i}"), cfg.filters(i + 1) + cfg.filters(i), cfg.filters(i));
        }
        init.conv("out", 1, cfg.filters(0), 1, 1.0);
        Ok(SegParams { cfg: cfg.clone(), slice_shape, params: init.params })
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        self.slice_shape
    }

    /// Foreground logits for `[N, 1, H, W]` images.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.slice_shape {
            return Err(Error::Shape(format!("segmenter expects [N, 1, {}, {}], got {s:?}", self.slice_shape.0, self.slice_shape.1)));
        }
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x.clone();
        for i in 0..self.cfg.depth {
            h = block(p, &format!("enc.{i}"), &h);
            skips.push(h.clone());
            h = h.max_pool2();
        }
        h = block(p, "mid", &h);
        for i in (0..self.cfg.depth).rev() {
            h = Tensor::cat(&[h.upsample_nearest(2), skips[i].clone()], 1);
            h = block(p, &format!("dec.{i}"), &h);
        }
        Ok(conv(p, "out", &h, 1))
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        no_grad(|| Ok(self.logits(x)?.sigmoid()))
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let cfg = toml::Table::try_from(&self.cfg).map_err(|e| Error::Config(format!("segmenter config: {e}")))?;
        ckpt.meta.insert("segmenter".into(), toml::Value::Table(cfg));
        ckpt.meta.insert("slice_shape".into(), toml::Value::Array(vec![(self.slice_shape.0 as i64).into(), (self.slice_shape.1 as i64).into()]));
        ckpt.push_params("seg", &self.params);
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: SegConfig = ckpt
            .meta
            .get("segmenter")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint holds no segmenter".into()))?
            .try_into()
            .map_err(|e| Error::Config(format!("segmenter config: {e}")))?;
        let shape: Vec<usize> = ckpt
            .meta
            .get("slice_shape")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|v| v.as_integer()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let [h, w] = shape[..] else {
            return Err(Error::Config("checkpoint lacks a slice shape".into()));
        };
        let layout = SegParams::init(&cfg, (h, w))?;
        let params = ckpt.params("seg").conform_to(&layout.params)?;
        Ok(SegParams { cfg, slice_shape: (h, w), params })
    }
}

/// Mean pixelwise cross-entropy plus soft Dice loss over the batch.
pub fn segmentation_loss(logits: &Tensor, target: &Tensor) -> Tensor {
    let p = logits.sigmoid();
    let bce = binary_cross_entropy(&p, target, DELTA).mean_all();
    let inter = p.mul(target).sum_all().mul_scalar(2.0).add_scalar(1.0);
    let denom = p.sum_all().add(&target.sum_all()).add_scalar(1.0);
    bce.add(&inter.div(&denom).neg().add_scalar(1.0))
}

/// Trains a fresh U-Net on `ds`. Batches come from a seeded permutation
/// per pass over the data.
pub fn train_segmenter(ds: &SliceDataset, cfg: &SegConfig) -> Result<(SegParams, Vec<EpochStats>)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot train a segmenter on an empty dataset".into()));
    }
    let mut model = SegParams::init(cfg, ds.slice_shape())?;
    let adam = AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::for_params(adam, &model.params);
    let bs = cfg.batch_size.min(ds.len());
    let steps = cfg.steps_per_epoch.unwrap_or(ds.len().div_ceil(bs));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut inter, mut total) = (0.0, 0u64, 0u64);
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs {
                if cursor == order.len() {
                    order = (0..ds.len()).collect();
                    order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[0x5e9, pass])));
                    pass += 1;
                    cursor = 0;
                }
                batch.push(&ds.pairs()[order[cursor]]);
                cursor += 1;
            }
            let x = stack_images(batch.iter().map(|p| p.image()));
            let m = stack_masks(batch.iter().map(|p| p.mask()));
            let logits = model.logits(&x)?;
            let loss = segmentation_loss(&logits, &m);
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::numeric("segmentation loss", format!("epoch {epoch}: {lv}")));
            }
            let pred = logits.data().iter().map(|&v| u8::from(v >= 0.0)).collect::<Vec<_>>();
            let (i, t) = dice_counts(pred.into_iter(), m.data().iter().map(|&v| v as u8));
            inter += i;
            total += t;
            loss_sum += lv;
            let grads = grad(&loss, &model.params.tensors().iter().collect::<Vec<_>>(), false);
            opt.step_params(&mut model.params, &grads)?;
        }
        history.push(EpochStats { epoch, loss: loss_sum / steps as f64, train_dsc: dice_from_counts(inter, total) });
    }
    Ok((model, history))
}

/// Binary masks for `[N, 1, H, W]` images; probability 0.5 counts as
/// foreground.
pub fn predict_batch(p: &SegParams, images: &Tensor) -> Result<Vec<Array2<u8>>> {
    let probs = p.probabilities(images)?;
    let (h, w) = p.slice_shape;
    Ok(probs.data().chunks(h * w).map(|c| Array2::from_shape_vec((h, w), c.iter().map(|&v| u8::from(v >= 0.5)).collect()).unwrap()).collect())
}

pub fn predict_slice(p: &SegParams, image: &Array2<f64>) -> Result<Array2<u8>> {
    if image.dim() != p.slice_shape {
        return Err(Error::Shape(format!("slice {:?} vs trained shape {:?}", image.dim(), p.slice_shape)));
    }
    Ok(predict_batch(p, &stack_images([image]))?.remove(0))
}

/// Which axial slices of a test volume get predicted. The tumor-presence
/// classifier alternative is represented by [`SliceSelector::Range`] fed
/// from an external decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorPolicy {
    /// First through last ground-truth tumor slice.
    OracleExtent,
    /// Every slice.
    FullRange,
}

/// Axial slice range `[start, end)` covering the tumor, empty when the mask
/// has no foreground.
pub fn oracle_extent(gt: &MaskVolume3D) -> Range<usize> {
    let fg: Vec<usize> = gt.values().axis_iter(Axis(AXIAL)).enumerate().filter(|(_, s)| s.iter().any(|&v| v != 0)).map(|(k, _)| k).collect();
    match (fg.first(), fg.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => 0..0,
    }
}

impl SelectorPolicy {
    pub fn range(&self, vol: &Volume3D, gt: &MaskVolume3D) -> Range<usize> {
        match self {
            SelectorPolicy::OracleExtent => oracle_extent(gt),
            SelectorPolicy::FullRange => 0..vol.shape()[AXIAL],
        }
    }
}

/// Predicts the axial slices in `range` and stacks them into a mask
/// volume; the remaining slices are empty.
pub fn segment_volume(p: &SegParams, vol: &Volume3D, range: Range<usize>) -> Result<MaskVolume3D> {
    let [h, w, d] = vol.shape();
    if range.start > range.end || range.end > d {
        return Err(Error::Range(format!("slice range {range:?} outside volume depth {d}")));
    }
    let mut out = Array3::<u8>::zeros((h, w, d));
    if !range.is_empty() {
        let slices: Vec<Array2<f64>> = range.clone().map(|k| slice_view(vol.values(), k).to_owned()).collect();
        for (k, m) in range.zip(predict_batch(p, &stack_images(&slices))?) {
            out.index_axis_mut(Axis(AXIAL), k).assign(&m);
        }
    }
    MaskVolume3D::new(out, vol.spacing())
}

/// Per-subject volume Dice of the stacked predictions, with its mean and
/// sample standard deviation.
pub fn evaluate_dsc(p: &SegParams, test: &[(Volume3D, MaskVolume3D)], policy: SelectorPolicy) -> Result<(f64, f64, Vec<f64>)> {
    if test.is_empty() {
        return Err(Error::Config("evaluation needs at least one test subject".into()));
    }
    let mut scores = Vec::with_capacity(test.len());
    for (vol, gt) in test {
        gt.check_paired(vol)?;
        let pred = segment_volume(p, vol, policy.range(vol, gt))?;
        scores.push(crate::metrics::dsc(pred.values().view().into_dyn(), gt.values().view().into_dyn())?);
    }
    let (m, s) = mean_std(&scores);
    Ok((m, s, scores))
}
