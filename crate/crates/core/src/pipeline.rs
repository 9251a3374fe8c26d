//! Generator training, synthetic sampling, quality evaluation and the
//! augmentation experiment.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dhvae_autograd::{grad, no_grad, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentPlan, TrainConfig};
use crate::data_io::{build_slice_dataset, minmax_normalize, MaskVolume3D, Provenance, SliceDataset, SlicePair, Split, Volume3D};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::hmc::LeapfrogParams;
use crate::losses::{iteration_losses, LossReport, LossWeights};
use crate::metrics::{self, DivergenceMode, MetricsReport};
use crate::networks::{pair_tensors, reconstruct, stack_images, unstack, Discriminator, Generator};
use crate::optim::AdamW;
use crate::segmentation::{evaluate_dsc, train_segmenter, SegConfig};
use crate::util::{derive_seed, mean_std, rng_from, standard_normals};

pub const CHECKPOINT_FILE: &str = "generator.ckpt";
pub const LOSS_CSV: &str = "losses.csv";
/// Decoder batch size used when sampling and evaluating.
const CHUNK: usize = 32;

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub lf: LeapfrogParams,
    gen_opt: AdamW,
    disc_opt: AdamW,
    /// Completed iterations.
    pub iteration: u64,
}

fn sizes(tensors: &[Tensor]) -> Vec<usize> {
    tensors.iter().map(Tensor::numel).collect()
}

impl GeneratorState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = cfg.model.clone();
        model.seed = cfg.seed;
        let gen = Generator::init(&model)?;
        let disc = Discriminator::init(&model)?;
        let lf = LeapfrogParams::from_config(&model.latent_shape(), &cfg.leapfrog)?;
        let gen_opt = AdamW::new(cfg.optimizer, &Self::gen_sizes(&gen, &lf));
        let disc_opt = AdamW::for_params(cfg.optimizer, disc.params());
        Ok(GeneratorState { cfg: cfg.clone(), gen, disc, lf, gen_opt, disc_opt, iteration: 0 })
    }

    fn gen_sizes(gen: &Generator, lf: &LeapfrogParams) -> Vec<usize> {
        let mut s = sizes(gen.params().tensors());
        if lf.learnable() {
            s.push(lf.log_eps().numel());
        }
        s
    }

    /// Tensors the generator objective is differentiated against.
    fn gen_leaves(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.gen.params().tensors().iter().collect();
        if self.lf.learnable() {
            v.push(self.lf.log_eps());
        }
        v
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.cfg.seed, self.iteration);
        let table = toml::Table::try_from(&self.cfg).map_err(|e| Error::Config(format!("train config: {e}")))?;
        c.meta.insert("train".into(), toml::Value::Table(table));
        c.push_params("gen", self.gen.params());
        c.push_params("disc", self.disc.params());
        c.push("lf/log_eps", self.lf.log_eps().shape(), self.lf.log_eps().to_vec());
        self.gen_opt.save_into(&mut c, "opt_gen");
        self.disc_opt.save_into(&mut c, "opt_disc");
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = c
            .meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint holds no training configuration".into()))?
            .try_into()
            .map_err(|e| Error::Config(format!("checkpoint training configuration: {e}")))?;
        let mut s = Self::init(&cfg)?;
        s.gen = Generator::from_params(s.gen.config(), &c.params("gen").conform_to(s.gen.params())?)?;
        s.disc = Discriminator::from_params(s.gen.config(), &c.params("disc").conform_to(s.disc.params())?)?;
        let (shape, eps) = c.array("lf/log_eps").ok_or_else(|| Error::Config("checkpoint lacks lf/log_eps".into()))?;
        if shape != s.lf.log_eps().shape() {
            return Err(Error::Shape(format!("lf/log_eps shape {shape:?}, expected {:?}", s.lf.log_eps().shape())));
        }
        s.lf.set_log_eps(eps.to_vec());
        s.gen_opt = AdamW::load_from(cfg.optimizer, c, "opt_gen", &Self::gen_sizes(&s.gen, &s.lf))?;
        s.disc_opt = AdamW::load_from(cfg.optimizer, c, "opt_disc", &sizes(s.disc.params().tensors()))?;
        s.iteration = c.iteration;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn check_finite(&self, grads: &[Tensor], names: &[String], what: &str) -> Result<()> {
        for (g, n) in grads.iter().zip(names.iter().map(String::as_str).chain(["lf/log_eps"])) {
            if !g.all_finite() {
                return Err(Error::numeric(format!("{what} gradient"), format!("non-finite gradient for {n} at iteration {}", self.iteration)));
            }
        }
        Ok(())
    }

    /// One generator update and (after warm-up) one discriminator update.
    pub fn step(&mut self, ds: &SliceDataset, fx: &FeatureExtractor, w: &LossWeights) -> Result<LossReport> {
        let it = self.iteration;
        let seed = derive_seed(self.cfg.seed, &[it]);
        let bs = self.cfg.batch_size.min(ds.len());
        let idx = rand::seq::index::sample(&mut rng_from(derive_seed(seed, &[0xba7c])), ds.len(), bs).into_vec();
        let batch: Vec<&SlicePair> = idx.iter().map(|&i| &ds.pairs()[i]).collect();
        let (x, m) = pair_tensors(&batch);
        let [c, h, wd] = self.gen.config().latent_shape();
        let z_prior = Tensor::from_vec(standard_normals(derive_seed(seed, &[0x9a]), bs * c * h * wd), &[bs, c, h, wd]);
        let opts = self.cfg.elbo.options();
        let losses = iteration_losses(&self.gen, &self.disc, &self.lf, fx, &x, &m, &z_prior, w, it, derive_seed(seed, &[0xe1b0]), opts)?;

        let gen_grads = grad(&losses.global, &self.gen_leaves(), false);
        self.check_finite(&gen_grads, self.gen.params().names(), "generator")?;
        let disc_grads = if w.adversarial_active(it) {
            let leaves: Vec<&Tensor> = self.disc.params().tensors().iter().collect();
            let g = grad(&losses.disc_term, &leaves, false);
            self.check_finite(&g, self.disc.params().names(), "discriminator")?;
            Some(g)
        } else {
            None
        };

        let mut values: Vec<Vec<f64>> = self.gen_leaves().iter().map(|t| t.to_vec()).collect();
        let gvals: Vec<Vec<f64>> = gen_grads.iter().map(Tensor::to_vec).collect();
        values = self.gen_opt.update(&values, &gvals)?;
        if self.lf.learnable() {
            self.lf.set_log_eps(values.pop().expect("log eps slot"));
        }
        for (i, v) in values.into_iter().enumerate() {
            self.gen.params_mut().set_values(i, v);
        }
        if let Some(g) = disc_grads {
            self.disc_opt.step_params(self.disc.params_mut(), &g)?;
        }
        self.iteration += 1;
        Ok(losses.report)
    }
}

pub struct TrainOutcome {
    pub state: GeneratorState,
    /// Rows produced by this call (resumed runs omit earlier iterations).
    pub reports: Vec<LossReport>,
    pub checkpoint: Option<PathBuf>,
}

fn check_dataset(ds: &SliceDataset, cfg: &TrainConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let (h, w) = ds.slice_shape();
    if [h, w] != cfg.model.slice_shape {
        return Err(Error::Shape(format!("dataset slices {h}x{w}, model expects {:?}", cfg.model.slice_shape)));
    }
    Ok(())
}

/// Keeps the header and rows before `iteration` of an existing loss log.
fn truncate_loss_csv(path: &Path, iteration: u64) -> Result<()> {
    let mut out = LossReport::csv_header() + "\n";
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            if LossReport::parse_csv_row(line)?.iteration < iteration {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains (or resumes training of) the generator and discriminator. With
/// `out_dir`, per-iteration loss rows go to `losses.csv` and checkpoints to
/// `generator.ckpt` every `checkpoint_every` iterations and at the end. A
/// non-finite loss or gradient aborts the run; the last checkpoint written
/// stays in place.
pub fn train_generator(ds: &SliceDataset, cfg: &TrainConfig, out_dir: Option<&Path>, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    let mut state = match resume_from {
        Some(p) => {
            let mut s = GeneratorState::load(p)?;
            if s.cfg.resume_key() != cfg.resume_key() {
                return Err(Error::Config(format!("{} was trained with a different configuration", p.display())));
            }
            if s.iteration > cfg.iterations {
                return Err(Error::Config(format!("checkpoint is at iteration {}, beyond the requested {}", s.iteration, cfg.iterations)));
            }
            s.cfg.iterations = cfg.iterations;
            s
        }
        None => GeneratorState::init(cfg)?,
    };
    let fx = FeatureExtractor::from_env(&cfg.features)?;
    let w = cfg.weights.weights()?;
    let (ckpt_path, csv_path) = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let csv = d.join(LOSS_CSV);
            truncate_loss_csv(&csv, state.iteration)?;
            (Some(d.join(CHECKPOINT_FILE)), Some(csv))
        }
        None => (None, None),
    };
    let mut csv = match &csv_path {
        Some(p) => Some(OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut last_good: Option<u64> = None;
    let mut reports = Vec::new();
    while state.iteration < cfg.iterations {
        let report = match state.step(ds, &fx, &w) {
            Ok(r) => r,
            Err(Error::Numeric { stage, detail }) => {
                let kept = match (&ckpt_path, last_good) {
                    (Some(p), Some(i)) => format!("last good checkpoint {} (iteration {i})", p.display()),
                    (Some(p), None) if resume_from.is_some() => format!("last good checkpoint {}", p.display()),
                    _ => "no checkpoint written".into(),
                };
                return Err(Error::numeric(stage, format!("{detail}; {kept}")));
            }
            Err(e) => return Err(e),
        };
        if let (Some(f), Some(p)) = (csv.as_mut(), &csv_path) {
            writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(p, e))?;
        }
        reports.push(report);
        let done = state.iteration;
        if let Some(p) = &ckpt_path {
            if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
                state.to_checkpoint()?.save(p)?;
                last_good = Some(done);
            }
        }
    }
    if let Some(p) = &ckpt_path {
        if last_good.is_none() {
            state.to_checkpoint()?.save(p)?;
        }
    }
    Ok(TrainOutcome { state, reports, checkpoint: ckpt_path })
}

/// Reads a loss log written by [`train_generator`].
pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LossReport::parse_csv_row).collect()
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    Ok(GeneratorState::load(path)?.gen)
}

/// Decodes `z ~ N(0, I)` into image/mask pairs, binarizing masks at 0.5 and
/// rejecting pairs with fewer than `min_fg_pixels` foreground pixels. At
/// most `n * attempts_per_pair` draws are made.
pub fn generate_pairs(gen: &Generator, n: usize, seed: u64, min_fg_pixels: usize, attempts_per_pair: usize) -> Result<Vec<SlicePair>> {
    let budget = n.saturating_mul(attempts_per_pair.max(1));
    let [c, h, w] = gen.config().latent_shape();
    let dim = c * h * w;
    let mut out = Vec::with_capacity(n);
    let mut drawn = 0usize;
    while out.len() < n {
        if drawn >= budget {
            return Err(Error::Generation(format!(
                "accepted {} of {drawn} draws ({:.1}% acceptance) but {n} pairs were requested",
                out.len(),
                100.0 * out.len() as f64 / drawn.max(1) as f64
            )));
        }
        let b = CHUNK.min(budget - drawn);
        let z = Tensor::from_vec(standard_normals(derive_seed(seed, &[drawn as u64]), b * dim), &[b, c, h, w]);
        let d = no_grad(|| gen.decode(&z))?;
        for (j, (img, prob)) in unstack(&d.image).into_iter().zip(unstack(&d.mask)).enumerate() {
            let mask = prob.mapv(|p| u8::from(p >= 0.5));
            if out.len() < n && mask.iter().filter(|&&v| v != 0).count() >= min_fg_pixels {
                let img = img.mapv(|v| v.clamp(0.0, 1.0));
                out.push(SlicePair::new(img, mask, format!("synthetic-{seed}"), drawn + j, Provenance::Synthetic)?);
            }
        }
        drawn += b;
    }
    Ok(out)
}

/// Source of the (input, output) pairs PSNR is computed over.
pub enum PsnrSource<'a> {
    /// Real inputs against the model's posterior-mean reconstructions.
    Reconstructions(&'a Generator),
    /// Real and synthetic images paired by index.
    IndexMatched,
}

fn mean_or_inf(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn embed_all(fx: &FeatureExtractor, pairs: &[SlicePair]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        out.extend(fx.embed(&stack_images(chunk.iter().map(SlicePair::image)))?);
    }
    Ok(out)
}

/// PSNR over reconstruction pairs, FID and LPIPS between the real and
/// synthetic image sets.
pub fn evaluate_image_quality(
    real: &[SlicePair],
    synth: &[SlicePair],
    psnr_source: PsnrSource,
    fx: &FeatureExtractor,
    max_val: f64,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::InsufficientSamples(format!("image evaluation needs both sets nonempty ({} real, {} synthetic)", real.len(), synth.len())));
    }
    let mut report = MetricsReport::new(seed, config_hash);
    report.backbone = Some(fx.identity().to_string());
    report.preprocessing = Some(fx.preprocessing());

    let mut psnrs = Vec::new();
    match psnr_source {
        PsnrSource::Reconstructions(gen) => {
            for chunk in real.chunks(CHUNK) {
                let refs: Vec<&SlicePair> = chunk.iter().collect();
                let rec = unstack(&reconstruct(gen, &refs)?.image);
                for (p, r) in chunk.iter().zip(&rec) {
                    psnrs.push(metrics::psnr(p.image().view().into_dyn(), r.view().into_dyn(), max_val)?);
                }
            }
        }
        PsnrSource::IndexMatched => {
            for (a, b) in real.iter().zip(synth) {
                psnrs.push(metrics::psnr(a.image().view().into_dyn(), b.image().view().into_dyn(), max_val)?);
            }
        }
    }
    report.push("psnr", mean_or_inf(&psnrs), psnrs.len(), psnrs.len());

    let fr = metrics::gaussian_stats(&embed_all(fx, real)?)?;
    let fs_ = metrics::gaussian_stats(&embed_all(fx, synth)?)?;
    report.push("fid", metrics::fid(&fr, &fs_)?, real.len(), synth.len());

    let k = real.len().min(synth.len());
    let mut lp = Vec::with_capacity(k);
    for (a, b) in real[..k].chunks(CHUNK).zip(synth[..k].chunks(CHUNK)) {
        let ta = stack_images(a.iter().map(SlicePair::image));
        let tb = stack_images(b.iter().map(SlicePair::image));
        lp.extend(metrics::lpips_pairs(&ta, &tb, fx)?);
    }
    report.push("lpips", mean_or_inf(&lp), k, k);
    Ok(report)
}

fn fg_fraction<'a>(masks: impl Iterator<Item = ArrayView2<'a, u8>>) -> f64 {
    let (mut fg, mut n) = (0usize, 0usize);
    for m in masks {
        fg += m.iter().filter(|&&v| v != 0).count();
        n += m.len();
    }
    fg as f64 / n.max(1) as f64
}

/// JSD and both KLD directions between per-pixel mask distributions, plus
/// each set's mean foreground fraction.
pub fn evaluate_mask_quality(real: &[Array2<u8>], synth: &[Array2<u8>], eps: f64, seed: u64, config_hash: &str) -> Result<MetricsReport> {
    let p = metrics::pixel_class_distribution(real.iter().map(|a| a.view()))?;
    let q = metrics::pixel_class_distribution(synth.iter().map(|a| a.view()))?;
    let (nr, ns) = (p.n_masks, q.n_masks);
    let mut r = MetricsReport::new(seed, config_hash);
    r.push("jsd", metrics::divergence(&p, &q, DivergenceMode::Jsd, eps)?, nr, ns);
    r.push("kld_real_synth", metrics::divergence(&p, &q, DivergenceMode::Kld, eps)?, nr, ns);
    r.push("kld_synth_real", metrics::divergence(&q, &p, DivergenceMode::Kld, eps)?, nr, ns);
    r.push("fg_fraction_real", fg_fraction(real.iter().map(|a| a.view())), nr, ns);
    r.push("fg_fraction_synth", fg_fraction(synth.iter().map(|a| a.view())), nr, ns);
    Ok(r)
}

/// Fails when any subject id is on both sides of a split.
pub fn check_leakage(train_ids: &[String], test_ids: &[String]) -> Result<()> {
    let shared: Vec<&String> = train_ids.iter().filter(|id| test_ids.contains(id)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!("subjects in both train and test: {shared:?}")))
    }
}

/// One point of the sweep with its subject split.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentCell {
    pub fold: usize,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub beta: f64,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl ExperimentCell {
    pub fn new(fold: usize, real_count: usize, synthetic_count: usize, beta: f64, seed: u64, train_ids: Vec<String>, test_ids: Vec<String>) -> Result<Self> {
        check_leakage(&train_ids, &test_ids)?;
        Ok(ExperimentCell { fold, real_count, synthetic_count, beta, seed, train_ids, test_ids })
    }

    /// Seed shared by every cell that trains the same generator.
    fn generator_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x6e, self.fold as u64, self.real_count as u64])
    }

    fn segmenter_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x5e, self.fold as u64, self.real_count as u64])
    }

    fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x5a, self.fold as u64, self.real_count as u64, self.synthetic_count as u64, self.beta.to_bits()])
    }
}

/// Held-out pool and per-fold training draws for every sweep point.
pub fn plan_cells(plan: &ExperimentPlan, subject_ids: &[String]) -> Result<Vec<ExperimentCell>> {
    plan.validate()?;
    let mut ids = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(Error::Config("corpus subject ids must be unique".into()));
    }
    ids.shuffle(&mut rng_from(derive_seed(plan.split_seed, &[0x7e57])));
    if plan.test_subjects >= ids.len() {
        return Err(Error::Config(format!("{} test subjects leave no training subjects out of {}", plan.test_subjects, ids.len())));
    }
    let (test, pool) = ids.split_at(plan.test_subjects);
    let mut cells = Vec::new();
    for fold in 0..plan.folds {
        for &real in &plan.real_counts {
            if real > pool.len() {
                return Err(Error::Config(format!("{real} training subjects requested but only {} available", pool.len())));
            }
            let mut draw = pool.to_vec();
            draw.shuffle(&mut rng_from(derive_seed(plan.split_seed, &[fold as u64, real as u64])));
            draw.truncate(real);
            for &beta in &plan.betas {
                for &seed in &plan.seeds {
                    for &synth in &plan.synthetic_counts {
                        cells.push(ExperimentCell::new(fold, real, synth, beta, seed, draw.clone(), test.to_vec())?);
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub fold: usize,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub beta: f64,
    pub seed: u64,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub n_train_slices: usize,
    pub n_test_subjects: usize,
}

/// Settings shared by every cell of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub plan: ExperimentPlan,
    pub train: TrainConfig,
    pub segmenter: SegConfig,
    pub min_fg_pixels: usize,
    pub attempts_per_pair: usize,
}

fn subjects_by_id<'a>(corpus: &'a [(Volume3D, MaskVolume3D)], ids: &[String]) -> Result<Vec<&'a (Volume3D, MaskVolume3D)>> {
    ids.iter()
        .map(|id| corpus.iter().find(|(v, _)| v.subject_id() == id).ok_or_else(|| Error::Config(format!("subject {id} not in corpus"))))
        .collect()
}

/// Trains the cell's generator on the real slices (when synthetic pairs
/// are needed), merges its samples, trains a segmenter and scores it on
/// the held-out subjects.
pub fn run_cell(cell: &ExperimentCell, corpus: &[(Volume3D, MaskVolume3D)], s: &ExperimentSettings, generator: Option<&Generator>) -> Result<CellResult> {
    check_leakage(&cell.train_ids, &cell.test_ids)?;
    let train: Vec<(Volume3D, MaskVolume3D)> = subjects_by_id(corpus, &cell.train_ids)?.into_iter().cloned().collect();
    let real = build_slice_dataset(&train, s.min_fg_pixels, Split::Train)?;
    let mut pairs = real.into_pairs();
    if cell.synthetic_count > 0 {
        let trained;
        let gen = match generator {
            Some(g) => g,
            None => {
                trained = train_cell_generator(cell, &train, s)?;
                &trained
            }
        };
        pairs.extend(generate_pairs(gen, cell.synthetic_count, cell.sample_seed(), s.min_fg_pixels, s.attempts_per_pair)?);
    }
    let n_train_slices = pairs.len();
    let ds = SliceDataset::from_pairs(pairs, Split::Train)?;
    let seg_cfg = SegConfig { seed: cell.segmenter_seed(), ..s.segmenter.clone() };
    let (model, _) = train_segmenter(&ds, &seg_cfg)?;
    let test: Vec<(Volume3D, MaskVolume3D)> = subjects_by_id(corpus, &cell.test_ids)?.into_iter().map(|(v, m)| (minmax_normalize(v), m.clone())).collect();
    let (dsc_mean, dsc_std, _) = evaluate_dsc(&model, &test, s.plan.selector)?;
    Ok(CellResult {
        fold: cell.fold,
        real_count: cell.real_count,
        synthetic_count: cell.synthetic_count,
        beta: cell.beta,
        seed: cell.seed,
        dsc_mean,
        dsc_std,
        n_train_slices,
        n_test_subjects: test.len(),
    })
}

fn train_cell_generator(cell: &ExperimentCell, train: &[(Volume3D, MaskVolume3D)], s: &ExperimentSettings) -> Result<Generator> {
    let ds = build_slice_dataset(train, s.min_fg_pixels, Split::Train)?;
    let mut cfg = s.train.clone();
    cfg.seed = cell.generator_seed();
    cfg.weights.beta = cell.beta;
    Ok(train_generator(&ds, &cfg, None, None)?.state.gen)
}

/// Runs every cell of the plan. One generator is trained per
/// (fold, real count, beta, seed) and shared by that group's synthetic
/// counts; every cell derives its own sampling and segmenter seeds, so
/// results do not depend on plan order.
pub fn run_augmentation_experiment(s: &ExperimentSettings, corpus: &[(Volume3D, MaskVolume3D)]) -> Result<Vec<CellResult>> {
    let ids: Vec<String> = corpus.iter().map(|(v, _)| v.subject_id().to_string()).collect();
    let cells = plan_cells(&s.plan, &ids)?;
    let mut generators: HashMap<(usize, usize, u64, u64), Generator> = HashMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in &cells {
        let key = (cell.fold, cell.real_count, cell.beta.to_bits(), cell.seed);
        if cell.synthetic_count > 0 && !generators.contains_key(&key) {
            let train: Vec<(Volume3D, MaskVolume3D)> = subjects_by_id(corpus, &cell.train_ids)?.into_iter().cloned().collect();
            generators.insert(key, train_cell_generator(cell, &train, s)?);
        }
        out.push(run_cell(cell, corpus, s, generators.get(&key))?);
    }
    Ok(out)
}

pub const CELL_COLUMNS: [&str; 9] = ["fold", "real_count", "synthetic_count", "beta", "seed", "dsc_mean", "dsc_std", "n_train_slices", "n_test_subjects"];
pub const SUMMARY_COLUMNS: [&str; 6] = ["real_count", "synthetic_count", "beta", "n_cells", "dsc_mean", "dsc_std"];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub real_count: usize,
    pub synthetic_count: usize,
    pub beta: f64,
    pub n_cells: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
}

/// Mean and standard deviation of the per-cell mean DSC over folds and
/// seeds, per (real count, synthetic count, beta).
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, usize, u64), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry((r.real_count, r.synthetic_count, r.beta.to_bits())).or_default().push(r.dsc_mean);
    }
    groups
        .into_iter()
        .map(|((real_count, synthetic_count, beta), v)| {
            let (dsc_mean, dsc_std) = mean_std(&v);
            SummaryRow { real_count, synthetic_count, beta: f64::from_bits(beta), n_cells: v.len(), dsc_mean, dsc_std }
        })
        .collect()
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?).expect("csv output is UTF-8"))
}

pub fn cells_csv(results: &[CellResult]) -> Result<String> {
    csv_text(
        &CELL_COLUMNS,
        results.iter().map(|r| {
            vec![
                r.fold.to_string(),
                r.real_count.to_string(),
                r.synthetic_count.to_string(),
                r.beta.to_string(),
                r.seed.to_string(),
                r.dsc_mean.to_string(),
                r.dsc_std.to_string(),
                r.n_train_slices.to_string(),
                r.n_test_subjects.to_string(),
            ]
        }),
    )
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    csv_text(
        &SUMMARY_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.real_count.to_string(),
                r.synthetic_count.to_string(),
                r.beta.to_string(),
                r.n_cells.to_string(),
                r.dsc_mean.to_string(),
                r.dsc_std.to_string(),
            ]
        }),
    )
}

fn plot_curves(rows: &[SummaryRow], path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let err = |e: String| Error::Config(format!("plot {}: {e}", path.display()));
    let max_x = rows.iter().map(|r| r.synthetic_count).max().unwrap_or(0).max(1) as f64;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Volume DSC vs. synthetic pairs", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_x * 1.05, 0.0..1.0)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("synthetic pairs added").y_desc("DSC").draw().map_err(|e| err(e.to_string()))?;
    let mut series: BTreeMap<(usize, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        series.entry((r.real_count, r.beta.to_bits())).or_default().push(r);
    }
    for (i, ((real, beta), pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mean: Vec<(f64, f64)> = pts.iter().map(|r| (r.synthetic_count as f64, r.dsc_mean)).collect();
        let lo: Vec<(f64, f64)> = pts.iter().map(|r| (r.synthetic_count as f64, r.dsc_mean - r.dsc_std)).collect();
        let hi: Vec<(f64, f64)> = pts.iter().map(|r| (r.synthetic_count as f64, r.dsc_mean + r.dsc_std)).collect();
        chart
            .draw_series(LineSeries::new(mean, color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(format!("{real} subjects, beta {}", f64::from_bits(beta)))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        for band in [lo, hi] {
            chart.draw_series(LineSeries::new(band, color.mix(0.4))).map_err(|e| err(e.to_string()))?;
        }
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

pub const REPORT_FILES: [&str; 4] = ["cells.csv", "summary.csv", "dsc_vs_synthetic.svg", "report.meta.toml"];

/// Writes the per-cell and summary tables, the DSC curve plot and a
/// metadata file. Nothing is written for an empty result set.
pub fn emit_report(results: &[CellResult], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Config("empty sweep: nothing to report".into()));
    }
    let dir = out_dir.as_ref();
    let summary = summarize(results);
    let cells = cells_csv(results)?;
    let sum = summary_csv(&summary)?;
    let mut meta = toml::Table::new();
    meta.insert("cell_columns".into(), CELL_COLUMNS.iter().map(|s| toml::Value::from(*s)).collect::<Vec<_>>().into());
    meta.insert("summary_columns".into(), SUMMARY_COLUMNS.iter().map(|s| toml::Value::from(*s)).collect::<Vec<_>>().into());
    meta.insert(
        "reference_target".into(),
        "full-scale reference: DSC 0.724 +/- 0.01 with 30 subjects and 2000 synthetic pairs; not expected at this scale".into(),
    );
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = REPORT_FILES.iter().map(|f| dir.join(f)).collect();
    fs::write(&paths[0], cells).map_err(|e| Error::io(&paths[0], e))?;
    fs::write(&paths[1], sum).map_err(|e| Error::io(&paths[1], e))?;
    plot_curves(&summary, &paths[2])?;
    fs::write(&paths[3], toml::to_string(&meta).expect("table serializes")).map_err(|e| Error::io(&paths[3], e))?;
    Ok(paths)
}

/// Line plot of logged loss components against iteration.
pub fn plot_losses(reports: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    use plotters::prelude::*;
    let path = path.as_ref();
    if reports.is_empty() {
        return Err(Error::Config("no loss rows to plot".into()));
    }
    let err = |e: String| Error::Config(format!("plot {}: {e}", path.display()));
    let comps: [(&str, fn(&LossReport) -> f64); 3] = [("global", |r| r.global), ("elbo_h", |r| r.elbo_h), ("recon_mask", |r| r.recon_mask)];
    let ymax = reports.iter().flat_map(|r| comps.iter().map(move |(_, f)| f(r))).fold(f64::MIN, f64::max);
    let ymin = reports.iter().flat_map(|r| comps.iter().map(move |(_, f)| f(r))).fold(f64::MAX, f64::min).min(0.0);
    let xmax = reports[reports.len() - 1].iteration as f64 + 1.0;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(reports[0].iteration as f64..xmax, ymin..ymax * 1.05)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("iteration").draw().map_err(|e| err(e.to_string()))?;
    for (i, (name, f)) in comps.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(reports.iter().map(|r| (r.iteration as f64, f(r))), color))
            .map_err(|e| err(e.to_string()))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Parses a `cells.csv` written by [`emit_report`].
pub fn read_cells_csv(path: impl AsRef<Path>) -> Result<Vec<CellResult>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?.clone();
    if header.iter().ne(CELL_COLUMNS) {
        return Err(Error::Ingestion(format!("{}: unexpected columns {:?}", path.display(), header)));
    }
    let bad = |line: usize, what: &str| Error::Ingestion(format!("{}: row {line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(line + 1, CELL_COLUMNS[i]));
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(line + 1, CELL_COLUMNS[i]));
        out.push(CellResult {
            fold: u(0)?,
            real_count: u(1)?,
            synthetic_count: u(2)?,
            beta: f(3)?,
            seed: rec[4].parse().map_err(|_| bad(line + 1, "seed"))?,
            dsc_mean: f(5)?,
            dsc_std: f(6)?,
            n_train_slices: u(7)?,
            n_test_subjects: u(8)?,
        });
    }
    Ok(out)
}
