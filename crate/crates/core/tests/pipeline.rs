use std::fs;

use dhvae_core::config::{ExperimentPlan, TrainConfig};
use dhvae_core::data_io::{build_slice_dataset, make_blob_corpus, SliceDataset, Split};
use dhvae_core::features::FeatureExtractor;
use dhvae_core::networks::ModelConfig;
use dhvae_core::pipeline::*;
use dhvae_core::segmentation::{SegConfig, SelectorPolicy};
use dhvae_core::Error;
use proptest::prelude::*;

fn micro_cfg(iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed: 4, iterations, batch_size: 4, checkpoint_every: 2, ..TrainConfig::default() };
    cfg.model = ModelConfig {
        base_filters: 4,
        depth: 2,
        max_filters: 8,
        latent_channels: 1,
        slice_shape: [16, 16],
        disc_filters: 4,
        disc_depth: 2,
        ..ModelConfig::default()
    };
    cfg.leapfrog.steps = 1;
    cfg.weights.warmup_iters = 1;
    cfg.optimizer.lr = 1e-3;
    cfg
}

fn dataset() -> SliceDataset {
    build_slice_dataset(&make_blob_corpus(2, (16, 16, 8), 9).unwrap(), 4, Split::Train).unwrap()
}

#[test]
fn one_iteration_on_four_pairs_writes_checkpoint() {
    let ds = SliceDataset::from_pairs(dataset().into_pairs().into_iter().take(4).collect(), Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_generator(&ds, &micro_cfg(1), Some(dir.path()), None).unwrap();
    assert_eq!(out.reports.len(), 1);
    assert!(out.reports[0].all_finite());
    assert!(dir.path().join(CHECKPOINT_FILE).is_file());
    let rows = read_loss_csv(dir.path().join(LOSS_CSV)).unwrap();
    assert_eq!(rows, out.reports);
    let state = GeneratorState::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(state.iteration, 1);
    assert_eq!(state.gen.params().tensors()[0].data(), out.state.gen.params().tensors()[0].data());
}

#[test]
fn empty_or_mismatched_datasets_are_rejected() {
    let ds = dataset();
    let mut cfg = micro_cfg(1);
    cfg.model.slice_shape = [32, 32];
    assert!(matches!(train_generator(&ds, &cfg, None, None), Err(Error::Shape(_))));
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let mut cfg = micro_cfg(6);
    cfg.optimizer.lr = 1e200;
    let dir = tempfile::tempdir().unwrap();
    match train_generator(&dataset(), &cfg, Some(dir.path()), None) {
        Err(Error::Numeric { detail, .. }) => {
            assert!(detail.contains("checkpoint"), "{detail}");
        }
        Err(e) => panic!("expected a numeric error, got {e}"),
        Ok(_) => panic!("training with lr 1e200 should diverge"),
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    train_generator(&dataset(), &micro_cfg(2), Some(dir.path()), None).unwrap();
    let mut other = micro_cfg(4);
    other.optimizer.lr = 2e-3;
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    assert!(matches!(train_generator(&dataset(), &other, Some(dir.path()), Some(&ckpt)), Err(Error::Config(_))));
}

#[test]
fn sampling_contract_and_determinism() {
    let out = train_generator(&dataset(), &micro_cfg(2), None, None).unwrap();
    let a = generate_pairs(&out.state.gen, 10, 3, 0, 1).unwrap();
    let b = generate_pairs(&out.state.gen, 10, 3, 0, 1).unwrap();
    assert_eq!(a.len(), 10);
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.image(), q.image());
        assert_eq!(p.mask(), q.mask());
        assert!(p.image().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.mask().iter().all(|&v| v <= 1));
        assert_eq!(p.provenance(), dhvae_core::data_io::Provenance::Synthetic);
    }
    match generate_pairs(&out.state.gen, 3, 3, 10_000, 2) {
        Err(Error::Generation(msg)) => assert!(msg.contains("acceptance"), "{msg}"),
        other => panic!("expected a generation error, got {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn image_quality_on_identical_sets() {
    let ds = dataset();
    let fx = FeatureExtractor::fixed_random(0, &[2, 7, 12, 21], 8, None).unwrap();
    let r = evaluate_image_quality(ds.pairs(), ds.pairs(), PsnrSource::IndexMatched, &fx, 1.0, 0, "h").unwrap();
    assert!(r.get("fid").unwrap() <= 1e-6);
    assert_eq!(r.get("psnr").unwrap(), f64::INFINITY);
    assert_eq!(r.get("lpips").unwrap(), 0.0);
    assert_eq!(r.backbone.as_deref(), Some(fx.identity()));
    let again = evaluate_image_quality(ds.pairs(), ds.pairs(), PsnrSource::IndexMatched, &fx, 1.0, 0, "h").unwrap();
    assert_eq!(r.to_csv().unwrap(), again.to_csv().unwrap());
    assert!(matches!(evaluate_image_quality(&ds.pairs()[..1], ds.pairs(), PsnrSource::IndexMatched, &fx, 1.0, 0, "h"), Err(Error::InsufficientSamples(_))));
}

#[test]
fn mask_quality_orders_halves_before_noise() {
    let ds = build_slice_dataset(&make_blob_corpus(6, (16, 16, 8), 1).unwrap(), 4, Split::Train).unwrap();
    let masks: Vec<_> = ds.pairs().iter().map(|p| p.mask().clone()).collect();
    let same = evaluate_mask_quality(&masks, &masks, 1e-6, 0, "h").unwrap();
    assert_eq!(same.get("jsd").unwrap(), 0.0);
    assert_eq!(same.get("kld_real_synth").unwrap(), 0.0);
    assert_eq!(same.rows[0].n_real, masks.len());
    assert_eq!(same.rows[0].n_synth, masks.len());
    let (h1, h2) = masks.split_at(masks.len() / 2);
    let noise: Vec<_> = (0..masks.len())
        .map(|i| ndarray::Array2::from_shape_vec((16, 16), dhvae_core::util::standard_normals(i as u64, 256).iter().map(|&v| u8::from(v > 0.0)).collect()).unwrap())
        .collect();
    let halves = evaluate_mask_quality(h1, h2, 1e-6, 0, "h").unwrap().get("jsd").unwrap();
    let vs_noise = evaluate_mask_quality(&masks, &noise, 1e-6, 0, "h").unwrap().get("jsd").unwrap();
    assert!(halves < vs_noise, "{halves} vs {vs_noise}");
}

fn cell(fold: usize, synth: usize, dsc: f64) -> CellResult {
    CellResult { fold, real_count: 2, synthetic_count: synth, beta: 0.01, seed: 0, dsc_mean: dsc, dsc_std: 0.0, n_train_slices: 10, n_test_subjects: 2 }
}

#[test]
fn report_files_are_deterministic_and_empty_sweeps_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    assert!(emit_report(&[], &empty).is_err());
    assert!(!empty.exists());
    let results = vec![cell(0, 0, 0.5), cell(1, 0, 0.7), cell(0, 10, 0.6)];
    let a = emit_report(&results, dir.path().join("a")).unwrap();
    let b = emit_report(&results, dir.path().join("b")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let cells = fs::read_to_string(&a[0]).unwrap();
    assert_eq!(cells.lines().next().unwrap(), CELL_COLUMNS.join(","));
    let summary = fs::read_to_string(&a[1]).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_COLUMNS.join(","));
    // sample std of {0.5, 0.7}
    let row: Vec<f64> = summary.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(&row[..4], &[2.0, 0.0, 0.01, 2.0]);
    assert!((row[4] - 0.6).abs() < 1e-12);
    assert!((row[5] - 0.02f64.sqrt()).abs() < 1e-12);
    assert_eq!(read_cells_csv(&a[0]).unwrap(), results);
}

#[test]
fn cells_are_isolated_from_plan_order() {
    let corpus = make_blob_corpus(5, (16, 16, 8), 2).unwrap();
    let plan = ExperimentPlan {
        real_counts: vec![2],
        synthetic_counts: vec![0, 6],
        folds: 1,
        seeds: vec![0],
        betas: vec![0.01],
        test_subjects: 2,
        split_seed: 0,
        selector: SelectorPolicy::OracleExtent,
    };
    let s = ExperimentSettings {
        plan: plan.clone(),
        train: micro_cfg(2),
        segmenter: SegConfig { depth: 2, base_filters: 4, epochs: 1, steps_per_epoch: Some(2), batch_size: 4, lr: 1e-3, seed: 0 },
        min_fg_pixels: 4,
        attempts_per_pair: 50,
    };
    let all = run_augmentation_experiment(&s, &corpus).unwrap();
    assert_eq!(all.len(), 2);
    let ids: Vec<String> = corpus.iter().map(|(v, _)| v.subject_id().to_string()).collect();
    let mut cells = plan_cells(&plan, &ids).unwrap();
    cells.reverse();
    let reversed: Vec<CellResult> = cells.iter().map(|c| run_cell(c, &corpus, &s, None).unwrap()).collect();
    assert_eq!(reversed[0], all[1]);
    assert_eq!(reversed[1], all[0]);
    assert_eq!(all[1].n_train_slices, all[0].n_train_slices + 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn planned_cells_never_leak(n in 4usize..12, test in 1usize..3, folds in 1usize..4, split_seed in 0u64..100) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let plan = ExperimentPlan { real_counts: vec![1, n - test], synthetic_counts: vec![0, 5], folds, seeds: vec![0, 1], betas: vec![0.01], test_subjects: test, split_seed, selector: SelectorPolicy::OracleExtent };
        let cells = plan_cells(&plan, &ids).unwrap();
        prop_assert_eq!(cells.len(), folds * 2 * 2 * 2);
        for c in &cells {
            prop_assert!(c.train_ids.iter().all(|t| !c.test_ids.contains(t)));
            prop_assert_eq!(c.train_ids.len(), c.real_count);
            prop_assert_eq!(c.test_ids.len(), test);
        }
        let too_many = ExperimentPlan { real_counts: vec![n], ..plan };
        prop_assert!(plan_cells(&too_many, &ids).is_err());
    }
}
