use dhvae_core::data_io::{build_slice_dataset, make_blob_corpus, minmax_normalize, Split};
use dhvae_core::metrics::{dice_counts, dice_from_counts, dsc};
use dhvae_core::segmentation::*;
use ndarray::Axis;

fn small_cfg(epochs: usize) -> SegConfig {
    SegConfig { depth: 2, base_filters: 4, epochs, steps_per_epoch: None, batch_size: 8, lr: 3e-3, seed: 1 }
}

#[test]
fn training_loss_mostly_decreases() {
    let corpus = make_blob_corpus(4, (16, 16, 8), 2).unwrap();
    let ds = build_slice_dataset(&corpus, 4, Split::Train).unwrap();
    let (_, stats) = train_segmenter(&ds, &small_cfg(10)).unwrap();
    assert_eq!(stats.len(), 10);
    let pairs = stats.windows(2).count();
    let down = stats.windows(2).filter(|w| w[1].loss <= w[0].loss).count();
    assert!(down * 5 >= pairs * 4, "loss decreased in {down} of {pairs} epoch pairs: {:?}", stats.iter().map(|s| s.loss).collect::<Vec<_>>());
}

#[test]
fn stacked_volume_dsc_equals_voxelwise_dsc() {
    let corpus = make_blob_corpus(3, (16, 16, 8), 7).unwrap();
    let ds = build_slice_dataset(&corpus[..2], 4, Split::Train).unwrap();
    let (model, _) = train_segmenter(&ds, &small_cfg(2)).unwrap();
    let (vol, gt) = &corpus[2];
    let vol = minmax_normalize(vol);
    let d = vol.shape()[2];
    let pred = segment_volume(&model, &vol, 0..d).unwrap();
    // Stack per-slice predictions by hand and count over the whole volume.
    let (mut inter, mut total) = (0u64, 0u64);
    for k in 0..d {
        let img = vol.values().index_axis(Axis(2), k).to_owned();
        let p = predict_slice(&model, &img).unwrap();
        let g = gt.values().index_axis(Axis(2), k);
        let (i, t) = dice_counts(p.iter().copied(), g.iter().copied());
        inter += i;
        total += t;
    }
    let whole = dsc(pred.values().view().into_dyn(), gt.values().view().into_dyn()).unwrap();
    assert_eq!(dice_from_counts(inter, total), whole);
}

#[test]
fn selector_ranges() {
    let corpus = make_blob_corpus(1, (16, 16, 8), 3).unwrap();
    let (vol, gt) = &corpus[0];
    let r = SelectorPolicy::OracleExtent.range(vol, gt);
    assert!(!r.is_empty());
    for k in 0..8 {
        let has_fg = gt.values().index_axis(Axis(2), k).iter().any(|&v| v != 0);
        assert_eq!(r.contains(&k), has_fg || (k > r.start && k < r.end));
    }
    assert_eq!(SelectorPolicy::FullRange.range(vol, gt), 0..8);
    let model = SegParams::init(&small_cfg(1), (16, 16)).unwrap();
    assert!(segment_volume(&model, vol, 3..12).is_err());
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let model = SegParams::init(&small_cfg(1), (16, 16)).unwrap();
    let mut ckpt = dhvae_core::checkpoint::Checkpoint::new(1, 0);
    model.save_into(&mut ckpt).unwrap();
    let back = SegParams::load_from(&dhvae_core::checkpoint::Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
    let img = ndarray::Array2::from_shape_fn((16, 16), |(i, j)| ((i * j) % 7) as f64 / 7.0);
    assert_eq!(predict_slice(&model, &img).unwrap(), predict_slice(&back, &img).unwrap());
}
