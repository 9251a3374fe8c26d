use dhvae_core::data_io::*;
use dhvae_core::Error;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn volume(values: Array3<f64>, id: &str) -> Volume3D {
    Volume3D::new(values, [1.0, 1.0, 2.0], Modality::Synthetic, id).unwrap()
}

#[test]
fn slice_pair_rejects_bad_inputs() {
    let img = Array2::from_elem((4, 4), 0.5);
    let mask = Array2::<u8>::zeros((4, 4));
    assert!(SlicePair::new(img.clone(), mask.clone(), "s", 0, Provenance::Real).is_ok());
    let mut hot = img.clone();
    hot[(1, 1)] = 1.5;
    assert!(matches!(SlicePair::new(hot, mask.clone(), "s", 0, Provenance::Real), Err(Error::Domain(_))));
    let mut labels = mask.clone();
    labels[(0, 0)] = 2;
    assert!(matches!(SlicePair::new(img.clone(), labels, "s", 0, Provenance::Real), Err(Error::Domain(_))));
    assert!(matches!(SlicePair::new(img, Array2::zeros((4, 3)), "s", 0, Provenance::Real), Err(Error::Shape(_))));
}

#[test]
fn raw_and_nifti_roundtrip_with_masks() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_blob_corpus(1, (8, 10, 8), 3).unwrap();
    let (v, m) = &corpus[0];
    for name in ["case_flair.rawvol", "case_pet.nii", "case.nii.gz"] {
        let p = dir.path().join(name);
        save_volume(v, &p).unwrap();
        save_mask(m, mask_path_for(&p).unwrap()).unwrap();
        let (back, mask) = load_volume(&p).unwrap();
        assert_eq!(back.shape(), v.shape());
        let err = back.values().iter().zip(v.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{name}: {err}");
        assert_eq!(mask.unwrap().values(), m.values());
    }
    let (flair, _) = load_volume(dir.path().join("case_flair.rawvol")).unwrap();
    assert_eq!(flair.modality(), Modality::MriFlair);
    assert_eq!(list_volumes(dir.path()).unwrap().len(), 3);
}

#[test]
fn missing_and_truncated_files_are_ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_volume(dir.path().join("nope.rawvol")), Err(Error::Ingestion(_))));
    let p = dir.path().join("short.rawvol");
    std::fs::write(&p, b"2 2 2 1 1 1\n\x00\x00").unwrap();
    assert!(matches!(load_volume(&p), Err(Error::Ingestion(_))));
    assert!(matches!(load_volume(dir.path().join("x.png")), Err(Error::Ingestion(_))));
}

#[test]
fn dataset_file_roundtrip() {
    let corpus = make_blob_corpus(2, (16, 16, 8), 1).unwrap();
    let ds = build_slice_dataset(&corpus, 4, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let back = dataset_roundtrip(&ds, dir.path().join("d.bin")).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.subject_ids(), ds.subject_ids());
    for (a, b) in back.pairs().iter().zip(ds.pairs()) {
        assert_eq!(a.image(), b.image());
        assert_eq!(a.mask(), b.mask());
        assert_eq!(a.slice_index(), b.slice_index());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blob_corpus_is_pure(n in 1usize..4, seed in 0u64..1000) {
        let a = make_blob_corpus(n, (12, 12, 8), seed).unwrap();
        let b = make_blob_corpus(n, (12, 12, 8), seed).unwrap();
        for ((va, ma), (vb, mb)) in a.iter().zip(&b) {
            prop_assert_eq!(va.values(), vb.values());
            prop_assert_eq!(ma.values(), mb.values());
            prop_assert_eq!(va.subject_id(), vb.subject_id());
        }
    }

    #[test]
    fn raising_threshold_never_adds_slices(seed in 0u64..500, lo in 1usize..30, extra in 0usize..30) {
        let (v, m) = make_blob_corpus(1, (16, 16, 8), seed).unwrap().remove(0);
        let a = extract_tumor_slices(&v, &m, lo).unwrap();
        let b = extract_tumor_slices(&v, &m, lo + extra).unwrap();
        prop_assert!(b.len() <= a.len());
        let ia: Vec<usize> = a.iter().map(SlicePair::slice_index).collect();
        prop_assert!(b.iter().all(|p| ia.contains(&p.slice_index())));
        for p in &a {
            prop_assert!(p.image().iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(p.mask().iter().all(|&x| x <= 1));
            prop_assert!(p.foreground() >= lo);
        }
    }

    #[test]
    fn normalization_is_idempotent(vals in proptest::collection::vec(-50.0f64..50.0, 27)) {
        let v = volume(Array3::from_shape_vec((3, 3, 3), vals).unwrap(), "p");
        let once = minmax_normalize(&v);
        let twice = minmax_normalize(&once);
        let lo = once.values().iter().cloned().fold(f64::MAX, f64::min);
        let hi = once.values().iter().cloned().fold(f64::MIN, f64::max);
        if hi > lo {
            prop_assert!(lo == 0.0 && hi == 1.0);
        }
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn constant_volume_normalizes_to_zeros() {
    let v = volume(Array3::from_elem((2, 2, 2), 7.0), "c");
    assert!(minmax_normalize(&v).values().iter().all(|&x| x == 0.0));
}
