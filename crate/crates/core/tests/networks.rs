use dhvae_autograd::{functional::weight_standardize, grad, no_grad, Tensor};
use dhvae_core::networks::{Discriminator, Generator, ModelConfig};
use dhvae_core::util::standard_normals;
use proptest::prelude::*;

fn probe_config() -> ModelConfig {
    ModelConfig {
        base_filters: 4,
        depth: 2,
        max_filters: 8,
        latent_channels: 1,
        slice_shape: [8, 8],
        disc_filters: 4,
        disc_depth: 2,
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn shapes_follow_config() {
    let cfg = probe_config();
    let gen = Generator::init(&cfg).unwrap();
    let x = Tensor::full(&[3, 1, 8, 8], 0.4);
    let m = Tensor::zeros(&[3, 1, 8, 8]);
    let lat = gen.encode(&x, &m).unwrap();
    assert_eq!(lat.mean.shape(), &[3, 1, 2, 2]);
    assert_eq!(cfg.latent_dim(), 4);
    let d = gen.decode(&lat.mean).unwrap();
    assert_eq!(d.image.shape(), &[3, 1, 8, 8]);
    assert!(d.mask.data().iter().all(|p| (0.0..=1.0).contains(p)));
    let logits = Discriminator::init(&cfg).unwrap().discriminate(&x, &m).unwrap();
    assert_eq!(&logits.shape()[2..], &cfg.disc_map_shape());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Generator::init(&ModelConfig { slice_shape: [12, 12], depth: 3, ..probe_config() }).is_err());
    assert!(Generator::init(&ModelConfig { max_filters: 2, ..probe_config() }).is_err());
    assert!(Generator::init(&ModelConfig { attention_at: Some(vec![5]), ..probe_config() }).is_err());
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    assert!(Generator::init(&probe_config()).unwrap().encode(&x, &x).is_err());
}

#[test]
fn encoder_and_decoder_filters_mirror() {
    let cfg = ModelConfig { base_filters: 8, depth: 4, max_filters: 32, ..ModelConfig::default() };
    let widths: Vec<usize> = (0..cfg.depth).map(|i| cfg.filters(i)).collect();
    assert_eq!(widths, [8, 16, 32, 32]);
    let gen = Generator::init(&ModelConfig { slice_shape: [16, 16], ..cfg.clone() }).unwrap();
    for i in 0..cfg.depth {
        let enc = gen.params().get(&format!("enc.{i}.down.weight")).dim(0);
        let dec = gen.params().get(&format!("dec.{}.up.weight", cfg.depth - 1 - i)).dim(0);
        assert_eq!(enc, dec, "block {i}");
        assert_eq!(enc, cfg.filters(i));
    }
}

#[test]
fn forward_passes_are_bitwise_repeatable() {
    let cfg = probe_config();
    let gen = Generator::init(&cfg).unwrap();
    let z = Tensor::from_vec(standard_normals(1, 8), &[2, 1, 2, 2]);
    let a = no_grad(|| gen.decode(&z)).unwrap();
    let b = no_grad(|| gen.decode(&z)).unwrap();
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.mask.data(), b.mask.data());
    let again = Generator::init(&cfg).unwrap();
    assert_eq!(again.params().tensors()[0].data(), gen.params().tensors()[0].data());
}

#[test]
fn decode_gradient_matches_finite_differences() {
    let gen = Generator::init(&probe_config()).unwrap();
    let z0 = standard_normals(9, 4);
    let z = Tensor::param(z0.clone(), &[1, 1, 2, 2]);
    let d = gen.decode(&z).unwrap();
    let total = d.image.sum_all().add(&d.mask.sum_all());
    let g = grad(&total, &[&z], false).remove(0);
    let f = |v: Vec<f64>| {
        let d = no_grad(|| gen.decode(&Tensor::from_vec(v, &[1, 1, 2, 2]))).unwrap();
        d.image.sum_all().item() + d.mask.sum_all().item()
    };
    let h = 1e-6;
    let scale = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..4 {
        let (mut p, mut m) = (z0.clone(), z0.clone());
        p[i] += h;
        m[i] -= h;
        let num = (f(p) - f(m)) / (2.0 * h);
        assert!((num - g.data()[i]).abs() <= 1e-4 * scale.max(1e-12), "entry {i}: {num} vs {}", g.data()[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn standardized_kernels_have_unit_moments(o in 1usize..5, i in 1usize..4, k in 1usize..4, seed in 0u64..1000) {
        let w = Tensor::from_vec(standard_normals(seed, o * i * k * k).iter().map(|v| 3.0 * v + 1.0).collect(), &[o, i, k, k]);
        let ws = weight_standardize(&w, 1e-10);
        let per = i * k * k;
        if per > 1 {
            for c in ws.data().chunks(per) {
                let mean = c.iter().sum::<f64>() / per as f64;
                let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
                prop_assert!(mean.abs() < 1e-5);
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }
}
