//! Architecture-level contracts: shapes at the default size, the frozen parameter
//! count, batching, purity and inference independence from auxiliary heads.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use sdseg::model::{
    encode, forward, forward_batch, init_weights, is_auxiliary_param, Ablation, Architecture, HeadMode, ModelConfig,
    NetworkOutput,
};
use sdseg::inference::predict;
use sdseg::weights::derive_rng;

fn random_image(size: usize, seed: u64) -> Array3<f32> {
    let mut rng = derive_rng(seed, "image");
    Array3::from_shape_simple_fn((3, size, size), || rng.random_range(0.0..1.0))
}

fn small() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        encoder_channels: vec![4, 8, 12, 16, 24],
        embedding_dim: 8,
        use_skip_connections: true,
    }
}

#[test]
fn default_shapes_at_128() {
    let arch = Architecture::sdnet(ModelConfig::default()).unwrap();
    let w = init_weights::<f32>(&arch, 0);
    let img = random_image(128, 0);
    let (f, skips) = encode(&arch, &w, img.view()).unwrap();
    assert_eq!(f.values.dim(), (1024, 8, 8));
    let skip_dims: Vec<_> = skips.iter().map(|s| s.values.dim()).collect();
    assert_eq!(skip_dims, [(64, 128, 128), (128, 64, 64), (256, 32, 32), (512, 16, 16)]);
    let NetworkOutput::Decomposed(r) = forward(&arch, &w, img.view()).unwrap() else {
        panic!("decomposed network expected");
    };
    for b in [&r.teeth, &r.plaque] {
        assert_eq!(b.mask_logits.dim(), (2, 128, 128));
        assert_eq!(b.boundary_logits.as_ref().unwrap().dim(), (1, 128, 128));
        assert_eq!(b.embeddings.as_ref().unwrap().dim(), (64, 64));
    }
}

#[test]
fn bottleneck_at_64() {
    let cfg = ModelConfig {
        input_size: 64,
        ..ModelConfig::default()
    };
    let arch = Architecture::sdnet(cfg).unwrap();
    let w = init_weights::<f32>(&arch, 0);
    let (f, _) = encode(&arch, &w, random_image(64, 1).view()).unwrap();
    assert_eq!(f.values.dim(), (1024, 4, 4));
}

#[test]
fn input_size_must_divide_by_16() {
    let cfg = ModelConfig {
        input_size: 100,
        ..ModelConfig::default()
    };
    assert!(Architecture::sdnet(cfg).is_err());
}

/// Frozen parameter counts of the shipped configurations.
#[test]
fn parameter_counts_match_golden() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("golden/parameter_counts.json")).unwrap();
    let count = |abl: Ablation| Architecture::new(ModelConfig::default(), abl).unwrap().parameter_count();
    use sdseg::model::Component::*;
    let actual = serde_json::json!({
        "sdnet": count(Ablation::full()),
        "sd-only": count(Ablation::of(&[SD])),
        "sd+scm": count(Ablation::of(&[SD, SCM])),
        "sd+ccm": count(Ablation::of(&[SD, CCM])),
        "unet-baseline": count(Ablation::baseline()),
    });
    assert_eq!(actual, golden, "actual counts: {actual}");
    let arch = Architecture::sdnet(ModelConfig::default()).unwrap();
    assert_eq!(init_weights::<f32>(&arch, 0).parameter_count(), arch.parameter_count());
}

#[test]
fn batched_forward_matches_loop() {
    let arch = Architecture::sdnet(small()).unwrap();
    let w = init_weights::<f32>(&arch, 3);
    let imgs: Vec<Array3<f32>> = (0..3).map(|i| random_image(32, 10 + i)).collect();
    let views: Vec<_> = imgs.iter().map(|i| i.view()).collect();
    let batch: Array4<f32> = ndarray::stack(Axis(0), &views).unwrap();
    let batched = forward_batch(&arch, &w, batch.view(), HeadMode::All).unwrap();
    for (img, out) in imgs.iter().zip(&batched) {
        let single = forward(&arch, &w, img.view()).unwrap();
        let (NetworkOutput::Decomposed(a), NetworkOutput::Decomposed(b)) = (&single, out) else {
            panic!("decomposed expected");
        };
        for (x, y) in a.plaque.mask_logits.iter().zip(b.plaque.mask_logits.iter()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let arch = Architecture::sdnet(small()).unwrap();
    let w = init_weights::<f32>(&arch, 5);
    let img = random_image(32, 5);
    let a = forward(&arch, &w, img.view()).unwrap();
    let b = forward(&arch, &w, img.view()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn perturbing_plaque_weights_leaves_teeth_outputs_identical() {
    let arch = Architecture::sdnet(small()).unwrap();
    let w = init_weights::<f32>(&arch, 6);
    let mut w2 = w.clone();
    for (name, t) in w2.iter_mut() {
        if name.starts_with("plaque.") {
            t.mapv_inplace(|v| v * 1.5 + 0.01);
        }
    }
    let img = random_image(32, 6);
    let (NetworkOutput::Decomposed(a), NetworkOutput::Decomposed(b)) =
        (forward(&arch, &w, img.view()).unwrap(), forward(&arch, &w2, img.view()).unwrap())
    else {
        panic!("decomposed expected");
    };
    assert_eq!(a.teeth, b.teeth);
    assert_ne!(a.plaque.mask_logits, b.plaque.mask_logits);
}

#[test]
fn predict_ignores_auxiliary_heads() {
    let arch = Architecture::sdnet(small()).unwrap();
    let w = init_weights::<f32>(&arch, 7);
    let mut stripped = w.clone();
    let aux: Vec<String> = w.names().filter(|n| is_auxiliary_param(n)).map(String::from).collect();
    assert!(!aux.is_empty());
    for n in &aux {
        stripped.remove(n);
    }
    let img = random_image(32, 7);
    assert_eq!(predict(&arch, &w, img.view()).unwrap(), predict(&arch, &stripped, img.view()).unwrap());
}
