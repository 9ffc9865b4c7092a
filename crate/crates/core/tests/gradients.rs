//! Finite-difference checks of the analytic parameter gradients, in f64, on a
//! tiny network for every architecture variant.

use sdseg::data::{BoundaryOp, SampleRecord};
use sdseg::losses::{joint_loss_with_grads, total_loss_with_grads, CcmReduction, LossWeights};
use sdseg::model::{forward, init_weights, Ablation, Architecture, Component, ModelConfig, NetworkOutput};
use sdseg::synthetic::synth_records;
use sdseg::training::sample_gradients;
use sdseg::weights::{derive_rng, Weights};

use rand::Rng;

fn tiny(skips: bool) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        encoder_channels: vec![2, 3, 4, 6, 8],
        embedding_dim: 4,
        use_skip_connections: skips,
    }
}

fn loss_only(arch: &Architecture, w: &Weights<f64>, rec: &SampleRecord, lw: &LossWeights) -> f64 {
    let img = rec.image.mapv(f64::from);
    match forward(arch, w, img.view()).unwrap() {
        NetworkOutput::Decomposed(r) => {
            total_loss_with_grads(&r, &rec.supervision, lw, arch.has_boundary(), arch.has_projection())
                .unwrap()
                .breakdown
                .total
        }
        NetworkOutput::Joint(l) => joint_loss_with_grads(l.view(), &rec.supervision.label()).unwrap().0.total,
    }
}

/// Central differences on a few random coordinates of every tensor.
fn check(arch: Architecture, lw: LossWeights, seed: u64) {
    let rec = synth_records(1, 0, 16, seed, BoundaryOp::Neighbor).pop().unwrap();
    let mut w = init_weights::<f64>(&arch, seed);
    // Non-zero biases so bias gradients are exercised off the initial point.
    let mut rng = derive_rng(seed, "bias");
    for (name, t) in w.iter_mut() {
        if name.ends_with(".bias") {
            t.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        }
    }
    let (_, grads) = sample_gradients(&arch, &w, &rec, &lw).unwrap();
    let h = 1e-6;
    let l0 = loss_only(&arch, &w, &rec, &lw);
    let names: Vec<String> = w.names().map(String::from).collect();
    let mut checked = 0;
    let mut kinks = 0;
    let mut failures = Vec::new();
    for name in &names {
        let len = w.get(name).unwrap().len();
        for _ in 0..3.min(len) {
            let i = rng.random_range(0..len);
            let orig = w.get(name).unwrap().iter().nth(i).copied().unwrap();
            let set = |w: &mut Weights<f64>, v: f64| {
                *w.get_mut(name).unwrap().iter_mut().nth(i).unwrap() = v;
            };
            set(&mut w, orig + h);
            let lp = loss_only(&arch, &w, &rec, &lw);
            set(&mut w, orig - h);
            let lm = loss_only(&arch, &w, &rec, &lw);
            set(&mut w, orig);
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.get(name).unwrap().iter().nth(i).copied().unwrap();
            checked += 1;
            let tol = |a: f64, b: f64| 1e-6 + 1e-4 * a.abs().max(b.abs());
            if (num - ana).abs() <= tol(num, ana) {
                continue;
            }
            // A ReLU or pooling switch inside the stencil makes the one-sided slopes disagree.
            let (right, left) = ((lp - l0) / h, (l0 - lm) / h);
            if (right - left).abs() > tol(right, left) {
                kinks += 1;
            } else {
                failures.push(format!("{name}[{i}]: numeric {num:.8e} analytic {ana:.8e}"));
            }
        }
    }
    assert!(checked > 50);
    assert!(kinks * 20 <= checked, "{kinks} of {checked} stencils straddle a kink");
    assert!(failures.is_empty(), "{} of {checked} mismatched:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn full_network_gradients() {
    check(Architecture::new(tiny(true), Ablation::full()).unwrap(), LossWeights::default(), 1);
}

#[test]
fn full_network_gradients_with_sum_reduction_and_hinge() {
    let lw = LossWeights {
        ccm_reduction: CcmReduction::Sum,
        ccm_hinge: true,
        alpha: 0.5,
        ..Default::default()
    };
    check(Architecture::new(tiny(true), Ablation::full()).unwrap(), lw, 2);
}

#[test]
fn ablation_variant_gradients() {
    use Component::*;
    for (i, comps) in [vec![SD], vec![SD, SCM], vec![SD, CCM]].into_iter().enumerate() {
        check(Architecture::new(tiny(true), Ablation::of(&comps)).unwrap(), LossWeights::default(), 10 + i as u64);
    }
}

#[test]
fn baseline_gradients() {
    check(Architecture::new(tiny(true), Ablation::baseline()).unwrap(), LossWeights::default(), 20);
}

#[test]
fn no_skip_gradients() {
    for s in [30, 31] {
        check(Architecture::new(tiny(false), Ablation::full()).unwrap(), LossWeights::default(), s);
    }
}
