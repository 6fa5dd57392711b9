mod common;

use common::tiny_unet_config;
use dploda::accountant::dp_sgd_spend;
use dploda::adapters::{attach_loda, LodaConfig};
use dploda::diffusion::{cfg_loss_with, draw_training_inputs, Denoiser, NoiseSchedule};
use dploda::dp::{clip_per_sample, dp_sgd_step, per_sample_grads, DpSgdConfig};
use dploda::nn::{Classifier, ClassifierConfig, UNet};
use dploda::rng::{self, domain};
use dploda::{Error, Graph, Scalar, Tensor};
use rand::Rng;

fn small_classifier() -> Classifier {
    Classifier::new(ClassifierConfig {
        image_size: 16,
        in_channels: 1,
        num_classes: 3,
        width: 4,
    })
    .unwrap()
}

fn random_images<T: Scalar>(n: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let x = Tensor::<T>::randn([n, 1, 16, 16], &mut r);
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    (x, labels)
}

#[test]
fn clipped_norms_respect_bound() {
    let net = small_classifier();
    let store = net.init_params::<f32>(7).unwrap();
    let layout = store.trainable_layout();
    let (x, labels) = random_images::<f32>(64, 1);
    let mut r = rng::seeded(2);
    let (mut clipped, mut kept) = (0, 0);
    for _ in 0..100 {
        let size = r.random_range(1..9);
        let batch: Vec<usize> = (0..size).map(|_| r.random_range(0..64)).collect();
        // Clip norms spanning the observed gradient norms, so that both
        // branches of the rule are exercised.
        let c = 10f64.powf(r.random_range(-1.0..2.0));
        let mut grads = per_sample_grads(&layout, &batch, |i, g: &mut Graph<f32>| {
            let xv = g.constant(x.select_rows(&[i])?);
            let logits = net.forward(g, &store, xv)?;
            g.cross_entropy_loss(logits, &labels[i..i + 1])
        })
        .unwrap();
        let before = grads.clone();
        clip_per_sample(&mut grads, c).unwrap();
        for (k, n) in grads.norms().into_iter().enumerate() {
            assert!(n <= c * (1.0 + 1e-6), "norm {n} above clip {c}");
            if before.norms()[k] <= c {
                assert_eq!(grads.rows[k], before.rows[k]);
                kept += 1;
            } else {
                clipped += 1;
            }
        }
    }
    assert!(clipped > 0 && kept > 0, "clipped {clipped}, kept {kept}");
}

#[test]
fn noiseless_full_batch_step_is_sgd() {
    let net = small_classifier();
    let store = net.init_params::<f64>(3).unwrap();
    let n = 12;
    let (x, labels) = random_images::<f64>(n, 4);
    let cfg = DpSgdConfig {
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        sample_rate: 1.0,
        steps: 1,
        lr: 0.1,
        delta: 1e-5,
        target_epsilon: None,
    };
    let mut dp_store = store.clone();
    let mut acc = cfg.accountant().unwrap();
    let stats = dp_sgd_step(&mut dp_store, &cfg, n, 0, &mut acc, |_, i, s, g| {
        let xv = g.constant(x.select_rows(&[i])?);
        let logits = net.forward(g, s, xv)?;
        g.cross_entropy_loss(logits, &labels[i..i + 1])
    })
    .unwrap();
    assert_eq!(stats.batch_size, n);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = net.forward(&mut g, &store, xv).unwrap();
    let loss = g.cross_entropy_loss(logits, &labels).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    let mut checked = 0;
    for (name, p) in store.iter() {
        let grad = &grads[name];
        let got = dp_store.tensor(name).unwrap();
        for ((&w, &gw), &d) in p.tensor.data().iter().zip(grad.data()).zip(got.data()) {
            let want = w - 0.1 * gw;
            assert!(
                (d - want).abs() <= 1e-5 * want.abs().max(d.abs()).max(1e-12),
                "{name}: {d} vs {want}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, store.counts().1);
}

#[test]
fn frozen_parameters_unchanged_and_one_tick_per_step() {
    let mut net = UNet::new(tiny_unet_config()).unwrap();
    let mut store = net.init_params::<f32>(5).unwrap();
    let lcfg = LodaConfig {
        rank: 2,
        init_seed: 5,
        ..LodaConfig::default()
    };
    attach_loda(&mut net, &mut store, &lcfg).unwrap();
    let frozen: Vec<(String, Vec<u32>)> = store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, p)| (n.to_string(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert!(!frozen.is_empty());
    let trainable_before: Vec<f32> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.tensor.data().to_vec())
        .collect();

    let n = 16;
    let mut r = rng::seeded(6);
    let x = Tensor::<f32>::randn([n, 1, 8, 8], &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let schedule = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let cfg = DpSgdConfig {
        clip_norm: 0.5,
        noise_multiplier: 1.0,
        sample_rate: 0.25,
        steps: 100,
        lr: 0.5,
        delta: 1e-5,
        target_epsilon: None,
    };
    let mut acc = cfg.accountant().unwrap();
    let net = &net;
    for step in 0..100u64 {
        assert_eq!(acc.steps(), step);
        dp_sgd_step(&mut store, &cfg, n, 9, &mut acc, |s, i, st, g| {
            let x0 = x.select_rows(&[i])?;
            let mut dr = rng::substream(9, domain::DIFFUSION, (s << 32) | i as u64);
            let draws = draw_training_inputs(&x0, &labels[i..i + 1], &schedule, 0.1, 3, &mut dr)?;
            cfg_loss_with(&Denoiser::new(net, st), g, &x0, &schedule, &draws)
        })
        .unwrap();
    }
    assert_eq!(acc.steps(), 100);
    assert_eq!(acc.spend().unwrap(), dp_sgd_spend(0.25, 1.0, 100, 1e-5).unwrap());
    for (name, bits) in &frozen {
        let now: Vec<u32> = store.tensor(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&now, bits, "frozen parameter {name} changed");
    }
    let trainable_after: Vec<f32> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    assert_ne!(trainable_before, trainable_after);
}

#[test]
fn exhausted_budget_halts_before_the_step() {
    let net = small_classifier();
    let mut store = net.init_params::<f32>(1).unwrap();
    let (x, labels) = random_images::<f32>(20, 8);
    let cfg = DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: 0.8,
        sample_rate: 0.2,
        steps: 1000,
        lr: 0.1,
        delta: 1e-5,
        target_epsilon: Some(3.0),
    };
    let mut acc = cfg.accountant().unwrap();
    let mut last = store.clone();
    let err = loop {
        match dp_sgd_step(&mut store, &cfg, 20, 0, &mut acc, |_, i, s, g| {
            let xv = g.constant(x.select_rows(&[i])?);
            let logits = net.forward(g, s, xv)?;
            g.cross_entropy_loss(logits, &labels[i..i + 1])
        }) {
            Ok(_) => last = store.clone(),
            Err(e) => break e,
        }
    };
    let spent = acc.spend().unwrap().epsilon;
    assert!(spent <= 3.0);
    assert!(acc.spend_after(acc.steps() + 1).unwrap().epsilon > 3.0);
    assert!(matches!(err, Error::BudgetExhausted { steps, .. } if steps == acc.steps()));
    for (name, p) in store.iter() {
        assert_eq!(p.tensor, last.tensor(name).unwrap().clone());
    }
}
