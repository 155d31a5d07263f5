use std::collections::BTreeMap;

use agcm_core::agcm::AgcmOptions;
use agcm_core::data::{synth_samples, Checkpoint, Sample, SceneSpec};
use agcm_core::network::{NetworkConfig, SaliencyNet};
use agcm_core::nn::ParameterStore;
use agcm_core::training::{
    adam_step, bce_loss, cosine_lr, flip_width, hflip, AdamState, TrainConfig, Trainer,
};
use agcm_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net() -> NetworkConfig {
    NetworkConfig {
        input_size: [32, 32],
        widths: [4, 4, 6, 8, 8],
        agcm: AgcmOptions {
            prototypes: 3,
            edgeconv_layers: 2,
            edge_hidden: 4,
            ..AgcmOptions::default()
        },
        ..NetworkConfig::default()
    }
}

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let spec = SceneSpec {
        height: size,
        width: size,
        ..SceneSpec::default()
    };
    synth_samples(n, seed, &spec).unwrap().into_iter().map(|s| s.0).collect()
}

#[test]
fn bce_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let pred = Tensor::uniform(&[1, 4, 4], 0.01, 0.99, &mut rng);
        let gt = Tensor::new(&[1, 4, 4], (0..16).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect()).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let l = bce_loss(&mut tape, p, &gt).unwrap();
        let want = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
            .sum::<f64>()
            / 16.0;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
    }
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
    let l = bce_loss(&mut tape, half, &Tensor::ones(&[1, 2, 2])).unwrap();
    assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn adam_follows_hand_traces() {
    let traces: [(&[f64], [[f64; 3]; 3]); 2] = [
        (
            &[1.0, 1.0, 1.0],
            [
                [0.1, 0.001, 0.4000000009999999],
                [0.19, 0.001999, 0.3000000020000005],
                [0.271, 0.002997001, 0.20000000300000043],
            ],
        ),
        (
            &[1.0, -2.0, 0.5],
            [
                [0.1, 0.001, 0.4000000009999999],
                [-0.11, 0.004999, 0.4366103534720747],
                [-0.049, 0.005244001, 0.45027941967382135],
            ],
        ),
    ];
    for (grads, expected) in traces {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(0.5));
        let mut state = AdamState::new(&store);
        for (t, (&g, [m, v, theta])) in grads.iter().zip(expected).enumerate() {
            let grad = BTreeMap::from([("w".to_string(), Tensor::scalar(g))]);
            adam_step(&mut store, &grad, &mut state, 0.1).unwrap();
            assert_eq!(state.t, t as u64 + 1);
            assert!((state.m["w"].data()[0] - m).abs() < 1e-12);
            assert!((state.v["w"].data()[0] - v).abs() < 1e-12);
            assert!((store.get("w").unwrap().data()[0] - theta).abs() < 1e-12);
        }
    }
}

#[test]
fn hflip_mirrors_columns() {
    let image = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mask = Tensor::new(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let (fi, fm) = hflip(&image, &mask).unwrap();
    assert_eq!(fi.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    assert_eq!(fm.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
    let once = flip_width(&t).unwrap();
    assert_eq!(flip_width(&once).unwrap(), t);
    for c in 0..3 {
        for x in 0..7 {
            let col = |t: &Tensor, x: usize| (0..5).map(|y| t.at(&[c, y, x])).sum::<f64>();
            assert_eq!(col(&once, 6 - x), col(&t, x));
        }
    }
    assert!(hflip(&t, &Tensor::zeros(&[1, 5, 6])).is_err());
}

#[test]
fn schedule_is_monotone_between_endpoints() {
    let total = 137;
    let mut prev = f64::INFINITY;
    for step in 0..=total {
        let lr = cosine_lr(step, total, 1e-4, 1e-5).unwrap();
        assert!(lr <= prev && (1e-5 - 1e-18..=1e-4).contains(&lr));
        prev = lr;
    }
    assert_eq!(cosine_lr(0, total, 1e-4, 1e-5).unwrap(), 1e-4);
    assert!((cosine_lr(total, total, 1e-4, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
    assert!(cosine_lr(total + 1, total, 1e-4, 1e-5).is_err());
}

#[test]
fn logged_rate_runs_from_start_to_end() {
    let net = SaliencyNet::new(small_net()).unwrap();
    let data = samples(3, 32, 0);
    let trainer = Trainer::new(&net, TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() }, &data).unwrap();
    assert_eq!(trainer.total_steps(), 4);
    let mut state = trainer.init_state().unwrap();
    let mut steps = Vec::new();
    trainer.run(&mut state, |_, log| {
        steps.extend(log.steps.iter().copied());
        Ok(())
    })
    .unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[0].lr, 1e-4);
    assert!((steps[3].lr - 1e-5).abs() < 1e-18);
    assert_eq!(state.step, 4);
    assert_eq!(state.adam.t, 4);
}

#[test]
fn fixed_batch_loss_strictly_decreases() {
    let net = SaliencyNet::new(NetworkConfig::default()).unwrap();
    let data = samples(2, 64, 5);
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 100,
            batch_size: 2,
            seed,
            flip_prob: 0.0,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&net, config, &data).unwrap();
        let mut state = trainer.init_state().unwrap();
        let losses: Vec<f64> = (0..10).map(|_| trainer.train_step(&mut state, &[0, 1]).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

fn loss_trace(net: &SaliencyNet, config: &TrainConfig, data: &[Sample], split: Option<usize>) -> Vec<f64> {
    let trainer = Trainer::new(net, config.clone(), data).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut trace = Vec::new();
    if let Some(at) = split {
        while state.epoch < at {
            trace.extend(trainer.run_epoch(&mut state).unwrap().steps.iter().map(|s| s.loss));
        }
        let bytes = Checkpoint::from_state(&net.config, &state).encode().unwrap();
        state = Checkpoint::decode(&bytes).unwrap().into_state();
    }
    trainer
        .run(&mut state, |_, log| {
            trace.extend(log.steps.iter().map(|s| s.loss));
            Ok(())
        })
        .unwrap();
    trace
}

#[test]
fn training_is_deterministic_and_resumable() {
    let net = SaliencyNet::new(small_net()).unwrap();
    let data = samples(5, 32, 3);
    let config = TrainConfig {
        epochs: 4,
        batch_size: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let full = loss_trace(&net, &config, &data, None);
    assert_eq!(full.len(), 12);
    assert_eq!(full, loss_trace(&net, &config, &data, None));
    let resumed = loss_trace(&net, &config, &data, Some(2));
    for (a, b) in full.iter().zip(&resumed) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(full.len(), resumed.len());
    let other = loss_trace(&net, &TrainConfig { seed: 12, ..config }, &data, None);
    assert_ne!(full, other);
}

#[test]
fn single_sample_overfits() {
    let net = SaliencyNet::new(small_net()).unwrap();
    let data = samples(1, 32, 8);
    let config = TrainConfig {
        epochs: 300,
        batch_size: 1,
        lr_start: 1e-3,
        lr_end: 1e-4,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&net, config, &data).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut last = f64::NAN;
    trainer
        .run(&mut state, |_, log| {
            last = log.loss;
            Ok(())
        })
        .unwrap();
    assert_eq!(state.step, 300);
    assert!(last < 0.05, "{last}");
}

#[test]
fn non_finite_parameters_abort_with_context() {
    let net = SaliencyNet::new(small_net()).unwrap();
    let data = samples(2, 32, 0);
    let trainer = Trainer::new(&net, TrainConfig::default(), &data).unwrap();
    let mut state = trainer.init_state().unwrap();
    state.store.get_mut("head.out.bias").unwrap().data_mut()[0] = f64::NAN;
    match trainer.train_step(&mut state, &[1]) {
        Err(Error::Diverged { epoch, step, .. }) => assert_eq!((epoch, step), (1, 0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_samples_are_rejected() {
    let net = SaliencyNet::new(small_net()).unwrap();
    let data = samples(1, 64, 0);
    assert!(Trainer::new(&net, TrainConfig::default(), &data).is_err());
    assert!(Trainer::new(&net, TrainConfig::default(), &[]).is_err());
    let bad = TrainConfig { lr_end: 1e-3, ..TrainConfig::default() };
    assert!(Trainer::new(&net, bad, &samples(1, 32, 0)).is_err());
}
