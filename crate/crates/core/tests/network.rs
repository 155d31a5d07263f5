use agcm_core::agcm::AgcmOptions;
use agcm_core::network::{NetworkConfig, SaliencyNet, STAGES};
use agcm_core::nn::{Bound, ParamDecl};
use agcm_core::tensor::{grad_check_many, GradCheckOptions};
use agcm_core::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(stages: Vec<usize>) -> NetworkConfig {
    NetworkConfig {
        input_size: [32, 32],
        widths: [4, 4, 6, 8, 8],
        agcm_stages: stages,
        agcm: AgcmOptions {
            prototypes: 3,
            edgeconv_layers: 2,
            k_nn: 2,
            edge_hidden: 4,
            heads: 2,
            ..AgcmOptions::default()
        },
        aspp_rates: vec![1, 2],
    }
}

fn image(seed: u64, size: [usize; 2]) -> Tensor {
    Tensor::uniform(&[3, size[0], size[1]], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn prediction_is_a_mask_and_deterministic() {
    let cfg = small_config(vec![4, 5]);
    let net = SaliencyNet::new(cfg.clone()).unwrap();
    let store = net.init_params(3).unwrap();
    let x = image(1, cfg.input_size);
    let a = net.predict(&store, &x).unwrap();
    let b = net.predict(&store, &x).unwrap();
    assert_eq!(a.shape(), &[1, 32, 32]);
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(a.data(), b.data());
    let again = SaliencyNet::new(cfg).unwrap().init_params(3).unwrap();
    assert_eq!(store, again);
}

#[test]
fn agcm_parameter_delta_matches_declarations() {
    for base in [NetworkConfig::default(), small_config(vec![])] {
        let count = |stages: Vec<usize>| {
            let cfg = NetworkConfig { agcm_stages: stages, ..base.clone() };
            let net = SaliencyNet::new(cfg).unwrap();
            net.decls().iter().map(ParamDecl::numel).sum::<usize>()
        };
        let (none, four, both) = (count(vec![]), count(vec![4]), count(vec![4, 5]));
        let with_both = NetworkConfig { agcm_stages: vec![4, 5], ..base.clone() };
        assert_eq!(both, with_both.param_count());
        assert_eq!(four - none, with_both.agcm_param_delta(4));
        assert_eq!(both - four, with_both.agcm_param_delta(5));
    }
}

/// The delta from enabling an AGCM is the module itself plus the `K` extra
/// input channels seen by the convolutions that consume the widened skip.
#[test]
fn agcm_delta_splits_into_module_and_widened_consumers() {
    let base = NetworkConfig::default();
    let k = base.agcm.prototypes;
    let decls = |stages: Vec<usize>| {
        let net = SaliencyNet::new(NetworkConfig { agcm_stages: stages, ..base.clone() }).unwrap();
        net.decls()
    };
    let without = decls(vec![]);
    for s in [4, 5] {
        let with = decls(vec![s]);
        let prefix = format!("agcm{s}.");
        let module: usize = with.iter().filter(|d| d.path.starts_with(&prefix)).map(ParamDecl::numel).sum();
        assert_eq!(module, base.agcm.with_channels(base.widths[s - 1]).param_count());
        let widened: usize = with
            .iter()
            .filter(|d| !d.path.starts_with(&prefix))
            .zip(&without)
            .map(|(a, b)| {
                assert_eq!(a.path, b.path);
                a.numel() - b.numel()
            })
            .sum();
        let expected_widening = if s == 4 {
            // decoder conv at stage 4: 3×3 kernel, output width of stage 4
            k * 9 * base.widths[3]
        } else {
            let c = base.widths[4];
            let r = base.aspp_rates.len();
            let aspp = |c: usize| agcm_core::network::Aspp::param_count(c, r);
            aspp(c + k) - aspp(c) + k * 9 * base.widths[3]
        };
        assert_eq!(widened, expected_widening, "stage {s}");
        let cfg = NetworkConfig { agcm_stages: vec![s], ..base.clone() };
        assert_eq!(cfg.agcm_param_delta(s), module + widened);
    }
}

#[test]
fn skip_connections_carry_correlation_channels() {
    let cfg = small_config(vec![2, 5]);
    let net = SaliencyNet::new(cfg.clone()).unwrap();
    let store = net.init_params(0).unwrap();
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let x = tape.constant(image(0, cfg.input_size));
    let feats = net.encoder_forward(&mut tape, &params, x).unwrap();
    let skips = net.skip_forward(&mut tape, &params, &feats).unwrap();
    for s in 1..=STAGES {
        let (h, w) = cfg.stage_size(s);
        assert_eq!(tape.shape(skips[s - 1]), &[cfg.skip_width(s), h, w], "stage {s}");
    }
}

#[test]
fn invalid_network_configs_are_rejected() {
    let bad_size = NetworkConfig { input_size: [48, 64], ..NetworkConfig::default() };
    assert!(SaliencyNet::new(bad_size).is_err());
    let bad_stage = NetworkConfig { agcm_stages: vec![6], ..NetworkConfig::default() };
    assert!(SaliencyNet::new(bad_stage).is_err());
    let repeated = NetworkConfig { agcm_stages: vec![4, 4], ..NetworkConfig::default() };
    assert!(SaliencyNet::new(repeated).is_err());
    let net = SaliencyNet::new(NetworkConfig::default()).unwrap();
    let store = net.init_params(0).unwrap();
    assert!(net.predict(&store, &Tensor::zeros(&[3, 32, 32])).is_err());
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let cfg = small_config(vec![4, 5]);
    let net = SaliencyNet::new(cfg.clone()).unwrap();
    let mut store = net.init_params(5).unwrap();
    // Zero biases on weak deep features leave ReLU inputs within h of the
    // kink; random biases move the check to a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (path, t) in store.iter_mut() {
        if path.ends_with(".bias") {
            *t = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
        }
    }
    let fixed: Vec<String> = (1..=STAGES)
        .filter_map(|s| net.agcm(s))
        .flat_map(|a| a.shift_invariant_params())
        .collect();
    let checked: Vec<String> = store.paths().filter(|p| !fixed.contains(p)).cloned().collect();
    let mut inputs = vec![image(2, cfg.input_size)];
    inputs.extend(checked.iter().map(|n| store.get(n).unwrap().clone()));

    let forward = |tape: &mut Tape, vars: &[Var]| {
        let mut pairs: Vec<_> = checked.iter().cloned().zip(vars[1..].iter().copied()).collect();
        pairs.extend(fixed.iter().map(|n| (n.clone(), tape.constant(store.get(n).unwrap().clone()))));
        net.forward(tape, &Bound::from_pairs(pairs), vars[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = forward(&mut tape, &vars).unwrap();
    let base = tape.value(y).clone();
    let r = Tensor::uniform(base.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));

    let opts = GradCheckOptions {
        max_elements: Some(3),
        seed: 1,
        ..GradCheckOptions::default()
    };
    let report = grad_check_many(
        |tape, vars| {
            let y = forward(tape, vars)?;
            let b = tape.constant(base.clone());
            let d = tape.sub(y, b)?;
            let rv = tape.constant(r.clone());
            let p = tape.mul(d, rv)?;
            tape.sum_all(p)
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.checked > 100);
    // Forward round-off over 32×32 outputs is about 1e-10 in a central
    // difference, so entries below 1e-6 are held to an absolute bound.
    let mut above_noise = 0;
    for e in &report.entries {
        let name = if e.input == 0 { "image" } else { checked[e.input - 1].as_str() };
        let scale = e.analytic.abs().max(e.numeric.abs());
        assert!((e.analytic - e.numeric).abs() < 1e-9, "{name}[{}]: {e:?}", e.element);
        if scale >= 1e-6 {
            above_noise += 1;
            assert!(e.rel_err < 2e-4, "{name}[{}]: {e:?}", e.element);
        }
    }
    assert!(above_noise > 50, "{above_noise}");
}
