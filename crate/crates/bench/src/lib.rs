//! Fixtures shared by the benchmarks.

use agcm_core::agcm::{Agcm, AgcmOptions};
use agcm_core::data::{synth_samples, Sample, SceneSpec};
use agcm_core::network::{NetworkConfig, SaliencyNet};
use agcm_core::nn::ParameterStore;
use agcm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// An AGCM at the default options on a `channels×size×size` feature map.
pub fn agcm_fixture(channels: usize, size: usize) -> (Agcm, ParameterStore, Tensor) {
    let agcm = Agcm::new("agcm", AgcmOptions::default().with_channels(channels)).expect("valid options");
    let store = ParameterStore::from_decls(&agcm.decls(), 0).expect("unique paths");
    (agcm, store, random(&[channels, size, size], 1))
}

/// The default toy network, its parameters and `n` training scenes.
pub fn network_fixture(n: usize) -> (SaliencyNet, ParameterStore, Vec<Sample>) {
    let net = SaliencyNet::new(NetworkConfig::default()).expect("default config is valid");
    let store = net.init_params(0).expect("init");
    let samples = synth_samples(n, 0, &SceneSpec::default())
        .expect("scenes")
        .into_iter()
        .map(|s| s.0)
        .collect();
    (net, store, samples)
}
