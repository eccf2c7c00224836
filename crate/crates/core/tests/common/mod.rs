//! Random payload generators shared by the persistence tests.

use ndarray::Array2;
use proptest::prelude::*;
use pvn_core::indicators::{sample_task_family, TaskConfig, TaskKind};
use pvn_core::mdp::TransitionDataset;
use pvn_core::nn::{Activation, Encoder, EncoderConfig};
use pvn_core::store::{sha256, Checkpoint, RngState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

pub fn dataset_strategy() -> impl Strategy<Value = TransitionDataset> {
    (0usize..12, 1usize..6, 1u32..6).prop_flat_map(|(n, dim, actions)| {
        (
            prop::collection::vec(any::<f64>(), n * dim),
            prop::collection::vec(0..actions, n),
            prop::collection::vec(any::<f64>(), n * dim),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<u64>(), n),
        )
            .prop_map(move |(obs, acts, next, terminals, episode_ids)| TransitionDataset {
                n_actions: actions,
                observations: Array2::from_shape_vec((n, dim), obs).unwrap(),
                actions: acts,
                next_observations: Array2::from_shape_vec((n, dim), next).unwrap(),
                terminals,
                episode_ids,
            })
    })
}

pub fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    (
        0..TaskKind::ALL.len(),
        any::<u64>(),
        0usize..3,
        prop::bool::ANY,
        ".{0,40}",
        any::<u64>(),
        any::<[u8; 32]>(),
        -1e6..1e6f64,
    )
        .prop_map(|(kind, seed, hidden_layers, tanh, text, step, hash_seed, scale)| {
            let kind = TaskKind::ALL[kind];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = EncoderConfig {
                hidden_layers,
                hidden_width: 4,
                feature_dim: 3,
                feature_activation: if tanh { Activation::Tanh } else { Activation::Relu },
                ..EncoderConfig::default()
            };
            let (obs_dim, n_states) = (3, 6);
            let m = if kind == TaskKind::Singletons { n_states } else { 1 + (seed % 3) as usize };
            let mut encoder = Encoder::new(&config, obs_dim, m, 4, &mut rng).unwrap();
            let flat: Vec<f64> = encoder.net.flatten().iter().map(|w| w * scale).collect();
            encoder.net.assign_flat(&flat).unwrap();
            let mut task_cfg = TaskConfig::new(obs_dim, n_states);
            task_cfg.explicit_subset_size = 2;
            let tasks = sample_task_family(kind, m, seed, &task_cfg).unwrap();
            Checkpoint {
                config_hash: sha256(&hash_seed),
                config_text: text,
                encoder,
                tasks,
                step,
                rng: RngState::capture(&rng),
            }
        })
}
