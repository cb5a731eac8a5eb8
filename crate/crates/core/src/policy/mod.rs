//! Recurrent actor-critic driving policy trained with PPO.

pub mod buffer;
pub mod net;
pub mod ppo;
pub mod train;

use thiserror::Error;

use crate::autodiff::TrainingError;
use crate::bev::BevError;
use crate::simworld::SimError;

pub use buffer::{compute_gae, normalize, RolloutBuffer, StepRecord};
pub use net::{squashed_log_prob, ActOutput, ExtractorKind, NetConfig, ObsBatch, ObsRef, PolicyNet, IMAGE_PREFIX};
pub use ppo::{ppo_update, surrogate_loss, PpoConfig, UpdateReport};
pub use train::{episode_seed, random_policy_return, train, LogRecord, Trainer};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("rollout buffer lane {0} is full")]
    BufferFull(usize),
    #[error("rollout buffer holds {0} of {1} steps")]
    BufferNotFull(usize, usize),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Params(#[from] TrainingError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Tensor};
    use crate::bev::BevConfig;
    use crate::geometry::{BevGridSpec, CameraRig, Mount, RigKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_bev() -> BevConfig {
        BevConfig {
            depth_bins: 4,
            downsample: 4,
            grid: BevGridSpec::new(16.0, 16.0, 2.0).unwrap(),
            context_channels: 4,
            latent_dim: 8,
            image_channels: vec![4, 4],
            bev_channels: vec![4],
            ..BevConfig::default()
        }
    }

    fn small_net(kind: ExtractorKind, store: &mut ParamStore<f64>, seed: u64) -> PolicyNet {
        let cfg = NetConfig { extractor: kind, gru_hidden: 8, ..NetConfig::default() };
        let rig = CameraRig::standard(RigKind::Surround3x120, 16, 8, Mount::default()).unwrap();
        PolicyNet::new(store, &cfg, &small_bev(), &rig, seed).unwrap()
    }

    fn random_obs(n: usize, rng: &mut ChaCha8Rng) -> ObsBatch<f64> {
        let mut g = |shape: &[usize], s: f64| {
            Tensor::new(shape, (0..shape.iter().product()).map(|_| s * rng.gen_range(-1.0..1.0)).collect())
        };
        ObsBatch {
            images: g(&[n, 3, 3, 8, 16], 1.0).map_abs(),
            road: g(&[n, 9], 2.0),
            vehicle: g(&[n, 4], 5.0),
            nav: g(&[n, 5], 10.0),
        }
    }

    trait Abs {
        fn map_abs(self) -> Self;
    }
    impl Abs for Tensor<f64> {
        fn map_abs(mut self) -> Self {
            self.data.iter_mut().for_each(|v| *v = v.abs());
            self
        }
    }

    #[test]
    fn actions_are_bounded_and_reproducible() {
        let mut store = ParamStore::new();
        let net = small_net(ExtractorKind::Bev, &mut store, 1);
        let obs = random_obs(3, &mut ChaCha8Rng::seed_from_u64(2));
        let h = net.initial_hidden(3);
        let a = net.act(&store, &obs, &h, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        let b = net.act(&store, &obs, &h, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        assert_eq!(a, b);
        assert!(a.actions.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.log_probs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_and_floor_sigma_act_as_tanh_mu() {
        let mut store = ParamStore::new();
        let net = small_net(ExtractorKind::Baseline, &mut store, 1);
        let obs = random_obs(2, &mut ChaCha8Rng::seed_from_u64(2));
        let h = net.initial_hidden(2);
        let det = net.act(&store, &obs, &h, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        let b = store.id("actor.b").unwrap();
        store.tensor_mut(b).data[2..].iter_mut().for_each(|v| *v = -1e3);
        let w = store.id("actor.w").unwrap();
        let width = store.tensor(w).shape[1];
        let rows = store.tensor(w).shape[0];
        for r in 0..rows {
            store.tensor_mut(w).data[r * width + 2] = 0.0;
            store.tensor_mut(w).data[r * width + 3] = 0.0;
        }
        let sampled = net.act(&store, &obs, &h, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        for (x, y) in det.actions.iter().flatten().zip(sampled.actions.iter().flatten()) {
            assert!((x - y).abs() < 0.05, "{x} vs {y}");
        }
        for (u, a) in det.pre_tanh.iter().zip(&det.actions) {
            assert_eq!([u[0].tanh(), u[1].tanh()], *a);
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mu, ls) = ([0.3, -0.2], [-0.7, -0.4]);
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let a: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let u = [a[0].atanh(), a[1].atanh()];
            total += squashed_log_prob(u, mu, ls).exp();
        }
        let integral = 4.0 * total / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn extractor_choice_leaves_other_channels_untouched() {
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        small_net(ExtractorKind::Bev, &mut a, 5);
        small_net(ExtractorKind::Baseline, &mut b, 5);
        let mut shared = 0;
        for (name, t) in a.iter().filter(|(n, _)| !n.starts_with(IMAGE_PREFIX)) {
            let other = b.tensor(b.id(name).unwrap());
            assert_eq!(t.shape, other.shape, "{name}");
            assert_eq!(t.data, other.data, "{name}");
            shared += 1;
        }
        assert!(shared >= 10);
        assert!(a.iter().any(|(n, _)| n.starts_with("image.")));
    }
}
