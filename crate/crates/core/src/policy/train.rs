use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::bev::BevConfig;
use crate::simworld::{Action, Observation, SimConfig, World};

use super::buffer::{RolloutBuffer, StepRecord};
use super::net::{NetConfig, ObsBatch, PolicyNet};
use super::ppo::{hidden_rows, ppo_update, PpoConfig, UpdateReport};
use super::PolicyError;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: u64,
    pub env_steps: u64,
    /// Episodes that ended during this round.
    pub episodes: usize,
    /// Mean undiscounted, unscaled return of those episodes.
    pub mean_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

/// Per-episode seed of a worker; distinct workers and episodes never share one.
pub fn episode_seed(run_seed: u64, worker: usize, episode: u64) -> u64 {
    let mut z = run_seed ^ (worker as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ episode.wrapping_mul(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean undiscounted return of uniformly random actions over `episodes`
/// episodes on the configured map; the reference a learning agent must beat.
pub fn random_policy_return(sim: &SimConfig, episodes: u64, seed: u64) -> Result<f64, PolicyError> {
    let mut world = World::new(sim.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for e in 0..episodes {
        world.reset(episode_seed(seed, 0, e), sim.map, sim.congestion)?;
        loop {
            let step = world.step(Action::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))?;
            total += step.reward;
            if step.done {
                break;
            }
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Owns the learner and its rollout workers. Workers step one after another
/// on the calling thread, which keeps every run reproducible.
pub struct Trainer {
    pub net: PolicyNet,
    pub store: ParamStore<f32>,
    pub ppo: PpoConfig,
    pub sim: SimConfig,
    pub seed: u64,
    pub update: u64,
    pub env_steps: u64,
    envs: Vec<World>,
    obs: Vec<Observation>,
    hidden: Tensor<f32>,
    episode_index: Vec<u64>,
    running_return: Vec<f64>,
    rng: ChaCha8Rng,
    started: Instant,
}

impl Trainer {
    pub fn new(
        sim: &SimConfig,
        net_cfg: &NetConfig,
        bev: &BevConfig,
        ppo: &PpoConfig,
        workers: usize,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let mut store = ParamStore::new();
        let net = PolicyNet::new(&mut store, net_cfg, bev, &sim.rig()?, seed)?;
        Self::resume(sim, net, store, ppo, workers, seed, 0, 0)
    }

    /// Continues from existing parameters and counters. Environments start
    /// fresh episodes whose seeds depend on the step counter.
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        sim: &SimConfig,
        net: PolicyNet,
        store: ParamStore<f32>,
        ppo: &PpoConfig,
        workers: usize,
        seed: u64,
        update: u64,
        env_steps: u64,
    ) -> Result<Self, PolicyError> {
        ppo.validate(workers)?;
        sim.validate()?;
        let mut envs = Vec::with_capacity(workers);
        let mut obs = Vec::with_capacity(workers);
        let episode_index = vec![env_steps; workers];
        for (w, &e) in episode_index.iter().enumerate() {
            let mut world = World::new(sim.clone())?;
            obs.push(world.reset(episode_seed(seed, w, e), sim.map, sim.congestion)?);
            envs.push(world);
        }
        let hidden = net.initial_hidden(workers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + update);
        Ok(Self {
            net,
            store,
            ppo: ppo.clone(),
            sim: sim.clone(),
            seed,
            update,
            env_steps,
            envs,
            obs,
            hidden,
            episode_index,
            running_return: vec![0.0; workers],
            rng,
            started: Instant::now(),
        })
    }

    pub fn workers(&self) -> usize {
        self.envs.len()
    }

    /// Fills a buffer with `horizon` steps per worker; returns it with the
    /// returns of episodes that ended meanwhile.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, Vec<f64>), PolicyError> {
        let workers = self.workers();
        let shape = self.sim.image_shape();
        let mut buf = RolloutBuffer::new(self.ppo.horizon, workers, shape);
        let mut finished = Vec::new();
        for _ in 0..self.ppo.horizon {
            let refs: Vec<&Observation> = self.obs.iter().collect();
            let batch = ObsBatch::<f32>::from_observations(&refs);
            let out = self.net.act(&self.store, &batch, &self.hidden, &mut self.rng, false)?;
            let mut next_hidden = out.hidden.clone();
            for w in 0..workers {
                let a = out.actions[w];
                let step = self.envs[w].step(Action::new(a[0], a[1]))?;
                self.running_return[w] += step.reward;
                let prev = std::mem::replace(&mut self.obs[w], step.observation);
                buf.push(
                    w,
                    StepRecord {
                        images: prev.images.data,
                        road: prev.road,
                        vehicle: prev.vehicle,
                        nav: prev.nav,
                        hidden: hidden_rows(&self.hidden, w),
                        pre_tanh: out.pre_tanh[w],
                        log_prob: out.log_probs[w],
                        value: out.values[w],
                        reward: step.reward * self.ppo.reward_scale,
                        done: step.done,
                    },
                )?;
                if step.done {
                    finished.push(self.running_return[w]);
                    self.running_return[w] = 0.0;
                    self.episode_index[w] += 1;
                    let seed = episode_seed(self.seed, w, self.episode_index[w]);
                    self.obs[w] = self.envs[w].reset(seed, self.sim.map, self.sim.congestion)?;
                    let h = self.net.hidden_size();
                    next_hidden.data[w * h..(w + 1) * h].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            self.hidden = next_hidden;
            self.env_steps += workers as u64;
        }
        // value of the observation after the horizon
        let refs: Vec<&Observation> = self.obs.iter().collect();
        let batch = ObsBatch::<f32>::from_observations(&refs);
        let boot = self.net.act(&self.store, &batch, &self.hidden, &mut self.rng, true)?;
        buf.finish(self.ppo.gamma, self.ppo.gae_lambda, &boot.values)?;
        Ok((buf, finished))
    }

    /// One collection round followed by one PPO update.
    pub fn round(&mut self) -> Result<LogRecord, PolicyError> {
        let (buf, finished) = self.collect()?;
        let report: UpdateReport = ppo_update(&self.net, &mut self.store, &buf, &self.ppo, &mut self.rng)?;
        self.store.check_finite()?;
        self.update += 1;
        Ok(LogRecord {
            update: self.update,
            env_steps: self.env_steps,
            episodes: finished.len(),
            mean_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            policy_loss: report.policy_loss,
            value_loss: report.value_loss,
            entropy: report.entropy,
            kl: report.kl,
            stopped_early: report.stopped_early,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }
}

/// Runs rounds until the step budget is spent. `after_round` sees every log
/// record (and can write checkpoints); a non-finite loss or parameter aborts
/// before the callback, so the last checkpoint written stays the last good one.
pub fn train(
    trainer: &mut Trainer,
    after_round: &mut dyn FnMut(&Trainer, &LogRecord) -> Result<(), PolicyError>,
) -> Result<Vec<LogRecord>, PolicyError> {
    let mut log = Vec::new();
    while trainer.env_steps < trainer.ppo.total_steps {
        let rec = trainer.round()?;
        after_round(trainer, &rec)?;
        log.push(rec);
    }
    Ok(log)
}
