use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::nn::Bind;
use crate::scalar::Scalar;

use super::buffer::RolloutBuffer;
use super::net::{squash_log_jacobian, ObsBatch, PolicyNet};
use super::PolicyError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Steps collected per worker between updates.
    pub horizon: usize,
    /// Contiguous steps replayed through the recurrent core from a stored state.
    pub chunk_len: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// An update stops early once the approximate KL divergence exceeds this.
    pub kl_abort: f64,
    /// Multiplies environment rewards before they reach the learner.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            horizon: 128,
            chunk_len: 16,
            total_steps: 300_000,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            kl_abort: 0.5,
            reward_scale: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, workers: usize) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad(format!("gamma {} and gae_lambda {} must lie in (0, 1]", self.gamma, self.gae_lambda));
        }
        if !(self.clip > 0.0 && self.clip <= 0.5) {
            return bad(format!("clip {} must lie in (0, 0.5]", self.clip));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 || self.chunk_len == 0 || workers == 0 {
            return bad("epochs, minibatches, horizon, chunk_len and workers must be positive".into());
        }
        if self.horizon % self.chunk_len != 0 {
            return bad(format!("chunk_len {} does not divide horizon {}", self.chunk_len, self.horizon));
        }
        if workers * self.horizon / self.chunk_len < self.minibatches {
            return bad(format!(
                "{} chunks cannot fill {} minibatches",
                workers * self.horizon / self.chunk_len,
                self.minibatches
            ));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0 && self.kl_abort > 0.0 && self.reward_scale > 0.0) {
            return bad("learning_rate, max_grad_norm, kl_abort and reward_scale must be positive".into());
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return bad("loss coefficients must be non-negative".into());
        }
        Ok(())
    }
}

/// Mean losses over the minibatch steps actually taken.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub steps_taken: usize,
    pub stopped_early: bool,
}

struct MinibatchLoss {
    total: Var,
    policy: Var,
    value: Var,
    entropy: Var,
    kl: f64,
}

/// Clipped surrogate objective for one minibatch of `(worker, start)` chunks.
fn minibatch_loss<T: Scalar>(
    net: &PolicyNet,
    t: &mut Tape<T>,
    p: &mut Bind<T>,
    buf: &RolloutBuffer,
    chunks: &[(usize, usize)],
    cfg: &PpoConfig,
) -> Result<MinibatchLoss, PolicyError> {
    let (m, len) = (chunks.len(), cfg.chunk_len);
    let obs = ObsBatch::<T>::from_parts(
        chunks.iter().flat_map(|&(w, s)| (s..s + len).map(move |k| buf.step(w, k).obs())),
        buf.image_shape,
    );
    let (x_all, _) = net.fused_inputs(t, p, &obs)?;
    let hs = net.hidden_size();
    let h0: Vec<T> =
        chunks.iter().flat_map(|&(w, s)| buf.step(w, s).hidden.iter().map(|&v| T::lit(v as f64))).collect();
    let mut h = t.constant(&[m, hs], h0);
    let mut outs = Vec::with_capacity(len);
    for k in 0..len {
        let rows: Vec<usize> = (0..m).map(|c| c * len + k).collect();
        let xk = t.gather_rows(x_all, &rows);
        h = net.recur(t, p, xk, h);
        outs.push(h);
        if chunks.iter().any(|&(w, s)| buf.step(w, s + k).done) {
            let mask: Vec<T> = chunks
                .iter()
                .flat_map(|&(w, s)| {
                    let keep = if buf.step(w, s + k).done { T::zero() } else { T::one() };
                    std::iter::repeat(keep).take(hs)
                })
                .collect();
            let mask = t.constant(&[m, hs], mask);
            h = t.mul(h, mask);
        }
    }
    let all = t.concat(&outs, 0);
    let heads = net.heads(t, p, all)?;
    // rows are step-major: row = k * m + chunk
    let n = m * len;
    let (mut u, mut old, mut adv, mut ret, mut jac) =
        (Vec::with_capacity(2 * n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..len {
        for &(w, s) in chunks {
            let rec = buf.step(w, s + k);
            u.extend(rec.pre_tanh.map(T::lit));
            old.push(T::lit(rec.log_prob));
            adv.push(T::lit(buf.advantage(w, s + k)));
            ret.push(T::lit(buf.return_of(w, s + k)));
            jac.push(T::lit(squash_log_jacobian(rec.pre_tanh[0]) + squash_log_jacobian(rec.pre_tanh[1])));
        }
    }
    let u = t.constant(&[n, 2], u);
    let old = t.constant(&[n], old);
    let adv = t.constant(&[n], adv);
    let ret = t.constant(&[n], ret);
    let jac = t.constant(&[n], jac);

    let lp = t.gaussian_log_prob(u, heads.mu, heads.log_std);
    let lp = t.sum(lp, Some(1));
    let new = t.sub(lp, jac);
    let diff = t.sub(new, old);
    let ratio = t.exp(diff);
    let kl = {
        let (r, d) = (t.data(ratio), t.data(diff));
        r.iter().zip(d).map(|(&r, &d)| (r - T::one() - d).as_f64()).sum::<f64>() / n as f64
    };
    let s1 = t.mul(ratio, adv);
    let clipped = t.clamp(ratio, T::lit(1.0 - cfg.clip), T::lit(1.0 + cfg.clip));
    let s2 = t.mul(clipped, adv);
    let surrogate = t.minimum(s1, s2);
    let surrogate = t.mean(surrogate, None);
    let policy = t.scale(surrogate, -T::one());
    let vd = t.sub(heads.value, ret);
    let sq = t.mul(vd, vd);
    let value = t.mean(sq, None);
    let ls = t.sum(heads.log_std, Some(1));
    let ls = t.mean(ls, None);
    let entropy = t.add_scalar(ls, T::lit(1.0 + (2.0 * std::f64::consts::PI).ln()));
    let wv = t.scale(value, T::lit(cfg.value_coef));
    let we = t.scale(entropy, T::lit(-cfg.entropy_coef));
    let total = t.add(policy, wv);
    let total = t.add(total, we);
    Ok(MinibatchLoss { total, policy, value, entropy, kl })
}

fn chunk_starts(buf: &RolloutBuffer, len: usize) -> Vec<(usize, usize)> {
    (0..buf.workers).flat_map(|w| (0..buf.horizon / len).map(move |c| (w, c * len))).collect()
}

/// Total loss over the whole buffer at the current parameters, without updating.
pub fn surrogate_loss<T: Scalar>(
    net: &PolicyNet,
    store: &ParamStore<T>,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
) -> Result<f64, PolicyError> {
    let mut t = Tape::new();
    let mut p = Bind::new(store);
    let l = minibatch_loss(net, &mut t, &mut p, buf, &chunk_starts(buf, cfg.chunk_len), cfg)?;
    Ok(t.value(l.total).item().as_f64())
}

/// Clipped-surrogate PPO epochs over a finished buffer; one Adam step per minibatch.
pub fn ppo_update<T: Scalar>(
    net: &PolicyNet,
    store: &mut ParamStore<T>,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateReport, PolicyError> {
    assert!(buf.is_finished(), "contract violation: advantages must be computed before the update");
    cfg.validate(buf.workers)?;
    let mut chunks = chunk_starts(buf, cfg.chunk_len);
    let adam = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let mut report = UpdateReport::default();
    'epochs: for _ in 0..cfg.epochs {
        chunks.shuffle(rng);
        let per = chunks.len() / cfg.minibatches;
        for mb in chunks.chunks(per).take(cfg.minibatches) {
            let mut t = Tape::new();
            let mut p = Bind::new(&*store);
            let l = minibatch_loss(net, &mut t, &mut p, buf, mb, cfg)?;
            let total = t.value(l.total).item();
            if !total.is_finite() {
                return Err(PolicyError::NonFinite("loss".into()));
            }
            if l.kl > cfg.kl_abort {
                report.stopped_early = true;
                break 'epochs;
            }
            report.policy_loss += t.value(l.policy).item().as_f64();
            report.value_loss += t.value(l.value).item().as_f64();
            report.entropy += t.value(l.entropy).item().as_f64();
            report.kl += l.kl;
            report.steps_taken += 1;
            t.backward(l.total);
            drop(p);
            store.accumulate_grads(&t);
            store.clip_grad_norm(T::lit(cfg.max_grad_norm));
            store.adam_step(&adam)?;
        }
    }
    if report.steps_taken > 0 {
        let k = report.steps_taken as f64;
        report.policy_loss /= k;
        report.value_loss /= k;
        report.entropy /= k;
        report.kl /= k;
    }
    Ok(report)
}

/// Stacked hidden states of one worker batch, as stored in step records.
pub fn hidden_rows<T: Scalar>(hidden: &Tensor<T>, row: usize) -> Vec<f32> {
    let h = hidden.shape[1];
    hidden.data[row * h..(row + 1) * h].iter().map(|v| v.as_f64() as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::BevConfig;
    use crate::geometry::{BevGridSpec, CameraRig, Mount, RigKind};
    use crate::policy::net::{ExtractorKind, NetConfig};
    use crate::policy::StepRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: [usize; 4] = [3, 3, 8, 16];

    fn setup() -> (PolicyNet, ParamStore<f64>, RolloutBuffer, PpoConfig) {
        let bev = BevConfig {
            depth_bins: 4,
            downsample: 4,
            grid: BevGridSpec::new(16.0, 16.0, 2.0).unwrap(),
            context_channels: 4,
            latent_dim: 8,
            image_channels: vec![4, 4],
            bev_channels: vec![4],
            ..BevConfig::default()
        };
        let rig = CameraRig::standard(RigKind::Surround3x120, 16, 8, Mount::default()).unwrap();
        let mut store = ParamStore::new();
        let cfg = NetConfig { extractor: ExtractorKind::Bev, gru_hidden: 8, ..NetConfig::default() };
        let net = PolicyNet::new(&mut store, &cfg, &bev, &rig, 3).unwrap();
        let ppo = PpoConfig { horizon: 16, chunk_len: 8, minibatches: 2, epochs: 1, ..PpoConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut buf = RolloutBuffer::new(16, 2, SHAPE);
        for w in 0..2 {
            let mut h = net.initial_hidden::<f64>(1);
            for k in 0..16 {
                let images: Vec<f32> = (0..SHAPE.iter().product()).map(|_| rng.gen::<f32>()).collect();
                let road: [f32; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let vehicle: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let nav: [f32; 5] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
                let obs = ObsBatch::<f64>::from_parts(
                    [crate::policy::ObsRef { images: &images, road: &road, vehicle: &vehicle, nav: &nav }],
                    SHAPE,
                );
                let out = net.act(&store, &obs, &h, &mut rng, false).unwrap();
                let done = w == 0 && k == 5;
                buf.push(
                    w,
                    StepRecord {
                        images,
                        road,
                        vehicle,
                        nav,
                        hidden: hidden_rows(&h, 0),
                        pre_tanh: out.pre_tanh[0],
                        log_prob: out.log_probs[0],
                        value: out.values[0],
                        reward: rng.gen_range(-1.0..1.0),
                        done,
                    },
                )
                .unwrap();
                h = if done { net.initial_hidden(1) } else { out.hidden };
            }
        }
        buf.finish(0.99, 0.95, &[0.0, 0.5]).unwrap();
        (net, store, buf, ppo)
    }

    fn policy_loss(net: &PolicyNet, store: &ParamStore<f64>, buf: &RolloutBuffer, cfg: &PpoConfig) -> (f64, f64) {
        let mut t = Tape::new();
        let mut p = Bind::new(store);
        let l = minibatch_loss(net, &mut t, &mut p, buf, &chunk_starts(buf, cfg.chunk_len), cfg).unwrap();
        (t.value(l.policy).item(), l.kl)
    }

    #[test]
    fn unchanged_policy_has_unit_ratio_and_zero_policy_loss() {
        let (net, store, buf, cfg) = setup();
        let (pl, kl) = policy_loss(&net, &store, &buf, &cfg);
        // hidden-state replay reproduces the acting pass, so every ratio is 1
        // and the loss is minus the mean normalized advantage
        assert!(pl.abs() < 1e-6, "policy loss {pl}");
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn large_ratio_is_clipped() {
        let (net, store, buf, cfg) = setup();
        let mut shifted = buf.clone();
        shifted.clear();
        for w in 0..2 {
            for k in 0..16 {
                let mut rec = buf.step(w, k).clone();
                rec.log_prob -= 1.5f64.ln();
                shifted.push(w, rec).unwrap();
            }
        }
        // every ratio is 1.5 and every advantage +1, so each term is capped at 1.2
        shifted.set_targets(vec![vec![1.0; 16]; 2], vec![vec![0.0; 16]; 2]);
        let (pl, _) = policy_loss(&net, &store, &shifted, &cfg);
        assert!((pl + 1.2).abs() < 1e-6, "policy loss {pl}");
    }

    #[test]
    fn one_small_step_lowers_the_surrogate() {
        let (net, mut store, buf, mut cfg) = setup();
        cfg.learning_rate = 1e-4;
        cfg.minibatches = 1;
        let before = surrogate_loss(&net, &store, &buf, &cfg).unwrap();
        let rep = ppo_update(&net, &mut store, &buf, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rep.steps_taken, 1);
        let after = surrogate_loss(&net, &store, &buf, &cfg).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn config_bounds() {
        assert!(PpoConfig::default().validate(1).is_ok());
        assert!(PpoConfig { clip: 0.6, ..PpoConfig::default() }.validate(1).is_err());
        assert!(PpoConfig { gamma: 0.0, ..PpoConfig::default() }.validate(1).is_err());
        assert!(PpoConfig { chunk_len: 5, ..PpoConfig::default() }.validate(1).is_err());
    }
}
