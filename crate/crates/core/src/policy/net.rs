use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::bev::{BaselineEncoder, BevConfig, ImageExtractor, ScBlock};
use crate::geometry::CameraRig;
use crate::nn::{Bind, Dense, Gru, Init};
use crate::scalar::Scalar;
use crate::simworld::{Observation, NAV_DIM, ROAD_DIM, VEHICLE_DIM};

use super::PolicyError;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LOG_STD_BIAS: f64 = -0.5;

/// Fixed per-feature scales bringing road / vehicle / navigation inputs to O(1).
pub const ROAD_SCALE: [f64; ROAD_DIM] = [1.0, 1.0, 20.0, 20.0, 20.0, 0.25, 0.5, 0.5, 1.0];
pub const VEHICLE_SCALE: [f64; VEHICLE_DIM] = [0.1, 1.0, 1.0, 1.0];
pub const NAV_SCALE: [f64; NAV_DIM] = [0.1, 0.1, 0.1, 0.1, 1.0];

/// Parameter-name prefix of the image channel.
pub const IMAGE_PREFIX: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Bev,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub extractor: ExtractorKind,
    pub road_hidden: usize,
    pub vehicle_hidden: usize,
    pub nav_hidden: usize,
    pub gru_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { extractor: ExtractorKind::Bev, road_hidden: 32, vehicle_hidden: 16, nav_hidden: 16, gru_hidden: 128 }
    }
}

/// Observations stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch<T> {
    /// `(B, cams, 3, H, W)`.
    pub images: Tensor<T>,
    pub road: Tensor<T>,
    pub vehicle: Tensor<T>,
    pub nav: Tensor<T>,
}

fn cast_into<T: Scalar>(out: &mut Vec<T>, src: &[f32]) {
    out.extend(src.iter().map(|&v| T::lit(v as f64)));
}

impl<T: Scalar> ObsBatch<T> {
    pub fn from_parts<'a>(items: impl IntoIterator<Item = ObsRef<'a>>, image_shape: [usize; 4]) -> Self {
        let (mut img, mut road, mut veh, mut nav) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        for o in items {
            assert_eq!(o.images.len(), image_shape.iter().product::<usize>(), "contract violation: image size");
            cast_into(&mut img, o.images);
            cast_into(&mut road, o.road);
            cast_into(&mut veh, o.vehicle);
            cast_into(&mut nav, o.nav);
            n += 1;
        }
        let [c, ch, h, w] = image_shape;
        Self {
            images: Tensor::new(&[n, c, ch, h, w], img),
            road: Tensor::new(&[n, ROAD_DIM], road),
            vehicle: Tensor::new(&[n, VEHICLE_DIM], veh),
            nav: Tensor::new(&[n, NAV_DIM], nav),
        }
    }

    pub fn from_observations(obs: &[&Observation]) -> Self {
        let shape = obs[0].images.shape.as_slice().try_into().expect("observation images are (cams, 3, H, W)");
        Self::from_parts(obs.iter().map(|o| ObsRef::from(*o)), shape)
    }

    pub fn len(&self) -> usize {
        self.road.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Borrowed view of one observation.
#[derive(Debug, Clone, Copy)]
pub struct ObsRef<'a> {
    pub images: &'a [f32],
    pub road: &'a [f32],
    pub vehicle: &'a [f32],
    pub nav: &'a [f32],
}

impl<'a> From<&'a Observation> for ObsRef<'a> {
    fn from(o: &'a Observation) -> Self {
        Self { images: &o.images.data, road: &o.road, vehicle: &o.vehicle, nav: &o.nav }
    }
}

/// Tape variables of one recurrent step over a batch.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `(B, 2)`.
    pub mu: Var,
    /// `(B, 2)`, clamped.
    pub log_std: Var,
    /// `(B)`.
    pub value: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput<T> {
    pub actions: Vec<[f64; 2]>,
    /// Gaussian samples before squashing; these are what the update re-scores.
    pub pre_tanh: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub hidden: Tensor<T>,
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn squash_log_jacobian(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 30.0 { x } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Log-density of the squashed action `tanh(u)` under `tanh(Normal(mu, exp(log_std)))`.
pub fn squashed_log_prob(u: [f64; 2], mu: [f64; 2], log_std: [f64; 2]) -> f64 {
    (0..2)
        .map(|i| {
            let z = (u[i] - mu[i]) / log_std[i].exp();
            -0.5 * z * z - log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln() - squash_log_jacobian(u[i])
        })
        .sum()
}

/// Actor-critic with one extractor per observation channel and GRU fusion.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub cfg: NetConfig,
    extractor: ImageExtractor,
    road: Dense,
    vehicle: Dense,
    nav: Dense,
    gru: Gru,
    actor: Dense,
    critic: Dense,
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl PolicyNet {
    /// Each component draws its initial weights from its own random stream,
    /// so the non-image paths do not depend on which extractor is used.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &NetConfig,
        bev: &BevConfig,
        rig: &CameraRig<f64>,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let extractor = match cfg.extractor {
            ExtractorKind::Bev => ImageExtractor::Bev(ScBlock::new(store, IMAGE_PREFIX, bev, rig, &mut component_rng(seed, 1))?),
            ExtractorKind::Baseline => {
                ImageExtractor::Baseline(BaselineEncoder::new(store, IMAGE_PREFIX, bev, rig, &mut component_rng(seed, 1))?)
            }
        };
        let road = Dense::new(store, "road", ROAD_DIM, cfg.road_hidden, Init::Relu, &mut component_rng(seed, 2))?;
        let vehicle = Dense::new(store, "vehicle", VEHICLE_DIM, cfg.vehicle_hidden, Init::Relu, &mut component_rng(seed, 3))?;
        let nav = Dense::new(store, "nav", NAV_DIM, cfg.nav_hidden, Init::Relu, &mut component_rng(seed, 4))?;
        let fused = extractor.latent_dim() + cfg.road_hidden + cfg.vehicle_hidden + cfg.nav_hidden;
        let gru = Gru::new(store, "gru", fused, cfg.gru_hidden, &mut component_rng(seed, 5))?;
        let actor = Dense::new(store, "actor", cfg.gru_hidden, 4, Init::Gain(0.01), &mut component_rng(seed, 6))?;
        store.tensor_mut(actor.b).data[2..].iter_mut().for_each(|v| *v = T::lit(LOG_STD_BIAS));
        let critic = Dense::new(store, "critic", cfg.gru_hidden, 1, Init::Gain(1.0), &mut component_rng(seed, 7))?;
        Ok(Self { cfg: cfg.clone(), extractor, road, vehicle, nav, gru, actor, critic })
    }

    pub fn extractor(&self) -> &ImageExtractor {
        &self.extractor
    }

    pub fn hidden_size(&self) -> usize {
        self.cfg.gru_hidden
    }

    pub fn initial_hidden<T: Scalar>(&self, batch: usize) -> Tensor<T> {
        Tensor::zeros(&[batch, self.cfg.gru_hidden])
    }

    fn scaled<T: Scalar>(t: &mut Tape<T>, x: &Tensor<T>, scale: &[f64]) -> Var {
        let w = scale.len();
        let data = x.data.iter().enumerate().map(|(i, &v)| v * T::lit(scale[i % w])).collect();
        t.constant(&x.shape, data)
    }

    /// Concatenated per-channel features `(B, fused)` plus the BEV grid when present.
    pub fn fused_inputs<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &mut Bind<T>,
        obs: &ObsBatch<T>,
    ) -> Result<(Var, Option<Var>), PolicyError> {
        let images = t.leaf(obs.images.clone());
        let (latent, grid) = self.extractor.forward(t, p, images);
        check(t, latent, "image extractor")?;
        let mut parts = vec![latent];
        for (layer, x, scale) in [
            (&self.road, &obs.road, &ROAD_SCALE[..]),
            (&self.vehicle, &obs.vehicle, &VEHICLE_SCALE[..]),
            (&self.nav, &obs.nav, &NAV_SCALE[..]),
        ] {
            let xin = Self::scaled(t, x, scale);
            let h = layer.forward(t, p, xin);
            parts.push(t.relu(h));
        }
        let fused = t.concat(&parts, 1);
        check(t, fused, "feature channels")?;
        Ok((fused, grid))
    }

    pub fn recur<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, x: Var, h: Var) -> Var {
        self.gru.forward(t, p, x, h)
    }

    pub fn heads<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, h: Var) -> Result<HeadOutputs, PolicyError> {
        let out = self.actor.forward(t, p, h);
        check(t, out, "actor head")?;
        let mu = t.slice(out, 1, 0, 2);
        let raw = t.slice(out, 1, 2, 2);
        let log_std = t.clamp(raw, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
        let v = self.critic.forward(t, p, h);
        check(t, v, "critic head")?;
        let n = t.shape(v)[0];
        let value = t.reshape(v, &[n]);
        Ok(HeadOutputs { mu, log_std, value })
    }

    /// One recurrent step for a batch of observations. In deterministic mode
    /// the action is `tanh(mu)` and no randomness is consumed.
    pub fn act<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        obs: &ObsBatch<T>,
        hidden: &Tensor<T>,
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<ActOutput<T>, PolicyError> {
        assert_eq!(
            hidden.shape,
            [obs.len(), self.cfg.gru_hidden],
            "contract violation: hidden state shape for a batch of {}",
            obs.len()
        );
        let mut t = Tape::new();
        let mut p = Bind::new(store);
        let (x, _) = self.fused_inputs(&mut t, &mut p, obs)?;
        let h = t.leaf(hidden.clone());
        let h2 = self.recur(&mut t, &mut p, x, h);
        check(&t, h2, "recurrent fusion")?;
        let heads = self.heads(&mut t, &mut p, h2)?;
        let (mu, ls, v) = (t.data(heads.mu), t.data(heads.log_std), t.data(heads.value));
        let n = obs.len();
        let mut out = ActOutput {
            actions: Vec::with_capacity(n),
            pre_tanh: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            hidden: t.value(h2).clone(),
        };
        for b in 0..n {
            let m = [mu[2 * b].as_f64(), mu[2 * b + 1].as_f64()];
            let s = [ls[2 * b].as_f64(), ls[2 * b + 1].as_f64()];
            let u = if deterministic {
                m
            } else {
                let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                [m[0] + s[0].exp() * e[0], m[1] + s[1].exp() * e[1]]
            };
            out.actions.push([u[0].tanh(), u[1].tanh()]);
            out.pre_tanh.push(u);
            out.log_probs.push(squashed_log_prob(u, m, s));
            out.values.push(v[b].as_f64());
        }
        Ok(out)
    }
}

pub(crate) fn check<T: Scalar>(t: &Tape<T>, v: Var, layer: &str) -> Result<(), PolicyError> {
    if t.data(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PolicyError::NonFinite(layer.to_string()))
    }
}
