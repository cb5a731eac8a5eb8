use rand::Rng;
use serde::{Deserialize, Serialize};

use bevdrive::autodiff::{ParamStore, Tape, TrainingError, Var};
use bevdrive::nn::{Bind, Conv, Init};
use bevdrive::simworld::CLASS_COUNT;
use bevdrive::Scalar;

use crate::SegError;

pub const SEG_PREFIX: &str = "seg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    /// Widths of the three encoder levels (full, half and quarter resolution).
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Fraction of frames held out for evaluation.
    pub holdout: f64,
    /// Cross-entropy weight per class; vehicles cover few cells.
    pub class_weights: [f64; 3],
    /// Frames collected for a dataset.
    pub frames: usize,
    /// Environment steps between recorded frames.
    pub frame_stride: usize,
    /// Probability of keeping a frame that shows no vehicle.
    pub empty_keep: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            max_grad_norm: 5.0,
            holdout: 0.2,
            class_weights: [1.0, 1.0, 4.0],
            frames: 1500,
            frame_stride: 4,
            empty_keep: 0.1,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: String| Err(SegError::Config(m));
        if self.channels.contains(&0) {
            return bad(format!("channel widths must be positive, got {:?}", self.channels));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.frames < 2 || self.frame_stride == 0 {
            return bad("epochs, batch_size, frame_stride must be positive and frames at least 2".into());
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return bad(format!("holdout must lie in (0, 1), got {}", self.holdout));
        }
        if !(0.0..=1.0).contains(&self.empty_keep) {
            return bad(format!("empty_keep must lie in [0, 1], got {}", self.empty_keep));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive".into());
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class weights must be non-negative and not all zero, got {:?}", self.class_weights));
        }
        Ok(())
    }
}

/// Three-level convolutional encoder-decoder. Each decoder level upsamples,
/// concatenates the encoder features of the same resolution and convolves.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    enc: [Conv; 3],
    dec: [Conv; 2],
    head: Conv,
}

impl SegDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        channels: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self, TrainingError> {
        let [c1, c2, c3] = channels;
        let r = Init::Relu;
        let enc = [
            Conv::new(store, &format!("{name}.enc1"), in_channels, c1, 3, 1, r, rng)?,
            Conv::new(store, &format!("{name}.enc2"), c1, c2, 3, 2, r, rng)?,
            Conv::new(store, &format!("{name}.enc3"), c2, c3, 3, 2, r, rng)?,
        ];
        let dec = [
            Conv::new(store, &format!("{name}.dec2"), c3 + c2, c2, 3, 1, r, rng)?,
            Conv::new(store, &format!("{name}.dec1"), c2 + c1, c1, 3, 1, r, rng)?,
        ];
        let head = Conv::new(store, &format!("{name}.head"), c1, CLASS_COUNT, 1, 1, Init::Gain(1.0), rng)?;
        Ok(Self { enc, dec, head })
    }

    pub fn in_channels(&self) -> usize {
        self.enc[0].in_channels
    }

    /// `(B, C, nx, ny)` grid → `(B, 3, nx, ny)` class logits; `nx` and `ny`
    /// must be multiples of 4.
    pub fn decode<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, grid: Var) -> Var {
        let s = t.shape(grid).to_vec();
        assert!(
            s.len() == 4 && s[1] == self.in_channels() && s[2] % 4 == 0 && s[3] % 4 == 0,
            "contract violation: decoder expects (B, {}, 4k, 4m) grids, got {s:?}",
            self.in_channels()
        );
        let mut conv_relu = |t: &mut Tape<T>, c: &Conv, x: Var| {
            let y = c.forward(t, p, x);
            t.relu(y)
        };
        let e1 = conv_relu(t, &self.enc[0], grid);
        let e2 = conv_relu(t, &self.enc[1], e1);
        let e3 = conv_relu(t, &self.enc[2], e2);
        let u = t.upsample2x(e3);
        let x = t.concat(&[u, e2], 1);
        let d2 = conv_relu(t, &self.dec[0], x);
        let u = t.upsample2x(d2);
        let x = t.concat(&[u, e1], 1);
        let d1 = conv_relu(t, &self.dec[1], x);
        self.head.forward(t, p, d1)
    }
}

/// Per-cell argmax of `(B, K, nx, ny)` logits; ties go to the lowest class.
pub fn argmax_masks<T: Scalar>(logits: &[T], shape: &[usize]) -> Vec<Vec<u8>> {
    assert_eq!(shape.len(), 4, "contract violation: logits shape {shape:?}");
    let (b, k, cells) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..b)
        .map(|n| {
            (0..cells)
                .map(|i| {
                    let at = |c: usize| logits[(n * k + c) * cells + i];
                    let mut best = 0;
                    for c in 1..k {
                        if at(c) > at(best) {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use bevdrive::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(store: &mut ParamStore<f64>) -> SegDecoder {
        SegDecoder::new(store, SEG_PREFIX, 2, [3, 4, 5], &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn grid(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[2, 2, 8, 12], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_matches_grid_shape() {
        let mut store = ParamStore::new();
        let d = net(&mut store);
        let mut t = Tape::new();
        let g = t.leaf(grid(0));
        let out = d.decode(&mut t, &mut Bind::new(&store), g);
        assert_eq!(t.shape(out), &[2, 3, 8, 12]);
    }

    #[test]
    fn zero_parameters_give_uniform_logits_and_class_zero() {
        let mut store = ParamStore::new();
        let d = net(&mut store);
        for id in store.ids().collect::<Vec<_>>() {
            store.tensor_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let g = t.leaf(grid(3));
        let out = d.decode(&mut t, &mut Bind::new(&store), g);
        assert!(t.data(out).iter().all(|&v| v == 0.0));
        let masks = argmax_masks(t.data(out), t.shape(out));
        assert!(masks.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn class_softmax_sums_to_one() {
        let mut store = ParamStore::new();
        let d = net(&mut store);
        let mut t = Tape::new();
        let g = t.leaf(grid(4));
        let out = d.decode(&mut t, &mut Bind::new(&store), g);
        let sm = t.softmax(out, 1);
        let total = t.sum(sm, Some(1));
        assert!(t.data(total).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn decode_is_pure() {
        let mut store = ParamStore::new();
        let d = net(&mut store);
        let run = || {
            let mut t = Tape::new();
            let g = t.leaf(grid(5));
            let out = d.decode(&mut t, &mut Bind::new(&store), g);
            t.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn argmax_tie_rule() {
        let logits = [1.0, 2.0, 2.0, 0.0, 2.0, 2.0];
        // one sample, three classes, 1×2 cells: cell 0 → (1, 2, 2), cell 1 → (2, 0, 2)
        assert_eq!(argmax_masks(&logits, &[1, 3, 1, 2]), vec![vec![1, 0]]);
    }

    #[test]
    fn config_bounds() {
        assert!(SegConfig::default().validate().is_ok());
        assert!(SegConfig { holdout: 1.0, ..SegConfig::default() }.validate().is_err());
        assert!(SegConfig { class_weights: [0.0; 3], ..SegConfig::default() }.validate().is_err());
    }
}
