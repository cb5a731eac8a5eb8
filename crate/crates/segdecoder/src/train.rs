use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bevdrive::autodiff::{AdamConfig, ParamStore, Tape, Tensor, Var};
use bevdrive::bev::ScBlock;
use bevdrive::nn::Bind;
use bevdrive::policy::IMAGE_PREFIX;
use bevdrive::simworld::VEHICLE;

use crate::dataset::SegDataset;
use crate::decoder::{argmax_masks, SegConfig, SegDecoder};
use crate::metrics::IouCounts;
use crate::SegError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train: f64,
    /// Loss on the held-out frames after the epoch.
    pub heldout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub frozen: bool,
    /// Held-out loss before any training, then one entry per epoch.
    pub initial_heldout: f64,
    pub curve: Vec<EpochLoss>,
    /// Per-class IoU over all held-out cells pooled together.
    pub iou: [f64; 3],
    pub heldout: Vec<usize>,
}

impl SegReport {
    pub fn vehicle_iou(&self) -> f64 {
        self.iou[VEHICLE as usize]
    }
}

/// Forward pass through the lift and splat only, in batches.
pub fn extract_grids(store: &ParamStore<f32>, block: &ScBlock, data: &SegDataset, idx: &[usize], batch: usize) -> Vec<Tensor<f32>> {
    idx.chunks(batch.max(1))
        .map(|chunk| {
            let mut t = Tape::new();
            let mut p = Bind::new(store).freezing(IMAGE_PREFIX);
            let images = t.leaf(data.images(chunk));
            let lift = block.lift(&mut t, &mut p, images);
            let grid = block.splat(&mut t, lift, chunk.len());
            t.value(grid).clone()
        })
        .collect()
}

fn batch_logits(
    t: &mut Tape<f32>,
    p: &mut Bind<f32>,
    block: &ScBlock,
    decoder: &SegDecoder,
    data: &SegDataset,
    idx: &[usize],
    cached: Option<&[Tensor<f32>]>,
) -> Var {
    let grid = match cached {
        Some(grids) => {
            let first = &grids[idx[0]];
            let mut shape = first.shape.clone();
            shape[0] = idx.len();
            let data = idx.iter().flat_map(|&i| grids[i].data.iter().copied()).collect();
            t.constant(&shape, data)
        }
        None => {
            let images = t.leaf(data.images(idx));
            let lift = block.lift(t, p, images);
            block.splat(t, lift, idx.len())
        }
    };
    decoder.decode(t, p, grid)
}

/// Class predictions for the given frames.
pub fn predict(store: &ParamStore<f32>, block: &ScBlock, decoder: &SegDecoder, data: &SegDataset, idx: &[usize], batch: usize) -> Vec<Vec<u8>> {
    idx.chunks(batch.max(1))
        .flat_map(|chunk| {
            let mut t = Tape::new();
            let mut p = Bind::new(store);
            let logits = batch_logits(&mut t, &mut p, block, decoder, data, chunk, None);
            argmax_masks(t.data(logits), t.shape(logits))
        })
        .collect()
}

/// Trains the decoder with weighted cross-entropy against the ground-truth
/// masks. With `frozen` the SC Block parameters stay fixed (a linear-probe
/// style readout of its grids); otherwise they are tuned jointly.
///
/// `store` must hold both the block's and the decoder's parameters; the
/// block's are modified in place unless frozen.
pub fn train_decoder(
    store: &mut ParamStore<f32>,
    block: &ScBlock,
    decoder: &SegDecoder,
    data: &SegDataset,
    cfg: &SegConfig,
    frozen: bool,
    seed: u64,
) -> Result<SegReport, SegError> {
    cfg.validate()?;
    let (nx, ny) = (block.geometry().grid().nx(), block.geometry().grid().ny());
    if (data.nx, data.ny) != (nx, ny) {
        return Err(SegError::Config(format!("dataset masks are {}×{}, grid is {nx}×{ny}", data.nx, data.ny)));
    }
    let (train, held) = data.split(cfg.holdout, seed);
    if train.is_empty() || held.is_empty() {
        return Err(SegError::Config(format!("{} frames cannot be split for training", data.len())));
    }
    let weights: Vec<f32> = cfg.class_weights.iter().map(|&w| w as f32).collect();
    let adam = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let all: Vec<usize> = (0..data.len()).collect();
    let cached = frozen.then(|| {
        let mut grids = Vec::with_capacity(data.len());
        for g in extract_grids(store, block, data, &all, cfg.batch_size) {
            let per = g.data.len() / g.shape[0];
            let mut shape = g.shape.clone();
            shape[0] = 1;
            grids.extend(g.data.chunks_exact(per).map(|c| Tensor::new(&shape, c.to_vec())));
        }
        grids
    });
    let cached = cached.as_deref();

    let heldout_loss = |store: &ParamStore<f32>| -> f64 {
        let mut total = 0.0;
        for chunk in held.chunks(cfg.batch_size) {
            let mut t = Tape::new();
            let mut p = Bind::new(store);
            let logits = batch_logits(&mut t, &mut p, block, decoder, data, chunk, cached);
            let loss = t.cross_entropy(logits, data.targets(chunk), Some(&weights));
            total += t.data(loss)[0] as f64 * chunk.len() as f64;
        }
        total / held.len() as f64
    };

    let initial_heldout = heldout_loss(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order = train.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut t = Tape::new();
            let loss = {
                let mut p = Bind::new(&*store);
                let logits = batch_logits(&mut t, &mut p, block, decoder, data, chunk, cached);
                t.cross_entropy(logits, data.targets(chunk), Some(&weights))
            };
            let value = t.data(loss)[0] as f64;
            if !value.is_finite() {
                return Err(SegError::Config(format!("non-finite segmentation loss in epoch {epoch}")));
            }
            sum += value;
            count += 1;
            t.backward(loss);
            store.accumulate_grads(&t);
            store.clip_grad_norm(cfg.max_grad_norm as f32);
            store.adam_step(&adam)?;
        }
        curve.push(EpochLoss { epoch, train: sum / count as f64, heldout: heldout_loss(store) });
    }

    let preds = predict(store, block, decoder, data, &held, cfg.batch_size);
    let mut counts = [IouCounts::default(); 3];
    for (pred, &i) in preds.iter().zip(&held) {
        for (class, c) in counts.iter_mut().enumerate() {
            c.add(IouCounts::of(pred, &data.frames[i].mask, class as u8));
        }
    }
    Ok(SegReport { frozen, initial_heldout, curve, iou: counts.map(|c| c.iou()), heldout: held })
}
