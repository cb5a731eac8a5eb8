use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevdrive::autodiff::Tensor;
use bevdrive::geometry::BevGridSpec;
use bevdrive::policy::episode_seed;
use bevdrive::simworld::{Action, SimConfig, World, CLASS_COUNT, VEHICLE};

use crate::SegError;

pub const DATASET_MAGIC: &[u8; 4] = b"BEVS";
pub const DATASET_VERSION: u32 = 1;

/// Camera images and the ground-truth mask of the same instant. Images are
/// kept rather than grids so the extractor can be fine-tuned on them.
#[derive(Debug, Clone, PartialEq)]
pub struct SegFrame {
    pub images: Vec<f32>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    /// `(cams, 3, H, W)`
    pub image_shape: [usize; 4],
    pub nx: usize,
    pub ny: usize,
    pub frames: Vec<SegFrame>,
}

impl SegDataset {
    /// Records every `stride`-th step of uniform-random-action episodes.
    /// Frames without any vehicle cell are kept with probability `empty_keep`,
    /// since vehicles are otherwise rare in the grid.
    pub fn collect(
        sim: &SimConfig,
        grid: &BevGridSpec,
        frames: usize,
        stride: usize,
        empty_keep: f64,
        seed: u64,
    ) -> Result<Self, SegError> {
        assert!(stride > 0, "contract violation: zero frame stride");
        let mut world = World::new(sim.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(frames);
        let mut episode = 0;
        while out.len() < frames {
            let mut obs = world.reset(episode_seed(seed, 0, episode), sim.map, sim.congestion)?;
            episode += 1;
            for t in 0.. {
                if t % stride == 0 {
                    let mask = world.bev_mask(grid);
                    let keep = mask.contains(&VEHICLE) || rng.gen_bool(empty_keep.clamp(0.0, 1.0));
                    if keep {
                        out.push(SegFrame { images: obs.images.data, mask });
                        if out.len() == frames {
                            break;
                        }
                    }
                }
                let step = world.step(Action::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))?;
                if step.done {
                    break;
                }
                obs = step.observation;
            }
        }
        Ok(Self { image_shape: sim.image_shape(), nx: grid.nx(), ny: grid.ny(), frames: out })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shuffled (train, held-out) indices; the held-out part is
    /// `round(holdout · len)` frames, at least one in each part when there are two frames.
    pub fn split(&self, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = if n < 2 { 0 } else { ((holdout * n as f64).round() as usize).clamp(1, n - 1) };
        let train = idx.split_off(held);
        (train, idx)
    }

    /// `(B, cams, 3, H, W)` images of the given frames.
    pub fn images(&self, idx: &[usize]) -> Tensor<f32> {
        let [c, k, h, w] = self.image_shape;
        let data = idx.iter().flat_map(|&i| self.frames[i].images.iter().copied()).collect();
        Tensor::new(&[idx.len(), c, k, h, w], data)
    }

    /// Class targets of the given frames, frame-major.
    pub fn targets(&self, idx: &[usize]) -> Rc<[usize]> {
        idx.iter().flat_map(|&i| self.frames[i].mask.iter().map(|&c| c as usize)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), SegError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in self.image_shape.iter().chain(&[self.nx, self.ny, self.len()]) {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for f in &self.frames {
            for v in &f.images {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&f.mask);
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SegError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| SegError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 8 || &bytes[..4] != DATASET_MAGIC {
            return Err(bad("not a segmentation dataset"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(bad(&format!("version {version}, expected {DATASET_VERSION}")));
        }
        let mut at = 8;
        let mut header = [0usize; 7];
        for h in &mut header {
            let b = bytes.get(at..at + 8).ok_or_else(|| bad("truncated header"))?;
            *h = u64::from_le_bytes(b.try_into().unwrap()) as usize;
            at += 8;
        }
        let [c, k, h, w, nx, ny, n] = header;
        let (pixels, cells) = (c * k * h * w, nx * ny);
        let record = pixels * 4 + cells;
        if bytes.len() - at != n * record {
            return Err(bad(&format!("{} payload bytes for {n} records of {record}", bytes.len() - at)));
        }
        let frames = bytes[at..]
            .chunks_exact(record)
            .map(|r| {
                let images = r[..pixels * 4].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                let mask = r[pixels * 4..].to_vec();
                if mask.iter().any(|&m| m as usize >= CLASS_COUNT) {
                    return Err(bad("class index out of range"));
                }
                Ok(SegFrame { images, mask })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { image_shape: [c, k, h, w], nx, ny, frames })
    }
}
