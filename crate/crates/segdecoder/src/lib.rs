//! Decodes BEV feature grids into background/road/vehicle masks, as a probe of
//! what the SC Block has learned to represent.

mod dataset;
mod decoder;
mod metrics;
mod pixmap;
mod train;

use thiserror::Error;

use bevdrive::autodiff::TrainingError;
use bevdrive::bev::BevError;
use bevdrive::simworld::SimError;

pub use dataset::{SegDataset, SegFrame, DATASET_MAGIC, DATASET_VERSION};
pub use decoder::{argmax_masks, SegConfig, SegDecoder, SEG_PREFIX};
pub use metrics::{iou, IouCounts};
pub use pixmap::{export_mask_image, mask_pixmap, CLASS_COLORS};
pub use train::{extract_grids, predict, train_decoder, EpochLoss, SegReport};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid segmentation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Params(#[from] TrainingError),
}
