//! Synthetic multimodal action clips ("shape-actions").
//!
//! Each clip shows a hand pushing (or holding) a textured object. The verb is
//! a motion program, the noun is the object's texture. Appearance carries a
//! train-side bias (a background patch repeating the object's texture, and in
//! compositional mode a noun/verb co-occurrence), while flow, layout and the
//! spectrogram analog only depend on the motion.

mod config;
mod render;
mod shard;
mod view;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{DatasetConfig, Side, SplitMode};
pub use render::{generate_example, preferred_verb, LayoutBox, Motion, MultimodalExample, HAND_CATEGORY};
pub use shard::{Shard, ShardHeader, SHARD_MAGIC, SHARD_VERSION};
pub use view::{
    apply_view, category_color, eval_crop_size, rasterize_layout, sample_view, transform_box,
    tta_views, view_appearance, view_flow, view_layout, view_spectro, ViewMode, ViewParams,
    LAYOUT_LINE_THICKNESS,
};

use crate::error::Result;
use crate::rng::{derive_named, derive_seed, rng_from};

/// Train, holdout and validation shards of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Shard,
    pub holdout: Shard,
    pub val: Shard,
}

/// Seed used to pick the holdout subset out of the training pool.
pub fn holdout_seed(config: &DatasetConfig) -> u64 {
    derive_named(config.seed, "holdout")
}

fn generate_range(config: &DatasetConfig, ids: &[u64], side: Side) -> Vec<MultimodalExample> {
    ids.par_iter()
        .map(|&id| generate_example(derive_seed(config.seed, id), config, side, id))
        .collect()
}

/// Builds the three splits. Example ids `0..num_train` form the training pool,
/// from which `holdout_size` ids are drawn without replacement; validation
/// ids follow the pool.
pub fn build_splits(config: &DatasetConfig) -> Result<Splits> {
    config.validate()?;
    let mut pool: Vec<u64> = (0..config.num_train as u64).collect();
    pool.shuffle(&mut rng_from(holdout_seed(config)));
    let mut holdout_ids = pool[..config.holdout_size].to_vec();
    let mut train_ids = pool[config.holdout_size..].to_vec();
    holdout_ids.sort_unstable();
    train_ids.sort_unstable();
    let start = config.num_train as u64;
    let val_ids: Vec<u64> = (start..start + config.num_val as u64).collect();
    Ok(Splits {
        train: Shard::new("train", config, generate_range(config, &train_ids, Side::Train)),
        holdout: Shard::new("holdout", config, generate_range(config, &holdout_ids, Side::Train)),
        val: Shard::new("val", config, generate_range(config, &val_ids, Side::Val)),
    })
}
