//! RGB-D samples: on-disk format, depth normalisation and a procedural
//! scene generator.

mod io;
mod manifest;
mod synth;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub use io::{
    denormalize_depth, load_depth, load_mask, load_rgb, load_sample, normalize_depth, save_depth,
    save_depth_mm, save_mask, save_overlay, save_rgb, save_sample, DEPTH_MAX_MM, DEPTH_MIN_MM,
    DEPTH_NEAR_EPSILON, OVERLAY_COLOR,
};
pub use manifest::{build_manifest, load_split, DatasetManifest, ManifestEntry, SPLITS};
pub use synth::{
    synth_scene, write_corpus, CorpusSpec, Difficulty, DifficultyMix, SceneRecipe, MIN_SCENE_SIZE,
};

/// An aligned RGB image, normalised depth map and glass mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1, H, W]` in `[0, 1]`, 0 where the reading is missing.
    pub depth: Tensor<f32>,
    pub mask: Mask,
    pub tags: BTreeSet<String>,
}

impl RgbdSample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Checks that all three images are aligned.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.dims();
        if self.rgb.shape() != [3, h, w] {
            return Err(Error::shape("sample", self.rgb.shape(), &[3, h, w]));
        }
        if self.depth.shape() != [1, h, w] {
            return Err(Error::shape("sample", self.depth.shape(), &[1, h, w]));
        }
        Ok(())
    }
}

/// Loads every sample of a split in manifest order.
pub fn load_split_samples(manifest: &DatasetManifest, split: &str) -> Result<Vec<RgbdSample>> {
    manifest
        .split(split)
        .map(|e| load_sample(e.id.clone(), &e.rgb, &e.depth, &e.mask, e.tags.clone()))
        .collect()
}
