use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Train, holdout and validation share one distribution.
    Iid,
    /// Validation uses only the held-out nouns; training never sees them.
    Compositional,
}

/// Which side of the split an example is generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_nouns: usize,
    pub num_verbs: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub spectro_bins: usize,
    /// Size of the training pool; the holdout is carved out of it.
    pub num_train: usize,
    pub num_val: usize,
    /// Holdout size Z used only for teacher-weight estimation.
    pub holdout_size: usize,
    /// Probability that a train-side example carries the biased appearance
    /// cues (distractor texture and noun/verb co-occurrence).
    pub appearance_bias_strength: f32,
    /// Fraction of biased train-side examples whose verb is forced to the
    /// noun's preferred verb. Only used in compositional mode.
    pub cooccurrence_strength: f32,
    pub split_mode: SplitMode,
    /// Nouns reserved for validation in compositional mode.
    pub holdout_nouns: Vec<usize>,
    /// Standard deviation of the additive spectrogram noise.
    pub spectro_noise: f32,
    /// Temporal window length used by views.
    pub clip_frames: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::compositional()
    }
}

impl DatasetConfig {
    /// Novel-object split: verbs must be recognized on unseen nouns.
    pub fn compositional() -> Self {
        Self {
            num_nouns: 6,
            num_verbs: 4,
            frames: 12,
            height: 32,
            width: 32,
            spectro_bins: 16,
            num_train: 768,
            num_val: 256,
            holdout_size: 256,
            appearance_bias_strength: 0.9,
            cooccurrence_strength: 0.0,
            split_mode: SplitMode::Compositional,
            holdout_nouns: vec![4, 5],
            spectro_noise: 0.1,
            clip_frames: 8,
            seed: 0,
        }
    }

    /// Shared-distribution split with clean spectrograms.
    pub fn iid() -> Self {
        Self {
            split_mode: SplitMode::Iid,
            holdout_nouns: Vec::new(),
            cooccurrence_strength: 0.0,
            ..Self::compositional()
        }
    }

    /// Iid split whose spectrogram modality is too noisy to be a good teacher.
    pub fn weak_spectro() -> Self {
        Self {
            spectro_noise: 6.0,
            ..Self::iid()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "compositional" => Ok(Self::compositional()),
            "iid" => Ok(Self::iid()),
            "weak-spectro" => Ok(Self::weak_spectro()),
            other => Err(Error::config("preset", format!("unknown dataset preset {other:?}"))),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_nouns * self.num_verbs
    }

    /// Number of object categories in layouts (hand plus one per noun).
    pub fn num_categories(&self) -> usize {
        self.num_nouns + 1
    }

    pub fn num_fit(&self) -> usize {
        self.num_train - self.holdout_size
    }

    pub fn nouns_for(&self, side: Side) -> Vec<usize> {
        match (self.split_mode, side) {
            (SplitMode::Iid, _) => (0..self.num_nouns).collect(),
            (SplitMode::Compositional, Side::Train) => (0..self.num_nouns)
                .filter(|n| !self.holdout_nouns.contains(n))
                .collect(),
            (SplitMode::Compositional, Side::Val) => self.holdout_nouns.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nouns < 2 {
            return Err(Error::config("num_nouns", "must be at least 2"));
        }
        if self.num_verbs < 2 {
            return Err(Error::config("num_verbs", "must be at least 2"));
        }
        if self.num_verbs > 4 {
            return Err(Error::config("num_verbs", "at most 4 motion programs exist"));
        }
        if self.frames < 4 {
            return Err(Error::config("frames", "must be at least 4"));
        }
        if self.num_nouns > 250 {
            return Err(Error::config("num_nouns", "category ids must fit in u8"));
        }
        if self.height < 16 || self.width < 16 || self.height != self.width {
            return Err(Error::config("height", "grid must be square and at least 16×16"));
        }
        if self.width < self.frames + 20 {
            return Err(Error::config(
                "width",
                format!("grid of {} cannot hold {} frames of motion", self.width, self.frames),
            ));
        }
        if self.spectro_bins < 8 {
            return Err(Error::config("spectro_bins", "must be at least 8"));
        }
        if self.clip_frames == 0 || self.clip_frames > self.frames {
            return Err(Error::config("clip_frames", "must be in 1..=frames"));
        }
        if self.holdout_size >= self.num_train {
            return Err(Error::config(
                "holdout_size",
                format!(
                    "holdout size {} must be smaller than num_train {}",
                    self.holdout_size, self.num_train
                ),
            ));
        }
        if self.holdout_size == 0 {
            return Err(Error::config("holdout_size", "must be positive"));
        }
        if self.num_val == 0 {
            return Err(Error::config("num_val", "must be positive"));
        }
        for (field, v) in [
            ("appearance_bias_strength", self.appearance_bias_strength),
            ("cooccurrence_strength", self.cooccurrence_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.spectro_noise >= 0.0) {
            return Err(Error::config("spectro_noise", "must be nonnegative"));
        }
        if self.split_mode == SplitMode::Compositional {
            if self.holdout_nouns.is_empty() {
                return Err(Error::config("holdout_nouns", "compositional mode needs held-out nouns"));
            }
            if self.holdout_nouns.iter().any(|&n| n >= self.num_nouns) {
                return Err(Error::config("holdout_nouns", "noun id out of range"));
            }
            if self.holdout_nouns.len() >= self.num_nouns {
                return Err(Error::config("holdout_nouns", "at least one training noun must remain"));
            }
        }
        Ok(())
    }
}
