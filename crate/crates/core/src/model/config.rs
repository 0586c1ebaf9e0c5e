use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Grouped shuffle stages.
    Dgsm,
    /// Strided 3×3 conv plus residual blocks per stage.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckKind {
    /// Shuffle-transformer blocks.
    Dgst,
    /// Layer-aggregation conv blocks.
    Elan,
}

/// Loss component weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

impl LossWeights {
    pub const UNIT: Self = Self {
        box_: 1.0,
        obj: 1.0,
        cls: 1.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_: 0.05,
            obj: 1.0,
            cls: 0.5,
        }
    }
}

/// Anchor priors `(w, h)` in pixels.
pub type Anchors = [[f64; 2]; 3];

pub const ANCHORS_S8: Anchors = [[12.0, 16.0], [19.0, 36.0], [40.0, 28.0]];
pub const ANCHORS_S16: Anchors = [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]];
pub const ANCHORS_S32: Anchors = [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]];

/// Everything needed to build a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub neck: NeckKind,
    pub num_classes: usize,
    /// `(height, width)`.
    pub input_size: [usize; 2],
    pub stem: [usize; 2],
    /// `(N, channels)` per backbone stage, strides 4, 8, 16, 32.
    pub stages: Vec<[usize; 2]>,
    /// Head strides in increasing order: `[16, 32]` or `[8, 16, 32]`.
    pub strides: Vec<usize>,
    /// One anchor triple per head.
    pub anchors: Vec<Anchors>,
    /// Groups of the backbone and DGST pointwise convs.
    pub pw_groups: usize,
    /// Groups of the neck fuse convs and the SPP fuse.
    pub fuse_groups: usize,
    pub pos_encoding: bool,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Dgsm,
            neck: NeckKind::Dgst,
            num_classes: 2,
            input_size: [640, 640],
            stem: [32, 64],
            stages: vec![[2, 64], [3, 128], [4, 256], [2, 512]],
            strides: vec![16, 32],
            anchors: vec![ANCHORS_S16, ANCHORS_S32],
            pw_groups: 2,
            fuse_groups: 2,
            pos_encoding: true,
            mlp_ratio: 2,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Grouped shuffle backbone with a dense aggregation neck and three heads.
    pub fn dgsm_only() -> Self {
        Self {
            neck: NeckKind::Elan,
            fuse_groups: 1,
            ..Self::default().with_three_heads()
        }
    }

    /// Dense backbone, dense neck, three heads.
    pub fn baseline_three_head() -> Self {
        Self {
            backbone: BackboneKind::Dense,
            neck: NeckKind::Elan,
            fuse_groups: 1,
            ..Self::default().with_three_heads()
        }
    }

    /// Same network with the stride-8 head restored.
    pub fn with_three_heads(mut self) -> Self {
        if self.strides.len() == 2 {
            self.strides.insert(0, 8);
            self.anchors.insert(0, ANCHORS_S8);
        }
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "dgst-dgsm" => Ok(Self::default()),
            "dgsm-only" => Ok(Self::dgsm_only()),
            "baseline" => Ok(Self::baseline_three_head()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected default, dgsm-only or baseline)"
            ))),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.strides.len()
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.stem.iter().any(|&c| c == 0) {
            return bad("stem channels must be positive".into());
        }
        if self.stages.len() != 4 {
            return bad(format!("expected 4 backbone stages, got {}", self.stages.len()));
        }
        for (i, &[n, c]) in self.stages.iter().enumerate() {
            if n == 0 {
                return bad(format!("stage {} has zero blocks", i + 1));
            }
            if c == 0 || c % 8 != 0 {
                return bad(format!("stage {} channels {c} must be a positive multiple of 8", i + 1));
            }
        }
        if self.strides != [16, 32] && self.strides != [8, 16, 32] {
            return bad(format!("strides must be [16, 32] or [8, 16, 32], got {:?}", self.strides));
        }
        if self.anchors.len() != self.strides.len() {
            return bad(format!(
                "{} anchor sets for {} heads",
                self.anchors.len(),
                self.strides.len()
            ));
        }
        if self.anchors.iter().flatten().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor sizes must be positive".into());
        }
        let max_stride = 32;
        if self.input_size.iter().any(|&s| s == 0 || s % max_stride != 0) {
            return bad(format!("input size {:?} must be a positive multiple of 32", self.input_size));
        }
        if self.pw_groups == 0 || self.fuse_groups == 0 || self.mlp_ratio == 0 {
            return bad("pw_groups, fuse_groups and mlp_ratio must be positive".into());
        }
        for l in [self.loss.box_, self.loss.obj, self.loss.cls] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("loss weights must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }
}
