//! The full tracker: backbone, head, crop geometry and checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, TrackInputs};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event::{crop_patch, CropWindow};
use crate::head::{head_loss, Head, HeadConfig, LossBreakdown, LossWeights, TrackOutputs};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub loss: LossWeights,
    /// Template crop side as a multiple of the box's longer side.
    #[serde(default = "default_template_scale")]
    pub template_scale: f64,
    #[serde(default = "default_search_scale")]
    pub search_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_template_scale() -> f64 {
    2.0
}

fn default_search_scale() -> f64 {
    4.0
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            head: HeadConfig::default(),
            loss: LossWeights::default(),
            template_scale: default_template_scale(),
            search_scale: default_search_scale(),
            init_seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            head: HeadConfig { hidden: 8 },
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        if !(self.template_scale > 0.0 && self.search_scale > 0.0) {
            return Err(Error::Config("crop scales must be positive".into()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Template crops, fixed after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub rgb: Tensor,
    pub ev: Tensor,
}

/// Search crops and the window they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Search {
    pub rgb: Tensor,
    pub ev: Tensor,
    pub window: CropWindow,
}

#[derive(Debug, Clone)]
pub struct FreqTrack {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
}

impl FreqTrack {
    /// Fresh parameters drawn from `cfg.init_seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let bb = &cfg.backbone;
        let backbone = Backbone::new(&mut store, "backbone", bb, &mut rng)?;
        let head = Head::new(&mut store, "head", bb.dim, bb.grid_side(), bb.search_side, &cfg.head, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            head,
        })
    }

    /// Builds the architecture for `cfg` and loads parameters from `checkpoint`.
    pub fn load(cfg: &ModelConfig, checkpoint: &Path) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.store.load(checkpoint)?;
        Ok(m)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        self.store.save(checkpoint)
    }

    fn crop(&self, image: &Tensor, voxel: &Tensor, bbox: &BBox, scale: f64, side: usize) -> Result<(Tensor, Tensor, CropWindow)> {
        let (rgb, window) = crop_patch(image, bbox, scale, side)?;
        let (ev, _) = crop_patch(voxel, bbox, scale, self.cfg.backbone.event_side(side))?;
        Ok((rgb, ev, window))
    }

    /// `image`: `[3 × H × W]`; `voxel`: `[B × H × W]`.
    pub fn template(&self, image: &Tensor, voxel: &Tensor, bbox: &BBox) -> Result<Template> {
        let side = self.cfg.backbone.template_side;
        let (rgb, ev, _) = self.crop(image, voxel, bbox, self.cfg.template_scale, side)?;
        Ok(Template { rgb, ev })
    }

    /// Search crops around `center`, whose size sets the window.
    pub fn search(&self, image: &Tensor, voxel: &Tensor, center: &BBox) -> Result<Search> {
        let side = self.cfg.backbone.search_side;
        let (rgb, ev, window) = self.crop(image, voxel, center, self.cfg.search_scale, side)?;
        Ok(Search { rgb, ev, window })
    }

    fn inputs(t: &Template, s: &Search) -> TrackInputs {
        TrackInputs {
            rgb_t: t.rgb.clone(),
            ev_t: t.ev.clone(),
            rgb_s: s.rgb.clone(),
            ev_s: s.ev.clone(),
        }
    }

    /// Training objective for one pair, with `gt` in image pixels.
    pub fn loss<'t>(&self, g: &Graph<'t, '_>, t: &Template, s: &Search, gt: &BBox) -> Result<(Var<'t>, LossBreakdown)> {
        let out = self.backbone.forward(g, &Self::inputs(t, s))?;
        let maps = self.head.forward(g, out.search)?;
        let side = self.cfg.backbone.search_side;
        head_loss(&maps, &s.window.to_patch(gt), self.head.grid, side as f64, &self.cfg.loss)
    }

    /// Head outputs for one pair; the box is in search-patch pixels.
    pub fn outputs(&self, t: &Template, s: &Search) -> Result<TrackOutputs> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &self.store);
        let out = self.backbone.forward(&g, &Self::inputs(t, s))?;
        let maps = self.head.forward(&g, out.search)?;
        self.head.outputs(&maps)
    }

    /// Predicted box in image pixels and its score.
    pub fn predict(&self, t: &Template, s: &Search) -> Result<(BBox, f64)> {
        let out = self.outputs(t, s)?;
        Ok((s.window.to_image(&out.bbox), out.confidence))
    }
}
