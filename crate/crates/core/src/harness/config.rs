//! Flat key/value configuration files for data generation and training.
//! Every key is optional and falls back to its default; unknown keys are
//! errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaze::GazeParams;
use crate::loss::LossWeights;
use crate::metrics::EvalParams;
use crate::model::ModelConfig;
use crate::rectification::JitterParams;
use crate::synth::{GazeSimParams, SceneSpec};

fn parse_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    toml::from_str(&text).map_err(|e| Error::file(path, e.to_string().trim_end()))
}

/// Relative paths in a config file are taken relative to the file itself
/// and made absolute, so checkpoints can be evaluated from anywhere.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_relative() {
        base.parent().unwrap_or(Path::new(".")).join(p)
    } else {
        p.to_path_buf()
    };
    std::path::absolute(&joined).unwrap_or(joined)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ggw_enabled: bool,
    pub ggr_enabled: bool,
    /// Validate every this many epochs; the final epoch is always validated.
    pub eval_every: usize,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_learnable_queries: usize,
    pub query_budget: usize,

    pub sigma_px: f64,
    pub tau_rel: f64,
    pub min_area_px: usize,
    pub overlap_tau: f64,

    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_w: f64,
    pub sigma_h: f64,
    pub k: usize,
    pub max_gaze_queries: usize,

    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_noobj: f64,
    pub w_gazequery: f64,

    pub score_thresh: f64,
    pub confounder_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let g = GazeParams::default();
        let j = JitterParams::default();
        let w = LossWeights::default();
        let e = EvalParams::default();
        Self {
            dataset: PathBuf::from("data"),
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            total_epochs: 50,
            warmup_epochs: 5,
            batch_size: 8,
            seed: 0,
            ggw_enabled: true,
            ggr_enabled: true,
            eval_every: 1,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            n_learnable_queries: m.n_learnable_queries,
            query_budget: m.query_budget,
            sigma_px: g.sigma_px,
            tau_rel: g.tau_rel,
            min_area_px: g.min_area_px,
            overlap_tau: g.overlap_tau,
            sigma_x: j.sigma_x,
            sigma_y: j.sigma_y,
            sigma_w: j.sigma_w,
            sigma_h: j.sigma_h,
            k: j.k,
            max_gaze_queries: j.max_gaze_queries,
            w_class: w.w_class,
            w_l1: w.w_l1,
            w_giou: w.w_giou,
            w_noobj: w.w_noobj,
            w_gazequery: w.w_gazequery,
            score_thresh: e.score_thresh,
            confounder_iou: e.confounder_iou,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: Self = parse_file(path)?;
        cfg.dataset = resolve(path, &cfg.dataset);
        cfg.validate().map_err(|e| Error::file(path, e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            n_learnable_queries: self.n_learnable_queries,
            query_budget: self.query_budget,
            ..ModelConfig::default()
        }
    }

    pub fn gaze(&self) -> GazeParams {
        GazeParams {
            sigma_px: self.sigma_px,
            tau_rel: self.tau_rel,
            min_area_px: self.min_area_px,
            overlap_tau: self.overlap_tau,
        }
    }

    pub fn jitter(&self) -> JitterParams {
        JitterParams {
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            sigma_w: self.sigma_w,
            sigma_h: self.sigma_h,
            k: self.k,
            max_gaze_queries: self.max_gaze_queries,
        }
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights {
            w_class: self.w_class,
            w_l1: self.w_l1,
            w_giou: self.w_giou,
            w_noobj: self.w_noobj,
            w_gazequery: self.w_gazequery,
        }
    }

    pub fn eval(&self) -> EvalParams {
        EvalParams {
            score_thresh: self.score_thresh,
            confounder_iou: self.confounder_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be at least 1"));
        }
        if !((0.0..=1.0).contains(&self.score_thresh) && (0.0..=1.0).contains(&self.confounder_iou)) {
            return Err(Error::config("score_thresh and confounder_iou must lie in [0, 1]"));
        }
        let model = self.model();
        model.validate()?;
        self.gaze().validate()?;
        self.jitter().validate(model.query_budget)?;
        self.loss().validate()
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        short_hash(self.to_toml().as_bytes())
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_candida_min: usize,
    pub n_candida_max: usize,
    pub n_confounder_min: usize,
    pub n_confounder_max: usize,
    pub n_distractor_cells_min: usize,
    pub n_distractor_cells_max: usize,
    pub noise_std: f64,
    pub constriction_depth: f64,
    pub dwell_ms_candida: f64,
    pub dwell_ms_confounder: f64,
    pub fix_per_object: usize,
    pub jitter_px: f64,
    pub background_fix_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::from_parts(500, &SceneSpec::default(), &GazeSimParams::default())
    }
}

impl DataConfig {
    pub fn from_parts(n_scenes: usize, s: &SceneSpec, g: &GazeSimParams) -> Self {
        Self {
            n_scenes,
            seed: s.rng_seed,
            width: s.width,
            height: s.height,
            n_candida_min: s.n_candida.0,
            n_candida_max: s.n_candida.1,
            n_confounder_min: s.n_confounder.0,
            n_confounder_max: s.n_confounder.1,
            n_distractor_cells_min: s.n_distractor_cells.0,
            n_distractor_cells_max: s.n_distractor_cells.1,
            noise_std: s.noise_std,
            constriction_depth: s.constriction_depth,
            dwell_ms_candida: g.dwell_ms_candida,
            dwell_ms_confounder: g.dwell_ms_confounder,
            fix_per_object: g.fix_per_object,
            jitter_px: g.jitter_px,
            background_fix_rate: g.background_fix_rate,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = parse_file(path)?;
        cfg.scene_spec().validate().map_err(|e| Error::file(path, e))?;
        cfg.gaze_sim().validate().map_err(|e| Error::file(path, e))?;
        Ok(cfg)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            n_candida: (self.n_candida_min, self.n_candida_max),
            n_confounder: (self.n_confounder_min, self.n_confounder_max),
            n_distractor_cells: (self.n_distractor_cells_min, self.n_distractor_cells_max),
            noise_std: self.noise_std,
            constriction_depth: self.constriction_depth,
            rng_seed: self.seed,
        }
    }

    pub fn gaze_sim(&self) -> GazeSimParams {
        GazeSimParams {
            dwell_ms_candida: self.dwell_ms_candida,
            dwell_ms_confounder: self.dwell_ms_confounder,
            fix_per_object: self.fix_per_object,
            jitter_px: self.jitter_px,
            background_fix_rate: self.background_fix_rate,
        }
    }
}
