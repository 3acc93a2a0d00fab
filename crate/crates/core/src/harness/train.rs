//! Two-phase training loop, checkpoints and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{short_hash, TrainConfig};
use crate::autograd::{Adam, Tape};
use crate::error::{Error, Result};
use crate::gaze::{process_gaze, GazeParams};
use crate::geometry::BoundingBox;
use crate::image::GrayImage;
use crate::labels::{Category, LabeledBox};
use crate::loss::{assemble_targets, detection_loss, LossBreakdown, LossWeights, Phase};
use crate::metrics::{pr_curve, EvalParams, EvalReport};
use crate::model::{Detection, Detector, ModelConfig};
use crate::rectification::{replicate_and_jitter, QueryOrigin};
use crate::synth::{read_dataset, read_json, write_json, Dataset, Scene, Split};

pub const GAZE_CACHE_FILE: &str = "gaze_boxes.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GazeCache {
    params_hash: String,
    params: GazeParams,
    boxes: BTreeMap<String, Vec<BoundingBox>>,
}

fn gaze_params_hash(p: &GazeParams) -> String {
    short_hash(serde_json::to_string(p).expect("params serialize").as_bytes())
}

/// Gaze-only boxes for every scene, read from `gaze_boxes.json` in the dataset
/// directory when its parameter hash matches, otherwise computed and written.
pub fn gaze_only_boxes(dataset: &Dataset, params: &GazeParams) -> Result<BTreeMap<String, Vec<LabeledBox>>> {
    let path = dataset.root.join(GAZE_CACHE_FILE);
    let hash = gaze_params_hash(params);
    if path.exists() {
        let cache: GazeCache = read_json(&path)?;
        if cache.params_hash == hash && dataset.scenes.iter().all(|s| cache.boxes.contains_key(&s.id)) {
            return Ok(cache
                .boxes
                .into_iter()
                .map(|(id, b)| (id, b.into_iter().map(LabeledBox::gaze_only).collect()))
                .collect());
        }
    }
    let out = compute_gaze_boxes(&dataset.scenes, params)?;
    let cache = GazeCache {
        params_hash: hash,
        params: *params,
        boxes: out
            .iter()
            .map(|(id, b)| (id.clone(), b.iter().map(|l| l.bbox).collect()))
            .collect(),
    };
    write_json(&path, &cache)?;
    Ok(out)
}

pub fn compute_gaze_boxes(scenes: &[Scene], params: &GazeParams) -> Result<BTreeMap<String, Vec<LabeledBox>>> {
    scenes
        .iter()
        .map(|s| {
            let boxes = process_gaze(&s.gaze, &s.candida_boxes(), params, s.image.height(), s.image.width())?;
            Ok((s.id.clone(), boxes))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Mean per training image.
    pub loss: LossBreakdown,
    /// Target categories that received at least one positive target.
    pub positive_categories: Vec<Category>,
    pub gaze_queries: usize,
    pub val: Option<EvalReport>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    /// The record with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_clock_s = 0.0;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub phase: Phase,
    pub adam_steps: u64,
    pub config_hash: String,
    pub config: TrainConfig,
}

pub struct TrainOutcome {
    pub model: Detector<f32>,
    pub record: RunRecord,
}

pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * (epoch - 1) as f64 / total as f64).cos())
}

/// Reads the dataset named in the config and trains, writing checkpoints and
/// records under `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let dataset = read_dataset(&cfg.dataset)?;
    train_on(cfg, &dataset, Some(out_dir), on_epoch)
}

fn save_checkpoint(dir: &Path, model: &Detector<f32>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    model.save_params(&dir.join("params.bin"))?;
    write_json(&dir.join("meta.json"), meta)
}

/// Warm-up epochs `1..=warmup_epochs` carry no gaze queries and, with GGW,
/// supervise gaze-only boxes as a third class. Later epochs use candida
/// targets only and, with GGR, inject jittered gaze queries.
pub fn train_on(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = dataset.split(Split::Train)?;
    let val_set = dataset.split(Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::file(&dataset.root, "training split is empty"));
    }
    let gaze_only = gaze_only_boxes(dataset, &cfg.gaze())?;
    let model_cfg = cfg.model();
    let budget = model_cfg.query_budget;
    let jitter = cfg.jitter();
    let weights = cfg.loss();
    let config_hash = cfg.hash();

    let mut model = Detector::<f32>::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut record = RunRecord {
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        epochs: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::file(dir, e))?;
        let _ = fs::remove_file(dir.join("run_record.jsonl"));
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.total_epochs {
        let start = Instant::now();
        let in_warmup = epoch <= cfg.warmup_epochs;
        let phase = if in_warmup && cfg.ggw_enabled { Phase::Warmup } else { Phase::Main };
        let inject = !in_warmup && cfg.ggr_enabled;
        let lr = cosine_lr(cfg.lr, epoch, cfg.total_epochs);
        order.shuffle(&mut rng);

        let mut sum = LossBreakdown::default();
        let mut positive = Vec::new();
        let mut gaze_queries = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.params().zero_grads();
            for &i in chunk {
                let scene = train_set[i];
                let extra = &gaze_only[&scene.id];
                let targets = assemble_targets(&scene.candida, extra, phase);
                assert!(
                    in_warmup || targets.iter().all(|t| t.category == Category::Candida),
                    "gaze-only target after warm-up"
                );
                let anchors = if inject {
                    let boxes: Vec<BoundingBox> = extra.iter().map(|l| l.bbox).collect();
                    replicate_and_jitter(&boxes, &jitter, &mut rng)
                } else {
                    Vec::new()
                };
                assert!(!in_warmup || anchors.is_empty(), "gaze query during warm-up");
                gaze_queries += anchors.len();
                for t in &targets {
                    if !positive.contains(&t.category) {
                        positive.push(t.category);
                    }
                }

                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let (out, plan) = model.forward(&mut tape, &bound, &scene.image, &anchors)?;
                assert_eq!(plan.len(), budget, "query budget changed");
                assert_eq!(plan.gaze_count(), anchors.len());
                let loss = detection_loss(&mut tape, &out, &targets, phase, &weights)?;
                for a in &loss.assignments[1..] {
                    assert!(
                        a.pairs.iter().all(|&(q, _)| out.origins[q] == QueryOrigin::Learnable),
                        "gaze query in an assignment"
                    );
                }
                for (name, v) in loss.breakdown.components() {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch: b + 1,
                            component: format!("{name} (scene {})", scene.id),
                        });
                    }
                }
                sum.add(&loss.breakdown);
                tape.backward(loss.total, &mut grads);
            }
            let scale = 1.0 / chunk.len() as f32;
            for g in &mut grads {
                g.scale_in_place(scale);
                if !g.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                        component: "gradient".into(),
                    });
                }
            }
            adam.step(model.params_mut(), &grads, lr);
        }
        positive.sort_by_key(|c| c.class().index());

        let val = if epoch % cfg.eval_every == 0 || epoch == cfg.total_epochs {
            Some(evaluate_model(&model, &val_set, cfg.eval())?.0)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            phase,
            lr,
            loss: sum.scaled(1.0 / train_set.len() as f64),
            positive_categories: positive,
            gaze_queries,
            val,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let meta = CheckpointMeta {
                model: model_cfg,
                epoch,
                phase,
                adam_steps: adam.steps_taken(),
                config_hash: config_hash.clone(),
                config: cfg.clone(),
            };
            save_checkpoint(&dir.join("checkpoint"), &model, &meta)?;
            let path = dir.join("run_record.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::file(&path, e))?;
            let line = serde_json::to_string(&rec).map_err(|e| Error::file(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::file(&path, e))?;
        }
        on_epoch(&rec);
        record.epochs.push(rec);
    }

    if let Some(dir) = out_dir {
        let last = record.epochs.last().expect("at least one epoch");
        let meta = CheckpointMeta {
            model: model_cfg,
            epoch: cfg.total_epochs,
            phase: last.phase,
            adam_steps: adam.steps_taken(),
            config_hash,
            config: cfg.clone(),
        };
        save_checkpoint(&dir.join("final"), &model, &meta)?;
        write_json(&dir.join("run_record.json"), &record)?;
        let (report, dets) = evaluate_model(&model, &val_set, cfg.eval())?;
        write_json(&dir.join("eval.json"), &report)?;
        let gts: Vec<Vec<BoundingBox>> = val_set.iter().map(|s| s.candida_boxes()).collect();
        write_pr_csv(&dir.join("pr_curve.csv"), &dets, &gts)?;
    }
    Ok(TrainOutcome { model, record })
}

/// Full-batch training on a few scenes with candida targets only and no gaze
/// queries, with the learning rate cosine-decayed over `steps`. Returns the
/// loss before each step.
pub fn overfit_batch(
    model: &mut Detector<f32>,
    scenes: &[&Scene],
    weights: &LossWeights,
    lr: f64,
    steps: usize,
) -> Result<Vec<LossBreakdown>> {
    let mut adam = Adam::new(model.params(), 0.9, 0.999);
    let mut history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut grads = model.params().zero_grads();
        let mut sum = LossBreakdown::default();
        for s in scenes {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (out, _) = model.forward(&mut tape, &bound, &s.image, &[])?;
            let loss = detection_loss(&mut tape, &out, &s.candida, Phase::Main, weights)?;
            if !loss.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: 1,
                    batch: step,
                    component: "total".into(),
                });
            }
            sum.add(&loss.breakdown);
            tape.backward(loss.total, &mut grads);
        }
        let scale = 1.0 / scenes.len() as f32;
        grads.iter_mut().for_each(|g| g.scale_in_place(scale));
        adam.step(model.params_mut(), &grads, cosine_lr(lr, step, steps));
        history.push(sum.scaled(1.0 / scenes.len() as f64));
    }
    Ok(history)
}

/// Detections for each image. Only pixels reach the model.
pub fn predict_all(model: &Detector<f32>, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
    images.iter().map(|img| model.predict(img, 0.0)).collect()
}

pub fn evaluate_model(
    model: &Detector<f32>,
    scenes: &[&Scene],
    params: EvalParams,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let images: Vec<&GrayImage> = scenes.iter().map(|s| &s.image).collect();
    let dets = predict_all(model, &images)?;
    let gts: Vec<Vec<BoundingBox>> = scenes.iter().map(|s| s.candida_boxes()).collect();
    let conf: Vec<Vec<BoundingBox>> = scenes.iter().map(|s| s.confounders.clone()).collect();
    Ok((EvalReport::compute(&dets, &gts, &conf, params), dets))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Detector<f32>, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let model = Detector::load_params(meta.model, &dir.join("params.bin"))?;
    Ok((model, meta))
}

/// Evaluates a checkpoint directory on a split of its training dataset, or
/// of `dataset` when given.
pub fn evaluate(ckpt: &Path, split: Split, dataset: Option<&Path>) -> Result<EvalReport> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let root: PathBuf = dataset.map_or(meta.config.dataset.clone(), Path::to_path_buf);
    let data = read_dataset(&root)?;
    let scenes = data.split(split)?;
    for s in &scenes {
        model.config().check_image(s.image.width(), s.image.height())?;
    }
    Ok(evaluate_model(&model, &scenes, meta.config.eval())?.0)
}

pub const PR_CSV_HEADER: &str = "iou,recall,precision";

pub fn write_pr_csv(path: &Path, dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>]) -> Result<()> {
    let mut text = String::from(PR_CSV_HEADER);
    text.push('\n');
    for t in [0.2, 0.5] {
        for (r, p) in pr_curve(dets, gts, t).unwrap_or_default() {
            text.push_str(&format!("{t},{r},{p}\n"));
        }
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}
