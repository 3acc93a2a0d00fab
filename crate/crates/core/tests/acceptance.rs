//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The ablation runs are kept under `CARGO_TARGET_TMPDIR/acceptance` (or
//! `GAZEGUIDE_ACCEPTANCE_DIR`) and reused when their saved config and the
//! regenerated dataset are unchanged. Set `GAZEGUIDE_ACCEPTANCE_FRESH=1` to
//! retrain everything.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gazeguide::autograd::{Tape, Tensor};
use gazeguide::gaze::{process_gaze, rasterize_gaze, threshold_and_clean, GazeParams, GazePoint};
use gazeguide::geometry::{iou, BoundingBox};
use gazeguide::harness::{self, finished_run, AblationTable, DataConfig, RunRecord, TrainConfig, ABLATION_ROWS};
use gazeguide::image::GrayImage;
use gazeguide::labels::{Category, LabeledBox};
use gazeguide::loss::{detection_loss, LossWeights, Phase};
use gazeguide::matching::hungarian_match;
use gazeguide::matrix::Matrix;
use gazeguide::metrics::{ap_range, average_precision, average_recall, IOU_THRESHOLDS};
use gazeguide::model::{Detection, Detector, ModelConfig, Replay};
use gazeguide::rectification::QueryOrigin;
use gazeguide::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn work_dir() -> PathBuf {
    std::env::var_os("GAZEGUIDE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

// ---------------------------------------------------------------------------
// 1. Matching

fn brute_force_min(c: &Matrix) -> f64 {
    fn rec(c: &Matrix, flip: bool, depth: usize, used: &mut [bool], acc: &mut Vec<(usize, usize)>, best: &mut f64) {
        let small = if flip { c.cols() } else { c.rows() };
        if depth == small {
            let mut pairs = acc.clone();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
            *best = best.min(total);
            return;
        }
        for b in 0..used.len() {
            if !used[b] {
                used[b] = true;
                acc.push(if flip { (b, depth) } else { (depth, b) });
                rec(c, flip, depth + 1, used, acc, best);
                acc.pop();
                used[b] = false;
            }
        }
    }
    let flip = c.rows() > c.cols();
    let big = c.rows().max(c.cols());
    let mut best = f64::INFINITY;
    rec(c, flip, 0, &mut vec![false; big], &mut Vec::new(), &mut best);
    best
}

fn criterion_matching() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = Vec::new();
    for trial in 0..300 {
        let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let integer = trial % 2 == 0;
        let c = Matrix::from_fn(n, m, |_, _| {
            if integer {
                rng.random_range(0..6) as f64
            } else {
                rng.random_range(-3.0..10.0)
            }
        });
        let a = hungarian_match(&c).expect("finite matrix");
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let valid = a.pairs.len() == n.min(m) && rows.len() == a.pairs.len() && cols.len() == a.pairs.len();
        let (got, want) = (a.total_cost(&c), brute_force_min(&c));
        if !valid || got != want {
            bad.push(format!("trial {trial} ({n}x{m}): {got} vs {want}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        bad.is_empty() && secs < 10.0,
        format!("300 matrices, {} mismatches{}, {secs:.2}s (limit 10s)", bad.len(), first_of(&bad)),
    )
}

// ---------------------------------------------------------------------------
// 2. Metrics

mod reference {
    use super::*;

    fn corners_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
        inter / union
    }

    /// Per-image `(score, hit)` in ranked order (score descending, input order
    /// on ties). A detection takes the best still-free ground truth.
    fn ranked_hits(dets: &[Detection], gts: &[BoundingBox], t: f64, cap: usize) -> Vec<(f64, bool)> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        idx.truncate(cap);
        let mut free = vec![true; gts.len()];
        let mut out = Vec::new();
        for i in idx {
            let d = dets[i].bbox.to_corners();
            let mut pick = None;
            let mut best = -1.0;
            for g in 0..gts.len() {
                let v = corners_iou(d, gts[g].to_corners());
                if free[g] && v >= t && v > best {
                    best = v;
                    pick = Some(g);
                }
            }
            if let Some(g) = pick {
                free[g] = false;
            }
            out.push((dets[i].score, pick.is_some()));
        }
        out
    }

    pub fn ap(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>], t: f64) -> Option<f64> {
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            return None;
        }
        let mut pooled = Vec::new();
        for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
            for (rank, (s, hit)) in ranked_hits(d, g, t, usize::MAX).into_iter().enumerate() {
                pooled.push((s, img, rank, hit));
            }
        }
        pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut sum = 0.0;
        for level in 0..=100 {
            let r = level as f64 / 100.0;
            let mut best: f64 = 0.0;
            for k in 1..=pooled.len() {
                let tp = pooled[..k].iter().filter(|x| x.3).count() as f64;
                if tp / n_gt as f64 >= r {
                    best = best.max(tp / k as f64);
                }
            }
            sum += best;
        }
        Some(sum / 101.0)
    }

    pub fn ar(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>]) -> Option<f64> {
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            return None;
        }
        let thresholds = [0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];
        let mut sum = 0.0;
        for t in thresholds {
            let hits: usize = dets
                .iter()
                .zip(gts)
                .map(|(d, g)| ranked_hits(d, g, t, 100).iter().filter(|x| x.1).count())
                .sum();
            sum += hits as f64 / n_gt as f64;
        }
        Some(sum / thresholds.len() as f64)
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
    )
    .unwrap()
}

fn random_metric_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BoundingBox>>) {
    let n_img = rng.random_range(1..=4);
    let coarse = rng.random_bool(0.3);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_img {
        let g: Vec<BoundingBox> = (0..rng.random_range(0..=4)).map(|_| random_box(rng)).collect();
        let d: Vec<Detection> = (0..rng.random_range(0..=7))
            .map(|_| {
                let bbox = if !g.is_empty() && rng.random_bool(0.7) {
                    let t = g[rng.random_range(0..g.len())];
                    BoundingBox::clamped(
                        t.cx() + rng.random_range(-0.05..0.05),
                        t.cy() + rng.random_range(-0.05..0.05),
                        t.w() * rng.random_range(0.6..1.4),
                        t.h() * rng.random_range(0.6..1.4),
                    )
                } else {
                    random_box(rng)
                };
                let score = if coarse {
                    rng.random_range(0..4) as f64 / 4.0
                } else {
                    rng.random_range(0.0..1.0)
                };
                Detection { bbox, score }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    for _ in 0..200 {
        let (d, g) = random_metric_instance(&mut rng);
        let mut ok = true;
        let mut want_range = Vec::new();
        for &t in &IOU_THRESHOLDS {
            let (a, b) = (average_precision(&d, &g, t), reference::ap(&d, &g, t));
            ok &= close(a, b, 1e-9);
            if let (Some(x), Some(y)) = (a, b) {
                worst = worst.max((x - y).abs());
            }
            want_range.push(b);
        }
        let range_ref = want_range.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / 7.0);
        ok &= close(ap_range(&d, &g), range_ref, 1e-9);
        ok &= close(average_recall(&d, &g), reference::ar(&d, &g), 1e-9);
        mismatches += usize::from(!ok);
    }

    // Two ground truths; ranked detections hit, miss, hit.
    let g1 = BoundingBox::from_corners(0.0, 0.0, 0.2, 0.2).unwrap();
    let g2 = BoundingBox::from_corners(0.5, 0.5, 0.7, 0.7).unwrap();
    let fp = BoundingBox::from_corners(0.8, 0.0, 0.95, 0.1).unwrap();
    let dets = vec![vec![
        Detection { bbox: g1, score: 0.9 },
        Detection { bbox: fp, score: 0.8 },
        Detection { bbox: g2, score: 0.7 },
    ]];
    let hand = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let got = average_precision(&dets, &[vec![g1, g2]], 0.5).unwrap();
    let hand_ok = (got - hand).abs() < 1e-6 && (got - 0.8350).abs() < 5e-5;

    Outcome::new(
        mismatches == 0 && hand_ok,
        format!(
            "200 instances, {mismatches} mismatches, max |AP diff| {worst:.1e}; hand AP {got:.6} vs {hand:.6} (quoted 0.8350)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Gaze pipeline

fn random_trace(rng: &mut ChaCha8Rng, size: f64) -> Vec<GazePoint> {
    let n = rng.random_range(1..30);
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(50.0..600.0);
            GazePoint {
                t_ms: t,
                x_px: rng.random_range(0.0..size),
                y_px: rng.random_range(0.0..size),
                dur_ms: rng.random_range(10.0..900.0),
            }
        })
        .collect()
}

fn criterion_gaze() -> Outcome {
    let p = GazeParams::default();
    // Twelve fixations jittered by half a pixel around (90, 40) act as one
    // Gaussian; its thresholded region is a disc of radius sigma*sqrt(2 ln(1/tau)).
    let (cx, cy) = (90.0, 40.0);
    let trace: Vec<GazePoint> = (0..12)
        .map(|i| {
            let (dx, dy) = [(0.0, 0.0), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)][i % 4];
            GazePoint {
                t_ms: i as f64 * 400.0,
                x_px: cx + dx,
                y_px: cy + dy,
                dur_ms: 350.0,
            }
        })
        .collect();
    let candida = [BoundingBox::from_pixel_corners(10.0, 90.0, 30.0, 115.0, 128, 128).unwrap()];
    let out = process_gaze(&trace, &candida, &p, 128, 128).unwrap();
    let r = p.sigma_px * (2.0 * (1.0 / p.tau_rel).ln()).sqrt();
    let want = [cx - r, cy - r, cx + r, cy + r];
    let mut extent_err = f64::INFINITY;
    if out.len() == 1 {
        let c = out[0].bbox.to_corners().map(|v| v * 128.0);
        extent_err = c.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    }
    let cluster_ok = extent_err <= 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut scale_fail, mut mono_fail) = (0, 0);
    let small = GazeParams {
        sigma_px: 6.0,
        min_area_px: 20,
        ..p
    };
    for _ in 0..100 {
        let trace = random_trace(&mut rng, 96.0);
        let s = rng.random_range(0.05..50.0);
        let scaled: Vec<GazePoint> = trace.iter().map(|g| GazePoint { dur_ms: g.dur_ms * s, ..*g }).collect();
        let cand = [random_box(&mut rng)];
        if process_gaze(&trace, &cand, &small, 96, 96).unwrap() != process_gaze(&scaled, &cand, &small, 96, 96).unwrap() {
            scale_fail += 1;
        }
        let h = rasterize_gaze(&trace, 96, 96, small.sigma_px).unwrap();
        let (t1, t2) = (rng.random_range(0.05..0.95f64), rng.random_range(0.05..0.95f64));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (a_lo, a_hi) = (threshold_and_clean(&h, lo, 1), threshold_and_clean(&h, hi, 1));
        let nested = (0..96).all(|y| (0..96).all(|x| !a_hi.get(x, y) || a_lo.get(x, y)));
        if !nested || a_hi.area() > a_lo.area() {
            mono_fail += 1;
        }
    }
    Outcome::new(
        cluster_ok && scale_fail == 0 && mono_fail == 0,
        format!(
            "dwell cluster extent error {extent_err:.2}px (limit 2); 100 traces: {scale_fail} duration-scaling failures, {mono_fail} threshold-monotonicity failures"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradients and overfitting

fn noise_image(rng: &mut ChaCha8Rng, size: usize) -> GrayImage {
    GrayImage::new(size, size, (0..size * size).map(|_| rng.random()).collect()).unwrap()
}

/// Central differences on `n` random parameter coordinates of the miniature
/// model in f64. Returns the worst relative error.
fn gradient_check(phase: Phase, seed: u64, n: usize) -> f64 {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_learnable_queries: 6,
        query_budget: 6,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Detector::<f64>::new(cfg, seed).unwrap();
    // Zero-initialized biases leave some ReLU inputs exactly at the kink;
    // a small random shift moves the check to a generic point.
    for id in 0..model.params().len() {
        for v in &mut model.params_mut().get_mut(id).data {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let image = noise_image(&mut rng, 32);
    let candida = LabeledBox::candida(BoundingBox::new(0.4, 0.45, 0.3, 0.25).unwrap());
    let gaze_only = BoundingBox::new(0.7, 0.25, 0.2, 0.2).unwrap();
    let (targets, anchors) = match phase {
        Phase::Warmup => (vec![candida, LabeledBox::gaze_only(gaze_only)], vec![]),
        Phase::Main => (vec![candida], vec![gaze_only, BoundingBox::new(0.72, 0.27, 0.21, 0.18).unwrap()]),
    };
    let w = LossWeights::default();
    // Anchors flow between stages without gradient; replaying the first
    // pass's anchors and selections differentiates the same function.
    let loss_at = |m: &Detector<f64>, replay: Option<&Replay>, grads: Option<&mut Vec<Tensor<f64>>>| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, grads.is_some());
        let (out, used) = m.forward_replay(&mut tape, &p, &image, &anchors, replay).unwrap();
        let loss = detection_loss(&mut tape, &out, &targets, phase, &w).unwrap();
        if let Some(g) = grads {
            tape.backward(loss.total, g);
        }
        (tape.scalar(loss.total), used)
    };
    let mut grads = model.params().zero_grads();
    let (_, replay) = loss_at(&model, None, Some(&mut grads));

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        // Only coordinates with a non-vanishing gradient say anything.
        let (id, k) = loop {
            let id = rng.random_range(0..model.params().len());
            let k = rng.random_range(0..model.params().get(id).data.len());
            if grads[id].data[k].abs() > 1e-6 {
                break (id, k);
            }
        };
        let orig = model.params().get(id).data[k];
        model.params_mut().get_mut(id).data[k] = orig + h;
        let up = loss_at(&model, Some(&replay), None).0;
        model.params_mut().get_mut(id).data[k] = orig - h;
        let down = loss_at(&model, Some(&replay), None).0;
        model.params_mut().get_mut(id).data[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[id].data[k];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        worst = worst.max(rel);
    }
    worst
}

fn criterion_gradients_and_overfit() -> Outcome {
    let start = Instant::now();
    let grad_err = gradient_check(Phase::Warmup, 41, 10).max(gradient_check(Phase::Main, 42, 10));

    let scenes = generate_dataset(&DataConfig::default().scene_spec(), &DataConfig::default().gaze_sim(), 4).unwrap();
    let refs: Vec<_> = scenes.iter().collect();
    let mut model = Detector::<f32>::new(ModelConfig::default(), 0).unwrap();
    let history = harness::overfit_batch(&mut model, &refs, &LossWeights::default(), 1e-3, 500).unwrap();
    let first = history[0].total;
    let best = history.iter().map(|l| l.total).fold(f64::INFINITY, f64::min);
    let ratio = best / first;

    let mut recovered = 0;
    let mut total = 0;
    for s in &scenes {
        let dets = model.predict(&s.image, 0.5).unwrap();
        for g in s.candida_boxes() {
            total += 1;
            recovered += usize::from(dets.iter().any(|d| iou(&d.bbox, &g) >= 0.5));
        }
    }
    // The 5-step moving average is reported, not asserted: re-matching makes
    // the loss piecewise and small upticks occur even as it collapses.
    let ma: Vec<f64> = history.windows(5).map(|w| w.iter().map(|l| l.total).sum::<f64>() / 5.0).collect();
    let upticks = ma.windows(2).filter(|w| w[1] > w[0]).count();

    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        grad_err < 1e-3 && ratio < 0.05 && recovered == total && secs < 300.0,
        format!(
            "gradient rel err {grad_err:.1e} over 20 coords (limit 1e-3); overfit loss {first:.3} -> {best:.4} (ratio {ratio:.4}, limit 0.05); GT recovered {recovered}/{total}; moving-average upticks {upticks}/{}; {secs:.0}s (limit 300s)",
            ma.len() - 1
        ),
    )
}

// ---------------------------------------------------------------------------
// 5 and 6. Ablation

struct Ablation {
    table: AblationTable,
    records: Vec<(&'static str, u64, RunRecord)>,
    dataset: Dataset,
    trained: usize,
    base: TrainConfig,
}

fn acceptance_dataset(dir: &Path) -> Dataset {
    let cfg = DataConfig::default();
    let scenes = generate_dataset(&cfg.scene_spec(), &cfg.gaze_sim(), cfg.n_scenes).unwrap();
    let data_dir = dir.join("data");
    if let Ok(existing) = read_dataset(&data_dir) {
        if existing.scenes == scenes {
            return existing;
        }
    }
    // Stale or missing: runs trained on other data are worthless too.
    let _ = fs::remove_dir_all(dir);
    write_dataset(&scenes, &cfg.scene_spec(), &cfg.gaze_sim(), &data_dir).unwrap();
    read_dataset(&data_dir).unwrap()
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = work_dir();
        if std::env::var_os("GAZEGUIDE_ACCEPTANCE_FRESH").is_some() {
            let _ = fs::remove_dir_all(&dir);
        }
        let dataset = acceptance_dataset(&dir);
        let runs = dir.join("runs");
        let base = TrainConfig {
            dataset: dataset.root.clone(),
            eval_every: 5,
            ..TrainConfig::default()
        };
        let mut trained = 0;
        for &(_, slug, ggw, ggr) in &ABLATION_ROWS {
            for seed in SEEDS {
                let cfg = TrainConfig {
                    seed,
                    ggw_enabled: ggw,
                    ggr_enabled: ggr,
                    ..base.clone()
                };
                trained += usize::from(finished_run(&runs.join(format!("{slug}_seed{seed}")), &cfg).unwrap().is_none());
            }
        }
        let table = harness::ablate(&base, &SEEDS, &runs, &mut |row, seed, e| {
            if e.val.is_some() {
                eprintln!(
                    "  [{row} seed {seed}] epoch {} AP {:.3} fp {:.3}",
                    e.epoch,
                    e.val.as_ref().and_then(|v| v.ap_range).unwrap_or(f64::NAN),
                    e.val.as_ref().and_then(|v| v.confounder_fp_rate).unwrap_or(f64::NAN)
                );
            }
        })
        .unwrap();
        let mut records = Vec::new();
        for &(name, slug, ggw, ggr) in &ABLATION_ROWS {
            for seed in SEEDS {
                let cfg = TrainConfig {
                    seed,
                    ggw_enabled: ggw,
                    ggr_enabled: ggr,
                    ..base.clone()
                };
                let r = finished_run(&runs.join(format!("{slug}_seed{seed}")), &cfg).unwrap().expect("run finished");
                records.push((name, seed, r));
            }
        }
        Ablation {
            table,
            records,
            dataset,
            trained,
            base,
        }
    })
}

fn criterion_ablation() -> Outcome {
    let a = ablation();
    println!("{}", a.table.to_markdown().trim_end());
    let row = |n: &str| a.table.row(n).expect("row present");
    let (base, both) = (row("baseline"), row("+GGW+GGR"));
    let (ap_b, ap_g) = (base.ap_range.mean.unwrap(), both.ap_range.mean.unwrap());
    let (fp_b, fp_g) = (base.confounder_fp_rate.mean.unwrap(), both.confounder_fp_rate.mean.unwrap());
    let rel = (fp_b - fp_g) / fp_b;
    Outcome::new(
        ap_g > ap_b && rel >= 0.10,
        format!(
            "AP_0.2:0.5 {ap_g:.3} vs baseline {ap_b:.3}; confounder FP rate {fp_g:.3} vs {fp_b:.3} (relative reduction {:.1}%, need >= 10%); {} of 12 runs trained now",
            rel * 100.0,
            a.trained
        ),
    )
}

fn criterion_invariants() -> Outcome {
    let a = ablation();
    let warmup = a.base.warmup_epochs;
    let mut problems = Vec::new();
    for (name, seed, r) in &a.records {
        let (ggw, ggr) = ABLATION_ROWS.iter().find(|x| x.0 == *name).map(|x| (x.2, x.3)).unwrap();
        for e in &r.epochs {
            let warm = e.epoch <= warmup;
            let want_phase = if warm && ggw { Phase::Warmup } else { Phase::Main };
            let want_cats = if warm && ggw {
                vec![Category::Candida, Category::GazeOnly]
            } else {
                vec![Category::Candida]
            };
            let gaze_ok = if warm || !ggr { e.gaze_queries == 0 } else { e.gaze_queries > 0 };
            if e.phase != want_phase || e.positive_categories != want_cats || !gaze_ok {
                problems.push(format!("{name} seed {seed} epoch {}", e.epoch));
            }
        }
    }

    // Trained weights: the query budget holds for any number of gaze queries,
    // gaze queries never enter an assignment, and predictions ignore gaze.
    let dir = work_dir().join("runs/ggw_ggr_seed1/final");
    let (model, meta) = harness::load_checkpoint(&dir).unwrap();
    let budget = meta.model.query_budget;
    let val = a.dataset.split(Split::Val).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for s in val.iter().take(10) {
        let n_gaze = rng.random_range(0..=meta.config.max_gaze_queries);
        let anchors: Vec<BoundingBox> = (0..n_gaze).map(|_| random_box(&mut rng)).collect();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let (out, plan) = model.forward(&mut tape, &p, &s.image, &anchors).unwrap();
        if plan.len() != budget || plan.gaze_count() != n_gaze {
            problems.push(format!("budget {} with {n_gaze} gaze queries", plan.len()));
        }
        let loss = detection_loss(&mut tape, &out, &s.candida, Phase::Main, &meta.config.loss()).unwrap();
        for asg in &loss.assignments[1..] {
            if asg.pairs.iter().any(|&(q, _)| out.origins[q] != QueryOrigin::Learnable) {
                problems.push(format!("gaze query assigned in scene {}", s.id));
            }
        }
    }
    let (report, dets) = harness::evaluate_model(&model, &val, meta.config.eval()).unwrap();
    let scrambled: Vec<_> = val
        .iter()
        .map(|s| {
            let mut s = (*s).clone();
            s.gaze = random_trace(&mut rng, 128.0);
            s
        })
        .collect();
    let refs: Vec<_> = scrambled.iter().collect();
    let (report2, dets2) = harness::evaluate_model(&model, &refs, meta.config.eval()).unwrap();
    if report != report2 || dets != dets2 {
        problems.push("predictions depend on gaze".into());
    }

    Outcome::new(
        problems.is_empty(),
        format!(
            "{} run records checked (phase switch after epoch {warmup}, positive categories, gaze queries); budget {budget} held, no gaze assignments, gaze-blind predict; {} problems{}",
            a.records.len(),
            problems.len(),
            first_of(&problems)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Reproducibility

fn criterion_reproducibility() -> Outcome {
    let a = ablation();
    let dir = work_dir().join("repro");
    let _ = fs::remove_dir_all(&dir);
    let cfg = TrainConfig {
        total_epochs: 7,
        ggw_enabled: true,
        ggr_enabled: true,
        seed: 9,
        eval_every: 7,
        ..a.base.clone()
    };
    let r1 = harness::train_on(&cfg, &a.dataset, Some(&dir.join("a")), &mut |_| {}).unwrap();
    let r2 = harness::train_on(&cfg, &a.dataset, Some(&dir.join("b")), &mut |_| {}).unwrap();
    let same_record = r1.record.without_timing() == r2.record.without_timing();
    let bytes = |run: &str, ck: &str| fs::read(dir.join(run).join(ck).join("params.bin")).unwrap();
    let same_ckpt = ["checkpoint", "final"].iter().all(|ck| bytes("a", ck) == bytes("b", ck));
    let same_params = r1.model.params().iter().zip(r2.model.params().iter()).all(|(x, y)| {
        x.1.data.iter().map(|v| v.to_bits()).eq(y.1.data.iter().map(|v| v.to_bits()))
    });
    let _ = fs::remove_dir_all(&dir);
    Outcome::new(
        same_record && same_ckpt && same_params,
        format!(
            "two 7-epoch GGW+GGR runs (seed 9): records identical {same_record}, checkpoints bit-identical {same_ckpt}, in-memory weights identical {same_params}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("matching oracle", criterion_matching),
        ("metric oracle", criterion_metrics),
        ("gaze pipeline", criterion_gaze),
        ("gradient check and overfit", criterion_gradients_and_overfit),
        ("directional ablation", criterion_ablation),
        ("structural invariants", criterion_invariants),
        ("reproducibility", criterion_reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("GAZEGUIDE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!outcome.pass);
        println!(
            "criterion {n} {name}: {} ({:.1}s) {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn first_of(items: &[String]) -> String {
    items.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
}
