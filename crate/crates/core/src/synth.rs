//! Synthetic scenes: thin bright "candida" curves carrying periodic
//! constrictions, look-alike confounders without them (uniform curves and
//! bright cell-edge arcs), round cells as clutter, and a simulated expert
//! gaze trace that dwells on both candida and confounders.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaze::{read_trace_csv, validate_trace, write_trace_csv, GazePoint};
use crate::geometry::{iou, BoundingBox};
use crate::image::GrayImage;
use crate::labels::LabeledBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_candida: (usize, usize),
    pub n_confounder: (usize, usize),
    pub n_distractor_cells: (usize, usize),
    pub noise_std: f64,
    /// Fractional brightness drop at each candida constriction.
    pub constriction_depth: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_candida: (1, 2),
            n_confounder: (1, 2),
            n_distractor_cells: (3, 6),
            noise_std: 8.0,
            constriction_depth: 0.5,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::config("scene images must be at least 64x64"));
        }
        for (name, (lo, hi)) in [
            ("n_candida", self.n_candida),
            ("n_confounder", self.n_confounder),
            ("n_distractor_cells", self.n_distractor_cells),
        ] {
            if lo > hi {
                return Err(Error::config(format!("{name} range is empty")));
            }
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.constriction_depth) {
            return Err(Error::config("noise_std must be >= 0 and constriction_depth in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSimParams {
    pub dwell_ms_candida: f64,
    pub dwell_ms_confounder: f64,
    pub fix_per_object: usize,
    pub jitter_px: f64,
    /// Expected number of short background fixations per scene.
    pub background_fix_rate: f64,
}

impl Default for GazeSimParams {
    fn default() -> Self {
        Self {
            dwell_ms_candida: 250.0,
            dwell_ms_confounder: 600.0,
            fix_per_object: 6,
            jitter_px: 2.0,
            background_fix_rate: 4.0,
        }
    }
}

impl GazeSimParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.dwell_ms_candida, self.dwell_ms_confounder, self.jitter_px, self.background_fix_rate];
        if vals.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::config("gaze simulation parameters must be finite and >= 0"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: GrayImage,
    pub candida: Vec<LabeledBox>,
    /// Evaluation-only ground truth; never shown to the model.
    pub confounders: Vec<BoundingBox>,
    pub gaze: Vec<GazePoint>,
}

impl Scene {
    pub fn candida_boxes(&self) -> Vec<BoundingBox> {
        self.candida.iter().map(|c| c.bbox).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Candida,
    Curve,
    EdgeArc,
}

/// Centreline samples of a rendered object, for inspection in tests.
#[derive(Debug, Clone)]
pub struct ObjectTrace {
    pub kind: ObjectKind,
    pub centerline: Vec<(f64, f64)>,
    pub bbox: BoundingBox,
}

const MIN_CENTER_GAP: f64 = 44.0;
const BACKGROUND: f64 = 70.0;
const STEP: f64 = 0.25;

struct Stroke {
    /// `(x, y, half_width, gain)` samples.
    samples: Vec<(f64, f64, f64, f64)>,
    amplitude: f64,
}

impl Stroke {
    fn translated(&self, dx: f64, dy: f64) -> Stroke {
        Stroke {
            samples: self.samples.iter().map(|&(x, y, h, g)| (x + dx, y + dy, h, g)).collect(),
            amplitude: self.amplitude,
        }
    }

    /// Half-open pixel bounds `(x0, y0, x1, y1)` of every pixel it touches.
    fn pixel_bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y, hw, _) in &self.samples {
            let r = hw + 0.5;
            // Pixel centres sit at integer coordinates.
            b.0 = b.0.min((x - r).floor() + 1.0);
            b.1 = b.1.min((y - r).floor() + 1.0);
            b.2 = b.2.max((x + r).ceil());
            b.3 = b.3.max((y + r).ceil());
        }
        b
    }

    fn render(&self, canvas: &mut [f64], width: usize, height: usize) {
        let mut cover = vec![0.0f64; width * height];
        let mut gain = vec![0.0f64; width * height];
        for &(x, y, hw, g) in &self.samples {
            let r = hw + 0.5;
            let (x0, x1) = (((x - r).floor() + 1.0).max(0.0) as usize, ((x + r).ceil() as usize).min(width));
            let (y0, y1) = (((y - r).floor() + 1.0).max(0.0) as usize, ((y + r).ceil() as usize).min(height));
            for py in y0..y1 {
                for px in x0..x1 {
                    let d = ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt();
                    let c = (r - d).clamp(0.0, 1.0);
                    let i = py * width + px;
                    if c > cover[i] || (c == cover[i] && g < gain[i]) {
                        cover[i] = c;
                        gain[i] = g;
                    }
                }
            }
        }
        for ((v, c), g) in canvas.iter_mut().zip(&cover).zip(&gain) {
            *v += self.amplitude * c * g;
        }
    }
}

fn diagonal_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let base = rng.random_range(25.0f64..65.0).to_radians();
    base + (rng.random_range(0..4) as f64) * PI / 2.0
}

/// A gently bowed thin curve centred on the origin; with `period` set, the
/// stroke dims and narrows at regular constrictions.
fn curve_stroke<R: Rng + ?Sized>(rng: &mut R, constriction: Option<(f64, f64)>) -> Stroke {
    let len = rng.random_range(38.0..50.0);
    let theta = diagonal_angle(rng);
    let bow = rng.random_range(-5.0..5.0);
    let hw = rng.random_range(0.7..1.3);
    let (c, s) = (theta.cos(), theta.sin());
    let phase = rng.random_range(0.0..1.0);
    let n = (len / STEP) as usize;
    let samples = (0..=n)
        .map(|i| {
            let t = i as f64 * STEP - len / 2.0;
            let lateral = bow * (1.0 - (2.0 * t / len).powi(2));
            let (x, y) = (t * c - lateral * s, t * s + lateral * c);
            let (h, g) = match constriction {
                Some((period, depth)) => {
                    let u = (t + len / 2.0) / period + phase;
                    let d = (u - u.round()).abs() * period;
                    let bump = (-(d / 1.2).powi(2)).exp();
                    (hw * (1.0 - 0.4 * bump), 1.0 - depth * bump)
                }
                None => (hw, 1.0),
            };
            (x, y, h, g)
        })
        .collect();
    Stroke {
        samples,
        amplitude: rng.random_range(55.0..85.0),
    }
}

/// A bright arc of a cell outline whose chord lies diagonally.
fn arc_stroke<R: Rng + ?Sized>(rng: &mut R) -> (Stroke, (f64, f64, f64)) {
    let radius = rng.random_range(17.0..22.0);
    let span = rng.random_range(100.0f64..150.0).to_radians();
    let chord_dir = diagonal_angle(rng);
    // The arc bulges perpendicular to its chord; its midpoint sits on the normal.
    let normal = chord_dir + PI / 2.0;
    let sagitta = radius * (1.0 - (span / 2.0).cos());
    let (ccx, ccy) = (
        -(radius - sagitta / 2.0) * normal.cos(),
        -(radius - sagitta / 2.0) * normal.sin(),
    );
    let hw = rng.random_range(0.7..1.3);
    let n = (radius * span / STEP) as usize;
    let samples = (0..=n)
        .map(|i| {
            let a = normal - span / 2.0 + span * i as f64 / n as f64;
            (ccx + radius * a.cos(), ccy + radius * a.sin(), hw, 1.0)
        })
        .collect();
    (
        Stroke {
            samples,
            amplitude: rng.random_range(55.0..85.0),
        },
        (ccx, ccy, radius),
    )
}

fn paint_disc(canvas: &mut [f64], width: usize, height: usize, cx: f64, cy: f64, r: f64, amp: f64) {
    for y in 0..height {
        for x in 0..width {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let c = (r + 0.5 - d).clamp(0.0, 1.0);
            canvas[y * width + x] += amp * c;
        }
    }
}

fn bbox_from_bounds(b: (f64, f64, f64, f64), width: usize, height: usize) -> BoundingBox {
    BoundingBox::from_pixel_corners(b.0, b.1, b.2, b.3, width, height).expect("stroke bounds are nonempty")
}

/// Generates one scene and the centrelines of its objects.
pub fn generate_scene_traced<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<(Scene, Vec<ObjectTrace>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut canvas: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            BACKGROUND + 6.0 * (2.0 * PI * (x + 0.5 * y)).sin()
        })
        .collect();

    let n_cells = rng.random_range(spec.n_distractor_cells.0..=spec.n_distractor_cells.1);
    for _ in 0..n_cells {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let r = rng.random_range(7.0..13.0);
        paint_disc(&mut canvas, w, h, cx, cy, r, rng.random_range(12.0..25.0));
        paint_disc(&mut canvas, w, h, cx, cy, r * 0.3, -rng.random_range(10.0..20.0));
    }

    let n_candida = rng.random_range(spec.n_candida.0..=spec.n_candida.1);
    let n_conf = rng.random_range(spec.n_confounder.0..=spec.n_confounder.1);
    let mut placed: Vec<(f64, f64, BoundingBox)> = Vec::new();
    let mut traces = Vec::new();
    for k in 0..n_candida + n_conf {
        let kind = if k < n_candida {
            ObjectKind::Candida
        } else if rng.random_bool(0.4) {
            ObjectKind::EdgeArc
        } else {
            ObjectKind::Curve
        };
        let (stroke, arc) = match kind {
            ObjectKind::Candida => {
                let period = rng.random_range(6.0..8.0);
                (curve_stroke(rng, Some((period, spec.constriction_depth))), None)
            }
            ObjectKind::Curve => (curve_stroke(rng, None), None),
            ObjectKind::EdgeArc => {
                let (s, c) = arc_stroke(rng);
                (s, Some(c))
            }
        };
        for _ in 0..200 {
            let (ox, oy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let moved = stroke.translated(ox, oy);
            let b = moved.pixel_bounds();
            if b.0 < 1.0 || b.1 < 1.0 || b.2 > w as f64 - 1.0 || b.3 > h as f64 - 1.0 {
                continue;
            }
            let bbox = bbox_from_bounds(b, w, h);
            let (cx, cy) = (bbox.cx() * w as f64, bbox.cy() * h as f64);
            let clear = placed
                .iter()
                .all(|&(px, py, pb)| (px - cx).hypot(py - cy) >= MIN_CENTER_GAP && iou(&pb, &bbox) == 0.0);
            if !clear {
                continue;
            }
            if let Some((ax, ay, r)) = arc {
                // Faint body of the cell whose edge the arc is.
                paint_disc(&mut canvas, w, h, ax + ox, ay + oy, r - 1.5, rng.random_range(8.0..14.0));
            }
            moved.render(&mut canvas, w, h);
            placed.push((cx, cy, bbox));
            traces.push(ObjectTrace {
                kind,
                centerline: moved.samples.iter().map(|s| (s.0, s.1)).collect(),
                bbox,
            });
            break;
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let pixels = canvas
        .iter()
        .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let scene = Scene {
        id: String::new(),
        image: GrayImage::new(w, h, pixels)?,
        candida: traces
            .iter()
            .filter(|t| t.kind == ObjectKind::Candida)
            .map(|t| LabeledBox::candida(t.bbox))
            .collect(),
        confounders: traces
            .iter()
            .filter(|t| t.kind != ObjectKind::Candida)
            .map(|t| t.bbox)
            .collect(),
        gaze: Vec::new(),
    };
    Ok((scene, traces))
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    generate_scene_traced(spec, rng).map(|(s, _)| s)
}

/// Fixation clusters on every candida and confounder (confounders held
/// longer), plus sparse short background fixations, in random visiting order.
pub fn simulate_gaze<R: Rng + ?Sized>(scene: &Scene, params: &GazeSimParams, rng: &mut R) -> Result<Vec<GazePoint>> {
    params.validate()?;
    let (w, h) = (scene.image.width() as f64, scene.image.height() as f64);
    // (centre, mean dwell) per cluster; `None` centre = background fixation.
    let mut visits: Vec<(Option<(f64, f64)>, f64)> = Vec::new();
    for c in &scene.candida {
        visits.push((Some((c.bbox.cx() * w, c.bbox.cy() * h)), params.dwell_ms_candida));
    }
    for c in &scene.confounders {
        visits.push((Some((c.cx() * w, c.cy() * h)), params.dwell_ms_confounder));
    }
    let n_bg = if params.background_fix_rate > 0.0 {
        Poisson::new(params.background_fix_rate)
            .map_err(|e| Error::config(e.to_string()))?
            .sample(rng) as usize
    } else {
        0
    };
    visits.extend((0..n_bg).map(|_| (None, 0.0)));
    // Fisher-Yates with the scene rng keeps the order reproducible.
    for i in (1..visits.len()).rev() {
        let j = rng.random_range(0..=i);
        visits.swap(i, j);
    }

    let jitter = Normal::new(0.0, params.jitter_px).map_err(|e| Error::config(e.to_string()))?;
    let mut t = 0.0;
    let mut trace = Vec::new();
    let mut push = |x: f64, y: f64, dur: f64, t: &mut f64, rng: &mut R| {
        trace.push(GazePoint {
            t_ms: *t,
            x_px: x.clamp(0.0, w - 1e-6),
            y_px: y.clamp(0.0, h - 1e-6),
            dur_ms: dur,
        });
        *t += dur + rng.random_range(20.0..60.0);
    };
    for (centre, dwell) in visits {
        match centre {
            Some((cx, cy)) => {
                for _ in 0..params.fix_per_object {
                    let (x, y) = (cx + jitter.sample(rng), cy + jitter.sample(rng));
                    let dur = dwell * rng.random_range(0.7..1.3);
                    push(x, y, dur, &mut t, rng);
                }
            }
            None => {
                let (x, y) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                let dur = rng.random_range(60.0..150.0);
                push(x, y, dur, &mut t, rng);
            }
        }
    }
    Ok(trace)
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Independent generator streams for scene `index`: one for the image, one
/// for its gaze trace.
fn scene_rngs(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(2 * index as u64);
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    b.set_stream(2 * index as u64 + 1);
    (a, b)
}

pub fn generate_dataset(spec: &SceneSpec, gaze: &GazeSimParams, n_scenes: usize) -> Result<Vec<Scene>> {
    (0..n_scenes)
        .map(|i| {
            let (mut r_scene, mut r_gaze) = scene_rngs(spec.rng_seed, i);
            let mut scene = generate_scene(spec, &mut r_scene)?;
            scene.id = scene_id(i);
            scene.gaze = simulate_gaze(&scene, gaze, &mut r_gaze)?;
            Ok(scene)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::input(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// 3:1:1 split of scene indices ordered by the SHA-256 of their index.
pub fn split_indices(n: usize) -> [Vec<usize>; 3] {
    let mut order: Vec<(Vec<u8>, usize)> = (0..n)
        .map(|i| (Sha256::digest((i as u64).to_le_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let n_val = n / 5;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let mut it = order.into_iter().map(|(_, i)| i);
    let mut take = |k: usize| {
        let mut v: Vec<usize> = it.by_ref().take(k).collect();
        v.sort_unstable();
        v
    };
    let train = take(n_train);
    let val = take(n_val);
    let test = take(n_test);
    [train, val, test]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scene_spec: SceneSpec,
    pub gaze_sim: GazeSimParams,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    width: usize,
    height: usize,
    candida: Vec<BoundingBox>,
    confounders: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub scenes: Vec<Scene>,
    pub manifest: Option<Manifest>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Result<Vec<&Scene>> {
        let m = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::file(self.root.join("manifest.json"), "dataset has no manifest"))?;
        let ids = match split {
            Split::Train => &m.splits.train,
            Split::Val => &m.splits.val,
            Split::Test => &m.splits.test,
        };
        ids.iter()
            .map(|id| {
                self.scenes
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::file(self.root.join("manifest.json"), format!("unknown scene {id}")))
            })
            .collect()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::file(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

pub fn write_dataset(scenes: &[Scene], spec: &SceneSpec, gaze: &GazeSimParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::file(dir, e))?;
    fs::create_dir_all(dir.join("gaze")).map_err(|e| Error::file(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        s.image.write_png(&dir.join("images").join(format!("{}.png", s.id)))?;
        write_trace_csv(&dir.join("gaze").join(format!("{}.gaze.csv", s.id)), &s.gaze)?;
        records.push(AnnotationRecord {
            id: s.id.clone(),
            width: s.image.width(),
            height: s.image.height(),
            candida: s.candida_boxes(),
            confounders: s.confounders.clone(),
        });
    }
    write_json(&dir.join("annotations.json"), &records)?;
    let [train, val, test] = split_indices(scenes.len());
    let ids = |v: Vec<usize>| v.into_iter().map(|i| scenes[i].id.clone()).collect();
    let manifest = Manifest {
        seed: spec.rng_seed,
        scene_spec: *spec,
        gaze_sim: *gaze,
        splits: Splits {
            train: ids(train),
            val: ids(val),
            test: ids(test),
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads a dataset directory. A directory without `annotations.json` holds
/// no scenes.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join("annotations.json");
    if !dir.is_dir() {
        return Err(Error::file(dir, "dataset directory does not exist"));
    }
    if !ann_path.exists() {
        return Ok(Dataset {
            root: dir.to_path_buf(),
            scenes: Vec::new(),
            manifest: None,
        });
    }
    let records: Vec<AnnotationRecord> = read_json(&ann_path)?;
    let mut scenes = Vec::with_capacity(records.len());
    for r in records {
        let img_path = dir.join("images").join(format!("{}.png", r.id));
        let image = GrayImage::read_png(&img_path)?;
        if (image.width(), image.height()) != (r.width, r.height) {
            return Err(Error::file(
                &img_path,
                format!("image is {}x{}, annotations say {}x{}", image.width(), image.height(), r.width, r.height),
            ));
        }
        let gaze_path = dir.join("gaze").join(format!("{}.gaze.csv", r.id));
        let gaze = read_trace_csv(&gaze_path)?;
        validate_trace(&gaze, r.width, r.height).map_err(|e| Error::file(&gaze_path, e))?;
        scenes.push(Scene {
            id: r.id,
            image,
            candida: r.candida.into_iter().map(LabeledBox::candida).collect(),
            confounders: r.confounders,
            gaze,
        });
    }
    let m_path = dir.join("manifest.json");
    let manifest = if m_path.exists() { Some(read_json(&m_path)?) } else { None };
    Ok(Dataset {
        root: dir.to_path_buf(),
        scenes,
        manifest,
    })
}
