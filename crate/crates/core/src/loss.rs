//! Training targets per phase, matching costs and the set-prediction loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{giou, BoundingBox};
use crate::labels::{Category, Class, LabeledBox};
use crate::matching::{hungarian_match, MatchAssignment};
use crate::matrix::Matrix;
use crate::model::{DetectorOutput, LayerOutput, LayerValues};
use crate::rectification::{indices_of, QueryOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_noobj: f64,
    pub w_gazequery: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_class: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_noobj: 0.1,
            w_gazequery: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_class, self.w_l1, self.w_giou, self.w_noobj, self.w_gazequery];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::config("loss weights must be finite and >= 0"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

/// Warm-up supervises gaze-only boxes as their own class; the main phase
/// sees candida only.
pub fn assemble_targets(candida: &[LabeledBox], gaze_only: &[LabeledBox], phase: Phase) -> Vec<LabeledBox> {
    let mut out: Vec<LabeledBox> = candida.iter().map(|c| LabeledBox::candida(c.bbox)).collect();
    if phase == Phase::Warmup {
        out.extend(gaze_only.iter().map(|g| LabeledBox::gaze_only(g.bbox)));
    }
    out
}

fn l1(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Rows follow `eligible` (query indices into `values`), columns follow
/// `targets`.
pub fn build_cost_matrix(values: &LayerValues, eligible: &[usize], targets: &[LabeledBox], w: &LossWeights) -> Matrix {
    Matrix::from_fn(eligible.len(), targets.len(), |r, t| {
        let q = eligible[r];
        let (pred, tgt) = (&values.boxes[q], &targets[t]);
        -w.w_class * values.probs[q][tgt.category.class().index()]
            + w.w_l1 * l1(pred, &tgt.bbox)
            + w.w_giou * (1.0 - giou(pred, &tgt.bbox))
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub gaze_query: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.class += other.class;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.gaze_query += other.gaze_query;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            class: self.class * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            gaze_query: self.gaze_query * s,
            total: self.total * s,
        }
    }

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("class", self.class),
            ("l1", self.l1),
            ("giou", self.giou),
            ("gaze_query", self.gaze_query),
            ("total", self.total),
        ]
    }
}

/// Loss value on the tape plus its parts and the per-layer assignments
/// (pairs are `(query index, target index)` in the layer's own rows).
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<MatchAssignment>,
}

struct LayerTerms {
    class: Var,
    l1: Option<Var>,
    giou: Option<Var>,
    gaze: Option<Var>,
    assignment: MatchAssignment,
}

fn layer_terms<T: Real>(
    tape: &mut Tape<T>,
    layer: LayerOutput,
    origins: &[QueryOrigin],
    targets: &[LabeledBox],
    phase: Phase,
    w: &LossWeights,
) -> Result<LayerTerms> {
    let values = LayerValues::read(tape, layer);
    let learnable = indices_of(origins, QueryOrigin::Learnable);
    let gaze = indices_of(origins, QueryOrigin::Gaze);

    let assignment = if targets.is_empty() || learnable.is_empty() {
        MatchAssignment::default()
    } else {
        let cost = build_cost_matrix(&values, &learnable, targets, w);
        let local = hungarian_match(&cost)?;
        MatchAssignment {
            pairs: local.pairs.iter().map(|&(r, t)| (learnable[r], t)).collect(),
        }
    };
    assert!(
        assignment.pairs.iter().all(|&(q, _)| origins[q] == QueryOrigin::Learnable),
        "a gaze query entered the assignment"
    );

    let mut cls = vec![Class::NoObject.index(); learnable.len()];
    let mut weight = vec![T::of(w.w_noobj); learnable.len()];
    for &(q, t) in &assignment.pairs {
        let r = learnable.iter().position(|&l| l == q).expect("learnable query");
        cls[r] = targets[t].category.class().index();
        weight[r] = T::one();
    }
    let norm = weight.iter().copied().sum::<T>();
    let logits = tape.gather_rows(layer.logits, &learnable);
    let class = tape.cross_entropy(logits, &cls, &weight, norm);

    let (l1, giou) = if assignment.pairs.is_empty() {
        (None, None)
    } else {
        let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let tb: Vec<[f64; 4]> = assignment.pairs.iter().map(|p| targets[p.1].bbox.to_array()).collect();
        let pred = tape.gather_rows(layer.boxes, &qs);
        let n = T::of(targets.len() as f64);
        (Some(tape.l1_loss(pred, &tb, n)), Some(tape.giou_loss(pred, &tb, n)))
    };

    let gaze_term = if phase == Phase::Main && !gaze.is_empty() {
        let logits = tape.gather_rows(layer.logits, &gaze);
        let ones = vec![T::one(); gaze.len()];
        let cls = vec![Class::NoObject.index(); gaze.len()];
        Some(tape.cross_entropy(logits, &cls, &ones, T::of(gaze.len() as f64)))
    } else {
        None
    };
    Ok(LayerTerms {
        class,
        l1,
        giou,
        gaze: gaze_term,
        assignment,
    })
}

/// Sum over the proposal layer and every decoder layer of: weighted class
/// cross-entropy over learnable queries (matched toward their target class,
/// unmatched toward no-object at `w_noobj`), L1 and GIoU on matched boxes
/// normalized by the target count, and in the main phase a mean no-object
/// cross-entropy over gaze queries.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    output: &DetectorOutput,
    targets: &[LabeledBox],
    phase: Phase,
    w: &LossWeights,
) -> Result<LossOutput> {
    if phase == Phase::Main && targets.iter().any(|t| t.category == Category::GazeOnly) {
        return Err(Error::input("gaze-only targets are only allowed during warm-up"));
    }
    let proposal_origins = vec![QueryOrigin::Learnable; tape.value(output.proposal.logits).rows];
    let mut layers = vec![(output.proposal, proposal_origins.as_slice())];
    layers.extend(output.layers.iter().map(|l| (*l, output.origins.as_slice())));

    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::new();
    for (layer, origins) in layers {
        let t = layer_terms(tape, layer, origins, targets, phase, w)?;
        breakdown.class += w.w_class * tape.scalar(t.class).as_f64();
        terms.push((t.class, T::of(w.w_class)));
        if let Some(v) = t.l1 {
            breakdown.l1 += w.w_l1 * tape.scalar(v).as_f64();
            terms.push((v, T::of(w.w_l1)));
        }
        if let Some(v) = t.giou {
            breakdown.giou += w.w_giou * tape.scalar(v).as_f64();
            terms.push((v, T::of(w.w_giou)));
        }
        if let Some(v) = t.gaze {
            breakdown.gaze_query += w.w_gazequery * tape.scalar(v).as_f64();
            terms.push((v, T::of(w.w_gazequery)));
        }
        assignments.push(t.assignment);
    }
    let total = tape.weighted_sum(&terms);
    breakdown.total = tape.scalar(total).as_f64();
    Ok(LossOutput {
        total,
        breakdown,
        assignments,
    })
}
