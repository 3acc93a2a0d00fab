//! Gaze queries: jittered replicas of gaze-only boxes whose content is the
//! candida label embedding, merged with the best learnable proposals into a
//! fixed-size query set.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::labels::Class;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_w: f64,
    pub sigma_h: f64,
    /// Number of jittered copies per gaze-only box.
    pub k: usize,
    pub max_gaze_queries: usize,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            sigma_x: 0.02,
            sigma_y: 0.02,
            sigma_w: 0.02,
            sigma_h: 0.02,
            k: 4,
            max_gaze_queries: 32,
        }
    }
}

impl JitterParams {
    pub fn validate(&self, query_budget: usize) -> Result<()> {
        let sigmas = [self.sigma_x, self.sigma_y, self.sigma_w, self.sigma_h];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::config("jitter sigmas must be finite and non-negative"));
        }
        if self.k == 0 {
            return Err(Error::config("replication factor k must be at least 1"));
        }
        if self.max_gaze_queries >= query_budget {
            return Err(Error::config(format!(
                "max_gaze_queries ({}) must be below the query budget ({query_budget})",
                self.max_gaze_queries
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Learnable,
    Gaze,
}

/// Where a query's content vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentSource {
    /// Row of the proposal content matrix.
    Proposal(usize),
    /// Row of the label embedding table.
    Label(Class),
}

/// A learnable query candidate produced from the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub anchor: BoundingBox,
    pub score: f64,
}

/// Query layout handed to the decoder: anchors, content sources, origins and
/// the self-attention mask (`true` = blocked), all of length `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub anchors: Vec<BoundingBox>,
    pub sources: Vec<ContentSource>,
    pub origins: Vec<QueryOrigin>,
    pub mask: Vec<bool>,
}

impl QueryPlan {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn gaze_count(&self) -> usize {
        self.origins.iter().filter(|o| **o == QueryOrigin::Gaze).count()
    }

    pub fn learnable_indices(&self) -> Vec<usize> {
        indices_of(&self.origins, QueryOrigin::Learnable)
    }

    pub fn gaze_indices(&self) -> Vec<usize> {
        indices_of(&self.origins, QueryOrigin::Gaze)
    }
}

pub(crate) fn indices_of(origins: &[QueryOrigin], which: QueryOrigin) -> Vec<usize> {
    origins
        .iter()
        .enumerate()
        .filter_map(|(i, o)| (*o == which).then_some(i))
        .collect()
}

/// `k` jittered copies of every box, box-major, truncated to
/// `max_gaze_queries`. Offsets are independent Gaussians per coordinate.
pub fn replicate_and_jitter<R: Rng + ?Sized>(
    gaze_only: &[BoundingBox],
    p: &JitterParams,
    rng: &mut R,
) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity((gaze_only.len() * p.k).min(p.max_gaze_queries));
    'outer: for b in gaze_only {
        for _ in 0..p.k {
            if out.len() == p.max_gaze_queries {
                break 'outer;
            }
            let mut draw = |sigma: f64| sigma * rng.sample::<f64, _>(StandardNormal);
            let dx = draw(p.sigma_x);
            let dy = draw(p.sigma_y);
            let dw = draw(p.sigma_w);
            let dh = draw(p.sigma_h);
            out.push(BoundingBox::clamped(b.cx() + dx, b.cy() + dy, b.w() + dw, b.h() + dh).clipped());
        }
    }
    out
}

/// Content vectors for `n_gaze` gaze queries: every one is the candida row of
/// the label embedding table.
pub fn flip_class_content<T: Real>(n_gaze: usize, label_embeddings: &Tensor<T>) -> Tensor<T> {
    let row = label_embeddings.row(Class::Candida.index());
    let mut out = Tensor::zeros(n_gaze, label_embeddings.cols);
    for r in 0..n_gaze {
        out.row_mut(r).copy_from_slice(row);
    }
    out
}

/// Learnable queries may not attend to gaze queries; every other pair is open.
pub fn build_attention_mask(origins: &[QueryOrigin]) -> Vec<bool> {
    let q = origins.len();
    let mut mask = vec![false; q * q];
    for (i, oi) in origins.iter().enumerate() {
        if *oi != QueryOrigin::Learnable {
            continue;
        }
        for (j, oj) in origins.iter().enumerate() {
            if *oj == QueryOrigin::Gaze {
                mask[i * q + j] = true;
            }
        }
    }
    mask
}

/// All gaze queries first, then the `budget - #gaze` highest-scoring
/// learnable proposals in score order.
pub fn select_queries(learnable: &[Proposal], gaze: &[BoundingBox], budget: usize) -> Result<QueryPlan> {
    if gaze.len() >= budget {
        return Err(Error::config(format!(
            "{} gaze queries leave no room in a budget of {budget}",
            gaze.len()
        )));
    }
    let need = budget - gaze.len();
    if learnable.len() < need {
        return Err(Error::config(format!(
            "{} learnable proposals cannot fill {need} query slots",
            learnable.len()
        )));
    }
    let mut order: Vec<usize> = (0..learnable.len()).collect();
    order.sort_by(|&a, &b| learnable[b].score.total_cmp(&learnable[a].score).then(a.cmp(&b)));
    order.truncate(need);

    let mut anchors = Vec::with_capacity(budget);
    let mut sources = Vec::with_capacity(budget);
    let mut origins = Vec::with_capacity(budget);
    for g in gaze {
        anchors.push(*g);
        sources.push(ContentSource::Label(Class::Candida));
        origins.push(QueryOrigin::Gaze);
    }
    for i in order {
        anchors.push(learnable[i].anchor);
        sources.push(ContentSource::Proposal(i));
        origins.push(QueryOrigin::Learnable);
    }
    let mask = build_attention_mask(&origins);
    Ok(QueryPlan {
        anchors,
        sources,
        origins,
        mask,
    })
}
