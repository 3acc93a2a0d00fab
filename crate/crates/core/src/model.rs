//! A small anchor-query detection transformer.
//!
//! Pipeline: three convolutional blocks (stride 8 overall) → token projection
//! with 2-D sinusoidal positions → transformer encoder → proposal heads that
//! rank memory tokens and seed learnable queries → decoder that refines the
//! anchor boxes layer by layer → shared class and box heads.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::GrayImage;
use crate::labels::{Class, NUM_CLASSES};
use crate::rectification::{select_queries, ContentSource, Proposal, QueryOrigin, QueryPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_learnable_queries: usize,
    pub query_budget: usize,
    pub feature_stride: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_learnable_queries: 64,
            query_budget: 64,
            feature_stride: 8,
            n_classes: NUM_CLASSES,
        }
    }
}

/// Side of the square prior box attached to every memory token.
const TOKEN_PRIOR_SIDE: f64 = 0.2;
const ANCHOR_EPS: f64 = 1e-4;
/// Highest positional frequency, in cycles per image side.
const MAX_CYCLES: f64 = 16.0;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::config("d_model must be a positive multiple of 4"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model must be divisible by n_heads"));
        }
        if self.n_decoder_layers == 0 {
            return Err(Error::config("at least one decoder layer is required"));
        }
        if self.query_budget == 0 {
            return Err(Error::config("query_budget must be at least 1"));
        }
        if self.n_learnable_queries < self.query_budget {
            return Err(Error::config(format!(
                "n_learnable_queries ({}) cannot fill a query budget of {}",
                self.n_learnable_queries, self.query_budget
            )));
        }
        if self.feature_stride != 8 {
            return Err(Error::config("the backbone has a fixed stride of 8"));
        }
        if self.n_classes != NUM_CLASSES {
            return Err(Error::config("the class vocabulary is {candida, gaze_only, no_object}"));
        }
        Ok(())
    }

    fn backbone_channels(&self) -> [usize; 3] {
        let d = self.d_model;
        [(d / 8).max(1), (d / 4).max(1), (d / 2).max(1)]
    }

    fn ffn_dim(&self) -> usize {
        2 * self.d_model
    }

    pub fn check_image(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let s = self.feature_stride;
        if width % s != 0 || height % s != 0 {
            return Err(Error::input(format!(
                "image {width}x{height} is not divisible by the feature stride {s}"
            )));
        }
        let tokens = (width / s) * (height / s);
        if tokens < self.n_learnable_queries {
            return Err(Error::config(format!(
                "{tokens} memory tokens cannot supply {} learnable queries",
                self.n_learnable_queries
            )));
        }
        Ok((height / s, width / s))
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attn,
    ln1: Norm,
    ff1: Lin,
    ff2: Lin,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attn,
    ln1: Norm,
    cross_attn: Attn,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
    ln3: Norm,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvLayer>,
    input_proj: Lin,
    encoder: Vec<EncoderLayer>,
    enc_class: Lin,
    enc_box: Vec<Lin>,
    label_embed: usize,
    query_pos: Vec<Lin>,
    decoder: Vec<DecoderLayer>,
    class_head: Lin,
    box_head: Vec<Lin>,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.store.add(name, Tensor::from_vec(rows, cols, vec![T::of(v); rows * cols]))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Lin {
        let bound = (6.0 / (i + o) as f64).sqrt();
        Lin {
            w: self.uniform(format!("{name}.weight"), i, o, bound),
            b: self.filled(format!("{name}.bias"), 1, o, 0.0),
        }
    }

    fn zero_linear(&mut self, name: &str, i: usize, o: usize) -> Lin {
        Lin {
            w: self.filled(format!("{name}.weight"), i, o, 0.0),
            b: self.filled(format!("{name}.bias"), 1, o, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.filled(format!("{name}.gamma"), 1, d, 1.0),
            b: self.filled(format!("{name}.beta"), 1, d, 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> ConvLayer {
        let fan_in = in_c * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        ConvLayer {
            w: self.uniform(format!("{name}.weight"), out_c, fan_in, bound),
            b: self.filled(format!("{name}.bias"), out_c, 1, 0.0),
            in_c,
            out_c,
            stride,
        }
    }

    /// MLP whose final layer starts at zero, so it initially predicts no
    /// offset from the anchor it refines.
    fn offset_mlp(&mut self, name: &str, d: usize, hidden_layers: usize) -> Vec<Lin> {
        let mut layers: Vec<Lin> = (0..hidden_layers).map(|i| self.linear(&format!("{name}.{i}"), d, d)).collect();
        layers.push(self.zero_linear(&format!("{name}.{hidden_layers}"), d, 4));
        layers
    }
}

fn build_layout<T: Real>(cfg: &ModelConfig, seed: u64) -> (ParamStore<T>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let d = cfg.d_model;
    let ch = cfg.backbone_channels();
    let mut convs = Vec::new();
    let mut in_c = 1;
    for (i, &c) in ch.iter().enumerate() {
        convs.push(b.conv(&format!("backbone.{i}.down"), in_c, c, 2));
        convs.push(b.conv(&format!("backbone.{i}.conv"), c, c, 1));
        in_c = c;
    }
    let input_proj = b.linear("input_proj", ch[2], d);
    let encoder = (0..cfg.n_encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayer {
                attn: b.attn(&format!("{p}.attn"), d),
                ln1: b.norm(&format!("{p}.norm1"), d),
                ff1: b.linear(&format!("{p}.ffn1"), d, cfg.ffn_dim()),
                ff2: b.linear(&format!("{p}.ffn2"), cfg.ffn_dim(), d),
                ln2: b.norm(&format!("{p}.norm2"), d),
            }
        })
        .collect();
    let enc_class = b.linear("proposal.class", d, NUM_CLASSES);
    let enc_box = b.offset_mlp("proposal.box", d, 1);
    let label_embed = b.uniform("label_embed".into(), NUM_CLASSES, d, 1.0);
    let query_pos = vec![b.linear("query_pos.0", 2 * d, d), b.linear("query_pos.1", d, d)];
    let decoder = (0..cfg.n_decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayer {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln1: b.norm(&format!("{p}.norm1"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln2: b.norm(&format!("{p}.norm2"), d),
                ff1: b.linear(&format!("{p}.ffn1"), d, cfg.ffn_dim()),
                ff2: b.linear(&format!("{p}.ffn2"), cfg.ffn_dim(), d),
                ln3: b.norm(&format!("{p}.norm3"), d),
            }
        })
        .collect();
    let class_head = b.linear("head.class", d, NUM_CLASSES);
    let box_head = b.offset_mlp("head.box", d, 2);
    let store = b.store;
    (
        store,
        Layout {
            convs,
            input_proj,
            encoder,
            enc_class,
            enc_box,
            label_embed,
            query_pos,
            decoder,
            class_head,
            box_head,
        },
    )
}

/// Sine/cosine features of a normalized coordinate at `n_freq` geometrically
/// spaced frequencies between 1 and `MAX_CYCLES` cycles per unit.
fn sine_features(v: f64, n_freq: usize, out: &mut Vec<f64>) {
    for k in 0..n_freq {
        let cycles = if n_freq == 1 {
            1.0
        } else {
            MAX_CYCLES.powf(k as f64 / (n_freq - 1) as f64)
        };
        let phase = 2.0 * PI * cycles * v;
        out.push(phase.sin());
        out.push(phase.cos());
    }
}

/// 2-D positional encoding of a `gh x gw` token grid, `[gh * gw, d]`: the
/// first half encodes the row center, the second half the column center.
pub fn grid_positions(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            sine_features((y as f64 + 0.5) / gh as f64, d / 4, &mut out);
            sine_features((x as f64 + 0.5) / gw as f64, d / 4, &mut out);
        }
    }
    out
}

/// Sinusoidal embedding of `(cx, cy, w, h)` anchors, `[n, 2d]`.
fn anchor_embedding(anchors: &[[f64; 4]], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(anchors.len() * 2 * d);
    for a in anchors {
        for &v in a {
            sine_features(v, d / 4, &mut out);
        }
    }
    out
}

fn inverse_sigmoid(v: f64) -> f64 {
    let v = v.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
    (v / (1.0 - v)).ln()
}

/// Image pixels as a `[1, H * W]` tensor, roughly zero-mean and unit-scale.
pub fn image_tensor<T: Real>(image: &GrayImage) -> Tensor<T> {
    let data = image.pixels().iter().map(|&p| T::of((p as f64 / 255.0 - 0.5) / 0.25)).collect();
    Tensor::from_vec(1, image.width() * image.height(), data)
}

/// Backbone and encoder outputs for one image.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Projected backbone tokens before positions and attention, `[N, d]`.
    pub features: Var,
    /// Encoder output, `[N, d]`.
    pub memory: Var,
    pub positions: Tensor<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Encoder-side query proposals, sorted by importance (nonincreasing).
#[derive(Debug, Clone)]
pub struct Proposals {
    pub token_index: Vec<usize>,
    pub proposals: Vec<Proposal>,
    /// Proposal-head logits of the selected tokens, `[P, 3]`.
    pub logits: Var,
    /// Proposal boxes of the selected tokens, `[P, 4]`.
    pub boxes: Var,
    /// The selected memory tokens themselves, `[P, d]`.
    pub contents: Var,
}

/// Decoder input: one anchor, content row, origin and mask row per query.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub anchors: Vec<BoundingBox>,
    pub contents: Var,
    pub origins: Vec<QueryOrigin>,
    pub mask: Vec<bool>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `[Q, 3]` class logits.
    pub logits: Var,
    /// `[Q, 4]` boxes in center format, each coordinate in (0, 1).
    pub boxes: Var,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Encoder proposals (learnable rows only), supervised as an extra layer.
    pub proposal: LayerOutput,
    pub layers: Vec<LayerOutput>,
    pub origins: Vec<QueryOrigin>,
}

/// The non-differentiable choices of one forward pass: which memory tokens
/// became proposals, the query plan, and the anchors each decoder layer saw.
/// Anchors carry no gradient, so with these fixed the loss is a smooth
/// function of the parameters (used for finite-difference checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub token_order: Vec<usize>,
    pub plan: QueryPlan,
    pub layer_anchors: Vec<Vec<[f64; 4]>>,
}

impl DetectorOutput {
    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("decoder has at least one layer")
    }
}

/// Plain values of one output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerValues {
    pub probs: Vec<[f64; NUM_CLASSES]>,
    pub boxes: Vec<BoundingBox>,
}

impl LayerValues {
    pub fn read<T: Real>(tape: &Tape<T>, layer: LayerOutput) -> Self {
        let logits = tape.value(layer.logits);
        let boxes = tape.value(layer.boxes);
        let probs = (0..logits.rows)
            .map(|r| {
                let z: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            })
            .collect();
        let boxes = (0..boxes.rows)
            .map(|r| {
                let b = boxes.row(r);
                BoundingBox::clamped(b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64())
            })
            .collect();
        Self { probs, boxes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Parameters bound to a tape for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: usize) -> Var {
        self.vars[id]
    }
}

#[derive(Debug, Clone)]
pub struct Detector<T = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Detector<T> {
    /// Freshly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, seed);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Records every parameter on the tape; `track` makes them trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = (0..self.params.len())
            .map(|id| {
                let v = self.params.get(id).clone();
                if track {
                    tape.param(id, v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Bound { vars }
    }

    fn lin(&self, tape: &mut Tape<T>, p: &Bound, l: Lin, x: Var) -> Var {
        tape.linear(x, p.get(l.w), Some(p.get(l.b)))
    }

    fn mlp(&self, tape: &mut Tape<T>, p: &Bound, layers: &[Lin], x: Var) -> Var {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = self.lin(tape, p, *l, h);
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    fn norm(&self, tape: &mut Tape<T>, p: &Bound, n: Norm, x: Var) -> Var {
        tape.layer_norm(x, p.get(n.g), p.get(n.b))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        a: Attn,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        mask: Option<&[bool]>,
    ) -> Var {
        let q = self.lin(tape, p, a.q, query_in);
        let k = self.lin(tape, p, a.k, key_in);
        let v = self.lin(tape, p, a.v, value_in);
        let o = tape.attention(q, k, v, self.config.n_heads, mask);
        self.lin(tape, p, a.o, o)
    }

    /// Backbone, token projection and transformer encoder.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, image: &GrayImage) -> Result<Encoded> {
        let (gh, gw) = self.config.check_image(image.width(), image.height())?;
        let (mut h, mut w) = (image.height(), image.width());
        let mut x = tape.constant(image_tensor(image));
        for c in &self.layout.convs {
            let geom = ConvGeom {
                in_channels: c.in_c,
                in_h: h,
                in_w: w,
                out_channels: c.out_c,
                kernel: 3,
                stride: c.stride,
                pad: 1,
            };
            x = tape.conv2d(x, p.get(c.w), p.get(c.b), geom);
            x = tape.relu(x);
            h = geom.out_h();
            w = geom.out_w();
        }
        debug_assert_eq!((h, w), (gh, gw));
        let tokens = tape.transpose(x);
        let features = self.lin(tape, p, self.layout.input_proj, tokens);

        let d = self.config.d_model;
        let positions = Tensor::from_vec(gh * gw, d, grid_positions(gh, gw, d));
        let pos_t: Tensor<T> = positions.cast();
        let mut x = features;
        for layer in &self.layout.encoder {
            let qk = tape.add_const(x, &pos_t);
            let a = self.attend(tape, p, layer.attn, qk, qk, x, None);
            let s = tape.add(x, a);
            x = self.norm(tape, p, layer.ln1, s);
            let f = self.lin(tape, p, layer.ff1, x);
            let f = tape.relu(f);
            let f = self.lin(tape, p, layer.ff2, f);
            let s = tape.add(x, f);
            x = self.norm(tape, p, layer.ln2, s);
        }
        Ok(Encoded {
            features,
            memory: x,
            positions,
            grid_h: gh,
            grid_w: gw,
        })
    }

    /// Scores every memory token, keeps the top `n_learnable_queries`, and
    /// proposes an anchor (box head on the token) and content (the token).
    /// Importance is the larger of the two object-class logits.
    pub fn init_learnable_queries(&self, tape: &mut Tape<T>, p: &Bound, enc: &Encoded) -> Result<Proposals> {
        self.proposals_from(tape, p, enc, None)
    }

    fn proposals_from(&self, tape: &mut Tape<T>, p: &Bound, enc: &Encoded, order: Option<&[usize]>) -> Result<Proposals> {
        let n_tokens = enc.grid_h * enc.grid_w;
        let n = self.config.n_learnable_queries;
        if n_tokens < n {
            return Err(Error::config(format!(
                "{n_tokens} memory tokens cannot supply {n} learnable queries"
            )));
        }
        let logits = self.lin(tape, p, self.layout.enc_class, enc.memory);
        let delta = self.mlp(tape, p, &self.layout.enc_box, enc.memory);
        let mut prior = Vec::with_capacity(n_tokens * 4);
        for y in 0..enc.grid_h {
            for x in 0..enc.grid_w {
                prior.extend([
                    inverse_sigmoid((x as f64 + 0.5) / enc.grid_w as f64),
                    inverse_sigmoid((y as f64 + 0.5) / enc.grid_h as f64),
                    inverse_sigmoid(TOKEN_PRIOR_SIDE),
                    inverse_sigmoid(TOKEN_PRIOR_SIDE),
                ]);
            }
        }
        let unsquashed = tape.add_const(delta, &Tensor::from_f64(n_tokens, 4, &prior));
        let boxes = tape.sigmoid(unsquashed);

        let lv = tape.value(logits);
        let scores: Vec<f64> = (0..n_tokens)
            .map(|r| {
                let row = lv.row(r);
                row[Class::Candida.index()].max(row[Class::GazeOnly.index()]).as_f64()
            })
            .collect();
        let order = match order {
            Some(o) => o.to_vec(),
            None => {
                let mut o: Vec<usize> = (0..n_tokens).collect();
                o.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                o.truncate(n);
                o
            }
        };

        let bv = tape.value(boxes);
        let proposals = order
            .iter()
            .map(|&i| {
                let r = bv.row(i);
                Proposal {
                    anchor: BoundingBox::clamped(r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()),
                    score: scores[i],
                }
            })
            .collect();
        let sel_logits = tape.gather_rows(logits, &order);
        let sel_boxes = tape.gather_rows(boxes, &order);
        let contents = tape.gather_rows(enc.memory, &order);
        Ok(Proposals {
            token_index: order,
            proposals,
            logits: sel_logits,
            boxes: sel_boxes,
            contents,
        })
    }

    /// Materializes a query plan: learnable contents come from the proposal
    /// tokens, gaze contents from the label embedding table.
    pub fn build_queries(&self, tape: &mut Tape<T>, p: &Bound, plan: &QueryPlan, proposals: &Proposals) -> QuerySet {
        let mut label_rows = Vec::new();
        let mut proposal_rows = Vec::new();
        for s in &plan.sources {
            match s {
                ContentSource::Label(c) => label_rows.push(c.index()),
                ContentSource::Proposal(i) => proposal_rows.push(*i),
            }
        }
        // Plans always put label-sourced (gaze) queries first.
        debug_assert!(plan.sources[..label_rows.len()]
            .iter()
            .all(|s| matches!(s, ContentSource::Label(_))));
        let learn = tape.gather_rows(proposals.contents, &proposal_rows);
        let contents = if label_rows.is_empty() {
            learn
        } else {
            let gaze = tape.gather_rows(p.get(self.layout.label_embed), &label_rows);
            tape.concat_rows(gaze, learn)
        };
        QuerySet {
            anchors: plan.anchors.clone(),
            contents,
            origins: plan.origins.clone(),
            mask: plan.mask.clone(),
        }
    }

    /// Runs the decoder. Each layer self-attends under the query mask,
    /// cross-attends the memory, and refines the anchors additively in logit
    /// space; the refined boxes seed the next layer (without gradient).
    pub fn decode(&self, tape: &mut Tape<T>, p: &Bound, queries: &QuerySet, enc: &Encoded) -> Result<Vec<LayerOutput>> {
        Ok(self.decode_pinned(tape, p, queries, enc, None)?.0)
    }

    /// `decode`, optionally with the per-layer anchors replaced; also returns
    /// the anchors each layer actually used.
    fn decode_pinned(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        queries: &QuerySet,
        enc: &Encoded,
        pinned: Option<&[Vec<[f64; 4]>]>,
    ) -> Result<(Vec<LayerOutput>, Vec<Vec<[f64; 4]>>)> {
        let q = queries.len();
        if queries.mask.len() != q * q {
            return Err(Error::input(format!(
                "attention mask has {} entries, expected {}",
                queries.mask.len(),
                q * q
            )));
        }
        if queries.origins.len() != q || tape.value(queries.contents).rows != q {
            return Err(Error::input("query set fields disagree in length"));
        }
        let d = self.config.d_model;
        let pos_t: Tensor<T> = enc.positions.cast();
        let mem_keys = tape.add_const(enc.memory, &pos_t);
        let mut anchors: Vec<[f64; 4]> = queries.anchors.iter().map(BoundingBox::to_array).collect();
        let mut tgt = queries.contents;
        let mut outputs = Vec::with_capacity(self.layout.decoder.len());
        let mut used = Vec::with_capacity(self.layout.decoder.len());
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            if let Some(pin) = pinned {
                anchors = pin.get(l).cloned().ok_or_else(|| Error::input("replay has too few anchor layers"))?;
            }
            used.push(anchors.clone());
            let pe = tape.constant(Tensor::from_f64(q, 2 * d, &anchor_embedding(&anchors, d)));
            let qpos = self.mlp(tape, p, &self.layout.query_pos, pe);

            let qk = tape.add(tgt, qpos);
            let a = self.attend(tape, p, layer.self_attn, qk, qk, tgt, Some(&queries.mask));
            let s = tape.add(tgt, a);
            tgt = self.norm(tape, p, layer.ln1, s);

            let qc = tape.add(tgt, qpos);
            let a = self.attend(tape, p, layer.cross_attn, qc, mem_keys, enc.memory, None);
            let s = tape.add(tgt, a);
            tgt = self.norm(tape, p, layer.ln2, s);

            let f = self.lin(tape, p, layer.ff1, tgt);
            let f = tape.relu(f);
            let f = self.lin(tape, p, layer.ff2, f);
            let s = tape.add(tgt, f);
            tgt = self.norm(tape, p, layer.ln3, s);

            let logits = self.lin(tape, p, self.layout.class_head, tgt);
            let delta = self.mlp(tape, p, &self.layout.box_head, tgt);
            let prior: Vec<f64> = anchors.iter().flatten().map(|&v| inverse_sigmoid(v)).collect();
            let unsquashed = tape.add_const(delta, &Tensor::from_f64(q, 4, &prior));
            let boxes = tape.sigmoid(unsquashed);
            let bv = tape.value(boxes);
            anchors = (0..q)
                .map(|r| {
                    let row = bv.row(r);
                    [0, 1, 2, 3].map(|j| row[j].as_f64().clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS))
                })
                .collect();
            outputs.push(LayerOutput { logits, boxes });
        }
        Ok((outputs, used))
    }

    /// Full forward pass. `gaze_anchors` are already-jittered gaze queries; an
    /// empty slice is exactly the inference path.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &GrayImage,
        gaze_anchors: &[BoundingBox],
    ) -> Result<(DetectorOutput, QueryPlan)> {
        let (out, replay) = self.forward_replay(tape, p, image, gaze_anchors, None)?;
        Ok((out, replay.plan))
    }

    /// `forward` that also returns its discrete choices and, given a `Replay`,
    /// reuses them instead of choosing afresh.
    pub fn forward_replay(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &GrayImage,
        gaze_anchors: &[BoundingBox],
        replay: Option<&Replay>,
    ) -> Result<(DetectorOutput, Replay)> {
        let enc = self.encode(tape, p, image)?;
        let props = self.proposals_from(tape, p, &enc, replay.map(|r| r.token_order.as_slice()))?;
        let plan = match replay {
            Some(r) => r.plan.clone(),
            None => select_queries(&props.proposals, gaze_anchors, self.config.query_budget)?,
        };
        let queries = self.build_queries(tape, p, &plan, &props);
        let (layers, layer_anchors) =
            self.decode_pinned(tape, p, &queries, &enc, replay.map(|r| r.layer_anchors.as_slice()))?;
        let out = DetectorOutput {
            proposal: LayerOutput {
                logits: props.logits,
                boxes: props.boxes,
            },
            layers,
            origins: plan.origins.clone(),
        };
        let replay = Replay {
            token_order: props.token_index,
            plan,
            layer_anchors,
        };
        Ok((out, replay))
    }

    /// Candida detections from learnable queries only. Scores are the softmax
    /// candida probability; the gaze-only class counts as background.
    pub fn predict(&self, image: &GrayImage, conf_threshold: f64) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (out, plan) = self.forward(&mut tape, &p, image, &[])?;
        debug_assert_eq!(plan.gaze_count(), 0);
        let values = LayerValues::read(&tape, out.last());
        let mut dets: Vec<Detection> = values
            .probs
            .iter()
            .zip(&values.boxes)
            .map(|(pr, b)| Detection {
                bbox: *b,
                score: pr[Class::Candida.index()],
            })
            .filter(|d| d.score >= conf_threshold)
            .collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(dets)
    }

    /// Writes parameters as a little-endian `f32` blob preceded by a JSON
    /// index (`name -> dtype, shape, data_offsets`), safetensors-style.
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut index = BTreeMap::new();
        let mut data = Vec::with_capacity(self.params.numel() * 4);
        for (name, t) in self.params.iter() {
            let start = data.len();
            for v in &t.data {
                data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            index.insert(
                name.to_string(),
                TensorEntry {
                    dtype: "F32".into(),
                    shape: [t.rows, t.cols],
                    data_offsets: [start, data.len()],
                },
            );
        }
        let header = serde_json::to_vec(&index).map_err(|e| Error::file(path, e))?;
        let mut bytes = Vec::with_capacity(8 + header.len() + data.len());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);
        fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    /// Loads parameters written by [`Detector::save_params`] into a model of
    /// matching configuration.
    pub fn load_params(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::file(path, "truncated parameter file"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::file(path, "header length exceeds file size"))?;
        let index: BTreeMap<String, TensorEntry> =
            serde_json::from_slice(&bytes[8..body_start]).map_err(|e| Error::file(path, format!("bad index: {e}")))?;
        let body = &bytes[body_start..];
        if index.len() != model.params.len() {
            return Err(Error::file(
                path,
                format!("{} tensors stored, model expects {}", index.len(), model.params.len()),
            ));
        }
        for id in 0..model.params.len() {
            let name = model.params.name(id).to_string();
            let entry = index
                .get(&name)
                .ok_or_else(|| Error::file(path, format!("missing tensor {name}")))?;
            let t = model.params.get_mut(id);
            if entry.dtype != "F32" || entry.shape != [t.rows, t.cols] {
                return Err(Error::file(
                    path,
                    format!("tensor {name} has shape {:?}, model expects [{}, {}]", entry.shape, t.rows, t.cols),
                ));
            }
            let [s, e] = entry.data_offsets;
            if e > body.len() || s > e || e - s != t.len() * 4 {
                return Err(Error::file(path, format!("tensor {name} has bad data offsets")));
            }
            for (i, chunk) in body[s..e].chunks_exact(4).enumerate() {
                t.data[i] = T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: [usize; 2],
    data_offsets: [usize; 2],
}
