//! Graph foundation model at toy scale: omic/text fusion, internal and
//! global message passing, Bernoulli PPI edge masking, edge and degree
//! decoders, and a full-batch gradient-descent trainer.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{undirected_degrees, TextEmbeddings, TosgGraph};
use crate::matrix::Matrix;
use crate::nn::{
    finite_difference_check, sigmoid, Activation, AttentionCache, AttentionLayer, GradCheckEntry, GraphLayer, Linear,
    Mlp, OutEdges, SparseOp, Tensors,
};
use crate::rng::{self, SeededRng};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
pub const FULL_SCALE_MASK_RATIO: f64 = 1e-5;
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalDirection {
    /// Proteins read from their transcripts; transcripts keep a self-transform.
    #[default]
    Directed,
    /// Transcripts also read from the proteins they feed.
    Undirected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_prime: usize,
    pub d: usize,
    pub mask_ratio: f64,
    pub lambda_edge: f64,
    pub lambda_deg: f64,
    pub neg_ratio: f64,
    pub layers_internal: usize,
    pub layers_global: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden widths of both decoders; empty means a single linear map.
    pub decoder_hidden: Vec<usize>,
    pub internal_direction: InternalDirection,
    pub activation: Activation,
    pub resample_negatives: bool,
    /// Run the finite-difference check on a micro-instance before training.
    pub check_gradients: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_prime: 16,
            d: 16,
            mask_ratio: 0.1,
            lambda_edge: 1.0,
            lambda_deg: 1.0,
            neg_ratio: 1.0,
            layers_internal: 1,
            layers_global: 2,
            learning_rate: 0.05,
            epochs: 100,
            seed: 0,
            decoder_hidden: Vec::new(),
            internal_direction: InternalDirection::Directed,
            activation: Activation::Tanh,
            resample_negatives: true,
            check_gradients: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.decoder_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.lambda_edge > 0.0 && self.lambda_deg > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.neg_ratio >= 0.0 && self.neg_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "neg_ratio must be non-negative, got {}",
                self.neg_ratio
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Widths and switches that fix an encoder's parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub omic_in: usize,
    pub text_dim: usize,
    pub d_prime: usize,
    pub d: usize,
    pub layers_internal: usize,
    pub layers_global: usize,
    pub pre_mlp: bool,
    pub attention: bool,
    pub activation: Activation,
}

/// Bi-encoder fusion followed by internal and global propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub omic: Linear,
    pub fusion: Linear,
    pub internal: Vec<GraphLayer>,
    pub pre_mlp: Option<Linear>,
    pub global: Vec<GraphLayer>,
    pub attention: Option<AttentionLayer>,
    pub activation: Activation,
}

impl Encoder {
    pub fn new(s: &EncoderShape, rng: &mut SeededRng) -> Self {
        let omic = Linear::new(s.omic_in, s.d_prime, rng);
        let fusion = Linear::new(s.d_prime + 3 * s.text_dim, s.d_prime, rng);
        let internal = (0..s.layers_internal)
            .map(|_| GraphLayer::new(s.d_prime, s.d_prime, rng))
            .collect();
        let pre_mlp = s.pre_mlp.then(|| Linear::new(s.d_prime, s.d, rng));
        let mut width = if s.pre_mlp { s.d } else { s.d_prime };
        let mut global = Vec::with_capacity(s.layers_global);
        for _ in 0..s.layers_global {
            global.push(GraphLayer::new(width, s.d, rng));
            width = s.d;
        }
        let attention = s.attention.then(|| AttentionLayer::new(width, s.d, rng));
        Encoder {
            omic,
            fusion,
            internal,
            pre_mlp,
            global,
            attention,
            activation: s.activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        if let Some(a) = &self.attention {
            a.w_self.cols()
        } else if let Some(l) = self.global.last() {
            l.w_self.cols()
        } else if let Some(p) = &self.pre_mlp {
            p.output_dim()
        } else {
            self.fusion.output_dim()
        }
    }

    /// Omic path pre-activation `x·W_o + b_o`.
    pub fn omic_preactivation(&self, x: &Matrix) -> Matrix {
        self.omic.forward(x)
    }

    pub fn forward(&self, x: &Matrix, ctx: &GraphContext) -> EncoderTrace {
        let act = self.activation;
        let omic_out = act.apply(self.omic.forward(x));
        let fusion_in = omic_out.hcat(&ctx.text);
        let fused = act.apply(self.fusion.forward(&fusion_in));
        let mut internal = Vec::with_capacity(self.internal.len());
        let mut h = fused.clone();
        for layer in &self.internal {
            h = act.apply(layer.forward(&h, &ctx.internal_op));
            internal.push(h.clone());
        }
        let pre = self.pre_mlp.as_ref().map(|p| {
            h = act.apply(p.forward(&h));
            h.clone()
        });
        let mut global = Vec::with_capacity(self.global.len());
        for layer in &self.global {
            h = act.apply(layer.forward(&h, &ctx.global_op));
            global.push(h.clone());
        }
        let attention = self.attention.as_ref().map(|a| {
            let (z, cache) = a.forward(&h, &ctx.attention_graph);
            h = act.apply(z);
            (h.clone(), cache)
        });
        EncoderTrace {
            x: x.clone(),
            omic_out,
            fusion_in,
            fused,
            internal,
            pre,
            global,
            attention,
        }
    }

    pub fn backward(&self, t: &EncoderTrace, ctx: &GraphContext, d_out: &Matrix, grad: &mut Encoder) {
        let act = self.activation;
        let mut d = d_out.clone();

        if let (Some(a), Some((out, cache))) = (&self.attention, &t.attention) {
            let dz = act.backward(out, &d);
            let input = t.before_attention();
            d = a.backward(
                input,
                &ctx.attention_graph,
                cache,
                &dz,
                grad.attention.as_mut().expect("shape"),
            );
        }
        for (l, layer) in self.global.iter().enumerate().rev() {
            let dz = act.backward(&t.global[l], &d);
            let input = if l == 0 { t.before_global() } else { &t.global[l - 1] };
            d = layer.backward(input, &ctx.global_op, &dz, &mut grad.global[l]);
        }
        if let (Some(p), Some(out)) = (&self.pre_mlp, &t.pre) {
            let dz = act.backward(out, &d);
            d = p.backward(
                t.internal.last().unwrap_or(&t.fused),
                &dz,
                grad.pre_mlp.as_mut().expect("shape"),
            );
        }
        for (l, layer) in self.internal.iter().enumerate().rev() {
            let dz = act.backward(&t.internal[l], &d);
            let input = if l == 0 { &t.fused } else { &t.internal[l - 1] };
            d = layer.backward(input, &ctx.internal_op, &dz, &mut grad.internal[l]);
        }
        let dz = act.backward(&t.fused, &d);
        let d_in = self.fusion.backward(&t.fusion_in, &dz, &mut grad.fusion);
        let omic_cols: Vec<usize> = (0..t.omic_out.cols()).collect();
        let d_omic = d_in.select_cols(&omic_cols);
        let dz = act.backward(&t.omic_out, &d_omic);
        self.omic.backward(&t.x, &dz, &mut grad.omic);
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        fn push<'a>(out: &mut Vec<(String, &'a Matrix)>, name: String, ts: Vec<&'a Matrix>, fields: &[&str]) {
            for (t, f) in ts.into_iter().zip(fields) {
                out.push((format!("{name}.{f}"), t));
            }
        }
        let lin = ["w", "b"];
        let gl = ["w_self", "w_nbr", "b"];
        let mut out = Vec::new();
        push(&mut out, format!("{prefix}omic"), self.omic.tensors(), &lin);
        push(&mut out, format!("{prefix}fusion"), self.fusion.tensors(), &lin);
        for (i, l) in self.internal.iter().enumerate() {
            push(&mut out, format!("{prefix}internal{i}"), l.tensors(), &gl);
        }
        if let Some(p) = &self.pre_mlp {
            push(&mut out, format!("{prefix}pre_mlp"), p.tensors(), &lin);
        }
        for (i, l) in self.global.iter().enumerate() {
            push(&mut out, format!("{prefix}global{i}"), l.tensors(), &gl);
        }
        if let Some(a) = &self.attention {
            push(
                &mut out,
                format!("{prefix}attention"),
                a.tensors(),
                &["w_q", "w_k", "w_self", "w_nbr", "b"],
            );
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.omic.tensors_mut();
        out.extend(self.fusion.tensors_mut());
        for l in &mut self.internal {
            out.extend(l.tensors_mut());
        }
        if let Some(p) = &mut self.pre_mlp {
            out.extend(p.tensors_mut());
        }
        for l in &mut self.global {
            out.extend(l.tensors_mut());
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut());
        }
        out
    }
}

/// Intermediate states of one encoder pass.
pub struct EncoderTrace {
    pub x: Matrix,
    pub omic_out: Matrix,
    pub fusion_in: Matrix,
    /// Fused `H'`.
    pub fused: Matrix,
    /// Output of each internal layer; the last one is `H^(in)`.
    pub internal: Vec<Matrix>,
    pub pre: Option<Matrix>,
    pub global: Vec<Matrix>,
    pub attention: Option<(Matrix, AttentionCache)>,
}

impl EncoderTrace {
    pub fn internal_output(&self) -> &Matrix {
        self.internal.last().unwrap_or(&self.fused)
    }

    fn before_global(&self) -> &Matrix {
        self.pre.as_ref().unwrap_or_else(|| self.internal_output())
    }

    /// Representation entering the attention layer.
    pub fn before_attention(&self) -> &Matrix {
        self.global.last().unwrap_or_else(|| self.before_global())
    }

    pub fn output(&self) -> &Matrix {
        match &self.attention {
            Some((out, _)) => out,
            None => self.before_attention(),
        }
    }
}

/// Fixed graph operators and text features shared by all samples.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub num_entities: usize,
    pub internal_op: SparseOp,
    pub global_op: SparseOp,
    pub attention_graph: OutEdges,
    /// `[S^γ ‖ S^θ ‖ S^ρ]`, `M × 3·text_dim`.
    pub text: Matrix,
}

impl GraphContext {
    /// `visible` are the PPI pairs allowed to carry global messages.
    pub fn new(
        graph: &TosgGraph,
        text: &TextEmbeddings,
        visible: &[(usize, usize)],
        direction: InternalDirection,
    ) -> Result<Self> {
        let m = graph.num_entities();
        if text.num_entities() != m {
            return Err(Error::Shape(format!(
                "text embeddings cover {} entities, graph has {m}",
                text.num_entities()
            )));
        }
        let [a, b, c] = text.fields();
        Ok(GraphContext {
            num_entities: m,
            internal_op: SparseOp::neighbour_mean(m, &graph.edges.internal, direction == InternalDirection::Undirected),
            global_op: SparseOp::sym_normalized(m, visible),
            attention_graph: OutEdges::new(m, &graph.edges.ppi),
            text: a.hcat(b).hcat(c),
        })
    }

    pub fn text_dim(&self) -> usize {
        self.text.cols() / 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub edge_decoder: Mlp,
    pub degree_decoder: Mlp,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, text_dim: usize) -> Self {
        let mut rng = rng::derive(cfg.seed, 1);
        let encoder = Encoder::new(&pretrain_shape(cfg, text_dim), &mut rng);
        let dims = |cfg: &ModelConfig| {
            let mut v = vec![cfg.d];
            v.extend(&cfg.decoder_hidden);
            v.push(1);
            v
        };
        let edge_decoder = Mlp::new(&dims(cfg), &mut rng);
        let degree_decoder = Mlp::new(&dims(cfg), &mut rng);
        ModelParams {
            encoder,
            edge_decoder,
            degree_decoder,
        }
    }
}

impl Tensors for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.named_tensors("encoder.");
        for (k, t) in self.edge_decoder.tensors().into_iter().enumerate() {
            out.push((format!("edge_decoder.{}.{}", k / 2, ["w", "b"][k % 2]), t));
        }
        for (k, t) in self.degree_decoder.tensors().into_iter().enumerate() {
            out.push((format!("degree_decoder.{}.{}", k / 2, ["w", "b"][k % 2]), t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.edge_decoder.tensors_mut());
        out.extend(self.degree_decoder.tensors_mut());
        out
    }
}

pub fn pretrain_shape(cfg: &ModelConfig, text_dim: usize) -> EncoderShape {
    EncoderShape {
        omic_in: 1,
        text_dim,
        d_prime: cfg.d_prime,
        d: cfg.d,
        layers_internal: cfg.layers_internal,
        layers_global: cfg.layers_global,
        pre_mlp: true,
        attention: false,
        activation: cfg.activation,
    }
}

/// One sample's per-entity omic values as an `M × 1` column.
pub fn sample_column(features: &Matrix, n: usize) -> Matrix {
    Matrix::from_vec(features.cols(), 1, features.row(n).to_vec()).expect("column shape")
}

fn unordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Distinct undirected pairs of a directed edge list, sorted.
pub fn undirected_pairs(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| unordered(a, b)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Uniform sampler over unordered protein pairs absent from the PPI graph.
#[derive(Debug, Clone)]
pub struct NonEdgeSampler {
    first: usize,
    count: usize,
    edges: HashSet<(usize, usize)>,
    /// Explicit list, used when non-edges are too sparse for rejection.
    listed: Option<Vec<(usize, usize)>>,
}

impl NonEdgeSampler {
    /// Proteins occupy entity ids `first..first + count`.
    pub fn new(first: usize, count: usize, ppi: &[(usize, usize)]) -> Self {
        let edges: HashSet<(usize, usize)> = undirected_pairs(ppi).into_iter().collect();
        let total = count * count.saturating_sub(1) / 2;
        let free = total - edges.len();
        let listed = (free * 4 < total).then(|| {
            let mut v = Vec::with_capacity(free);
            for a in first..first + count {
                for b in a + 1..first + count {
                    if !edges.contains(&(a, b)) {
                        v.push((a, b));
                    }
                }
            }
            v
        });
        NonEdgeSampler {
            first,
            count,
            edges,
            listed,
        }
    }

    pub fn available(&self) -> usize {
        self.count * self.count.saturating_sub(1) / 2 - self.edges.len()
    }

    /// `n` pairs drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<(usize, usize)>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.available() == 0 {
            return Err(Error::Graph(
                "the PPI graph has no non-edges to sample negatives from".into(),
            ));
        }
        if let Some(list) = &self.listed {
            return Ok((0..n).map(|_| list[rng::index(rng, list.len())]).collect());
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let a = self.first + rng::index(rng, self.count);
            let b = self.first + rng::index(rng, self.count);
            if a == b {
                continue;
            }
            let p = unordered(a, b);
            if !self.edges.contains(&p) {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Masked/visible partition of the PPI graph plus sampled negatives. Pairs
/// are unordered; masking a pair hides both stored directions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<(usize, usize)>,
    pub visible: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Masks each undirected PPI pair independently with probability `p` and
/// draws `round(neg_ratio · |visible|)` negatives.
pub fn sample_mask(graph: &TosgGraph, p: f64, neg_ratio: f64, seed: u64) -> Result<(MaskPlan, NonEdgeSampler)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {p}")));
    }
    if graph.edges.ppi.is_empty() {
        return Err(Error::Graph("cannot mask a graph with no PPI edges".into()));
    }
    let mut rng = rng::derive(seed, 2);
    let mut plan = MaskPlan::default();
    for pair in undirected_pairs(&graph.edges.ppi) {
        if rng.gen::<f64>() < p {
            plan.masked.push(pair);
        } else {
            plan.visible.push(pair);
        }
    }
    let sampler = NonEdgeSampler::new(
        graph.entities.num_transcripts(),
        graph.entities.num_proteins(),
        &graph.edges.ppi,
    );
    let n_neg = (neg_ratio * plan.visible.len() as f64).round() as usize;
    plan.negatives = sampler.sample(n_neg, &mut rng)?;
    Ok((plan, sampler))
}

/// `σ(MLP_ω(h_i ⊙ h_j))`.
pub fn edge_logit(h_i: &[f64], h_j: &[f64], decoder: &Mlp) -> f64 {
    let prod: Vec<f64> = h_i.iter().zip(h_j).map(|(a, b)| a * b).collect();
    let x = Matrix::from_vec(1, prod.len(), prod).expect("row");
    let out = decoder.forward(&x);
    sigmoid(out.last().expect("output").get(0, 0))
}

fn pair_products(h: &Matrix, pairs: &[(usize, usize)]) -> Matrix {
    Matrix::from_fn(pairs.len(), h.cols(), |r, c| {
        let (i, j) = pairs[r];
        h.get(i, c) * h.get(j, c)
    })
}

/// Edge probabilities for a list of pairs on one embedding matrix.
pub fn edge_probabilities(h: &Matrix, pairs: &[(usize, usize)], decoder: &Mlp) -> Vec<f64> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let acts = decoder.forward(&pair_products(h, pairs));
    acts.last()
        .expect("output")
        .column(0)
        .into_iter()
        .map(sigmoid)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub edge: f64,
    pub deg: f64,
}

/// Targets for the degree decoder: entity ids and their full-graph degree.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeTargets {
    pub nodes: Vec<usize>,
    pub degrees: Vec<f64>,
}

impl DegreeTargets {
    /// Every protein with its distinct-neighbour count in the full PPI graph.
    pub fn from_graph(graph: &TosgGraph) -> Self {
        let all = undirected_degrees(graph.num_entities(), &graph.edges.ppi);
        let nodes: Vec<usize> = (graph.entities.num_transcripts()..graph.num_entities()).collect();
        let degrees = nodes.iter().map(|&i| all[i]).collect();
        DegreeTargets { nodes, degrees }
    }
}

fn clamp_prob(u: f64) -> f64 {
    u.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Loss of one embedding matrix `H`; optionally returns `∂L/∂H` and
/// accumulates decoder gradients.
pub fn decoder_loss(
    h: &Matrix,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    targets: &DegreeTargets,
    params: &ModelParams,
    cfg: &ModelConfig,
    grad: Option<&mut ModelParams>,
) -> (LossParts, Option<Matrix>) {
    let pairs: Vec<(usize, usize)> = positives.iter().chain(negatives).copied().collect();
    let products = pair_products(h, &pairs);
    let acts = params.edge_decoder.forward(&products);
    let logits = acts.last().expect("output");
    let (np, nn) = (positives.len(), negatives.len());
    let mut l_pos = 0.0;
    let mut l_neg = 0.0;
    let mut d_logit = Matrix::zeros(pairs.len(), 1);
    for r in 0..pairs.len() {
        let u = sigmoid(logits.get(r, 0));
        let uc = clamp_prob(u);
        let clamped = uc != u;
        if r < np {
            l_pos += uc.ln() / np as f64;
            if !clamped {
                d_logit.set(r, 0, -(1.0 - u) / np as f64 * cfg.lambda_edge);
            }
        } else {
            l_neg += (1.0 - uc).ln() / nn as f64;
            if !clamped {
                d_logit.set(r, 0, u / nn as f64 * cfg.lambda_edge);
            }
        }
    }
    let l_edge = -(l_pos + l_neg);

    let hv = h.select_rows(&targets.nodes);
    let dacts = params.degree_decoder.forward(&hv);
    let preds = dacts.last().expect("output");
    let nv = targets.nodes.len().max(1) as f64;
    let mut l_deg = 0.0;
    let mut d_pred = Matrix::zeros(targets.nodes.len(), 1);
    for (r, &deg) in targets.degrees.iter().enumerate() {
        let e = preds.get(r, 0) - deg;
        l_deg += e * e / nv;
        d_pred.set(r, 0, 2.0 * e / nv * cfg.lambda_deg);
    }
    let parts = LossParts {
        total: cfg.lambda_edge * l_edge + cfg.lambda_deg * l_deg,
        edge: l_edge,
        deg: l_deg,
    };
    let Some(grad) = grad else {
        return (parts, None);
    };

    let mut dh = Matrix::zeros(h.rows(), h.cols());
    if !pairs.is_empty() {
        let d_prod = params.edge_decoder.backward(&acts, &d_logit, &mut grad.edge_decoder);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let (hi, hj) = (h.row(i).to_vec(), h.row(j).to_vec());
            let g = d_prod.row(r).to_vec();
            for c in 0..h.cols() {
                dh.row_mut(i)[c] += g[c] * hj[c];
                dh.row_mut(j)[c] += g[c] * hi[c];
            }
        }
    }
    if !targets.nodes.is_empty() {
        let d_hv = params
            .degree_decoder
            .backward(&dacts, &d_pred, &mut grad.degree_decoder);
        for (r, &i) in targets.nodes.iter().enumerate() {
            for (o, g) in dh.row_mut(i).iter_mut().zip(d_hv.row(r)) {
                *o += g;
            }
        }
    }
    (parts, Some(dh))
}

/// Everything the objective needs besides parameters.
pub struct Objective<'a> {
    pub ctx: &'a GraphContext,
    /// `N × M`, one row per sample.
    pub features: &'a Matrix,
    pub positives: &'a [(usize, usize)],
    pub negatives: &'a [(usize, usize)],
    pub targets: &'a DegreeTargets,
    pub cfg: &'a ModelConfig,
}

impl Objective<'_> {
    /// Sample-averaged loss, gradient and final embeddings per sample.
    pub fn evaluate(&self, params: &ModelParams, with_grad: bool) -> (LossParts, Option<ModelParams>, Vec<Matrix>) {
        let n = self.features.rows();
        let mut total = LossParts::default();
        let mut grad = with_grad.then(|| params.zeros_like());
        let mut outputs = Vec::with_capacity(n);
        for s in 0..n {
            let trace = params.encoder.forward(&sample_column(self.features, s), self.ctx);
            let h = trace.output();
            let (parts, dh) = decoder_loss(
                h,
                self.positives,
                self.negatives,
                self.targets,
                params,
                self.cfg,
                grad.as_mut(),
            );
            if let (Some(g), Some(dh)) = (grad.as_mut(), dh) {
                params.encoder.backward(&trace, self.ctx, &dh, &mut g.encoder);
            }
            total.total += parts.total / n as f64;
            total.edge += parts.edge / n as f64;
            total.deg += parts.deg / n as f64;
            outputs.push(h.clone());
        }
        if let Some(g) = grad.as_mut() {
            for t in g.tensors_mut() {
                t.scale(1.0 / n as f64);
            }
        }
        (total, grad, outputs)
    }

    pub fn loss(&self, params: &ModelParams) -> f64 {
        self.evaluate(params, false).0.total
    }
}

/// Rank-sum AUC with ties counted as one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub auc: f64,
    /// Share of masked pairs scored above 0.5.
    pub recovered_fraction: f64,
}

/// Scores masked pairs against negatives, averaging probabilities over
/// the per-sample embeddings.
pub fn evaluate_reconstruction(
    embeddings: &[Matrix],
    masked: &[(usize, usize)],
    negatives: &[(usize, usize)],
    decoder: &Mlp,
) -> Result<Reconstruction> {
    if masked.is_empty() {
        return Err(Error::Invalid("no masked edges to evaluate".into()));
    }
    if negatives.is_empty() || embeddings.is_empty() {
        return Err(Error::Invalid(
            "reconstruction needs negatives and at least one sample".into(),
        ));
    }
    let mean_scores = |pairs: &[(usize, usize)]| -> Vec<f64> {
        let mut acc = vec![0.0; pairs.len()];
        for h in embeddings {
            for (a, u) in acc.iter_mut().zip(edge_probabilities(h, pairs, decoder)) {
                *a += u / embeddings.len() as f64;
            }
        }
        acc
    };
    let pos = mean_scores(masked);
    let neg = mean_scores(negatives);
    Ok(Reconstruction {
        auc: auc(&pos, &neg).expect("non-empty"),
        recovered_fraction: pos.iter().filter(|&&u| u > 0.5).count() as f64 / pos.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_edge: f64,
    pub l_deg: f64,
    /// Masked-edge AUC before this epoch's update; NaN without masked edges.
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub plan: MaskPlan,
    /// Held-out evaluation after the last update.
    pub reconstruction: Option<Reconstruction>,
    pub grad_check: Vec<GradCheckEntry>,
}

/// Full-batch gradient descent on the sample-averaged pretraining loss.
pub fn train(graph: &TosgGraph, text: &TextEmbeddings, features: &Matrix, cfg: &ModelConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let m = graph.num_entities();
    if features.cols() != m {
        return Err(Error::Shape(format!(
            "features have {} columns, graph has {m} entities",
            features.cols()
        )));
    }
    if features.rows() == 0 {
        return Err(Error::Invalid("no samples to train on".into()));
    }
    if !features.is_finite() {
        return Err(Error::Invalid("features contain non-finite values".into()));
    }
    let grad_check = if cfg.check_gradients {
        let report = micro_gradient_check(cfg)?;
        if let Some(bad) = report
            .iter()
            .find(|e| e.relative_error.is_nan() || e.relative_error >= GRAD_CHECK_TOL)
        {
            return Err(Error::Invalid(format!(
                "gradient check failed on {} (relative error {:.3e})",
                bad.tensor, bad.relative_error
            )));
        }
        report
    } else {
        Vec::new()
    };

    let (mut plan, sampler) = sample_mask(graph, cfg.mask_ratio, cfg.neg_ratio, cfg.seed)?;
    let ctx = GraphContext::new(graph, text, &plan.visible, cfg.internal_direction)?;
    let targets = DegreeTargets::from_graph(graph);
    let mut params = ModelParams::init(cfg, ctx.text_dim());
    let mut eval_rng = rng::derive(cfg.seed, 3);
    let eval_negatives = sampler.sample(plan.masked.len(), &mut eval_rng)?;
    let n_neg = plan.negatives.len();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.resample_negatives && epoch > 0 {
            let mut r = rng::derive(cfg.seed, 1000 + epoch as u64);
            plan.negatives = sampler.sample(n_neg, &mut r)?;
        }
        let obj = Objective {
            ctx: &ctx,
            features,
            positives: &plan.visible,
            negatives: &plan.negatives,
            targets: &targets,
            cfg,
        };
        let (loss, grad, outputs) = obj.evaluate(&params, true);
        if !loss.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let auc = if plan.masked.is_empty() {
            f64::NAN
        } else {
            evaluate_reconstruction(&outputs, &plan.masked, &eval_negatives, &params.edge_decoder)?.auc
        };
        history.push(EpochRecord {
            epoch,
            l_total: loss.total,
            l_edge: loss.edge,
            l_deg: loss.deg,
            auc,
        });
        params.descend(&grad.expect("requested"), cfg.learning_rate);
        if !params.all_finite() {
            return Err(Error::Diverged { epoch });
        }
    }

    let reconstruction = if plan.masked.is_empty() {
        None
    } else {
        let outputs = embed_all(&params.encoder, features, &ctx);
        Some(evaluate_reconstruction(
            &outputs,
            &plan.masked,
            &eval_negatives,
            &params.edge_decoder,
        )?)
    };
    Ok(TrainOutput {
        params,
        history,
        plan,
        reconstruction,
        grad_check,
    })
}

/// Final encoder output for every sample.
pub fn embed_all(encoder: &Encoder, features: &Matrix, ctx: &GraphContext) -> Vec<Matrix> {
    (0..features.rows())
        .map(|s| encoder.forward(&sample_column(features, s), ctx).output().clone())
        .collect()
}

/// Six entities (two transcripts feeding two of four proteins) with eight
/// edges: two internal and six directed PPI edges.
pub fn micro_instance() -> (TosgGraph, TextEmbeddings, Matrix) {
    use crate::graph::{build_graph, MappingRow, PpiRow};
    let mapping: Vec<MappingRow> = [("f0", "t0", "p0"), ("f1", "t1", "p1"), ("", "", "p2"), ("", "", "p3")]
        .iter()
        .map(|&(f, t, p)| MappingRow {
            feature_id: f.into(),
            transcript_id: t.into(),
            protein_id: p.into(),
            gene: None,
        })
        .collect();
    let ppi: Vec<PpiRow> = [
        ("p0", "p1"),
        ("p1", "p0"),
        ("p1", "p2"),
        ("p2", "p3"),
        ("p3", "p2"),
        ("p0", "p3"),
    ]
    .iter()
    .map(|&(a, b)| PpiRow {
        src_protein: a.into(),
        dst_protein: b.into(),
    })
    .collect();
    let graph = build_graph(&mapping, &ppi, None).expect("micro-instance is valid");
    let m = graph.num_entities();
    let mut rng = rng::seeded(77);
    let mut text = TextEmbeddings::zeros(m, 2);
    for t in [&mut text.names, &mut text.descriptions, &mut text.sequences] {
        t.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.5 * rng::normal(&mut rng));
    }
    let features = Matrix::from_fn(2, m, |_, j| if j < 2 { rng::normal(&mut rng) } else { 0.0 });
    (graph, text, features)
}

/// Finite-difference check of every parameter tensor on [`micro_instance`]
/// with `d = d' = 4` and the structural switches of `cfg`.
pub fn micro_gradient_check(cfg: &ModelConfig) -> Result<Vec<GradCheckEntry>> {
    let mut micro = cfg.clone();
    micro.d = 4;
    micro.d_prime = 4;
    micro.decoder_hidden = cfg.decoder_hidden.iter().map(|_| 3).collect();
    micro.seed = 11;
    let (graph, text, features) = micro_instance();
    let mt = graph.entities.num_transcripts();
    let masked = [(mt + 1, mt + 2)];
    let visible: Vec<(usize, usize)> = undirected_pairs(&graph.edges.ppi)
        .into_iter()
        .filter(|p| !masked.contains(p))
        .collect();
    let negatives = vec![(mt, mt + 2), (mt + 1, mt + 3)];
    let ctx = GraphContext::new(&graph, &text, &visible, micro.internal_direction)?;
    let targets = DegreeTargets::from_graph(&graph);
    let params = ModelParams::init(&micro, ctx.text_dim());
    let obj = Objective {
        ctx: &ctx,
        features: &features,
        positives: &visible,
        negatives: &negatives,
        targets: &targets,
        cfg: &micro,
    };
    let (_, grad, _) = obj.evaluate(&params, true);
    Ok(finite_difference_check(
        &params,
        &grad.expect("requested"),
        GRAD_CHECK_STEP,
        |p| obj.loss(p),
    ))
}

pub fn write_history<W: std::io::Write>(w: W, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "l_total", "l_edge", "l_deg", "auc"])?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            format!("{:.10e}", r.l_total),
            format!("{:.10e}", r.l_edge),
            format!("{:.10e}", r.l_deg),
            format!("{:.10e}", r.auc),
        ])?;
    }
    out.flush().map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_ctx(m: usize, text_dim: usize) -> GraphContext {
        GraphContext {
            num_entities: m,
            internal_op: SparseOp::neighbour_mean(m, &[], false),
            global_op: SparseOp::sym_normalized(m, &[]),
            attention_graph: OutEdges::new(m, &[]),
            text: Matrix::zeros(m, 3 * text_dim),
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d: 3,
            d_prime: 3,
            layers_internal: 0,
            layers_global: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_input_gives_bias_only_identical_rows() {
        let cfg = small_cfg();
        let mut p = ModelParams::init(&cfg, 2);
        p.encoder.omic.b = Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        p.encoder.fusion.b = Matrix::from_rows(&[vec![0.5, 0.0, -0.5]]).unwrap();
        let ctx = toy_ctx(3, 2);
        let t = p.encoder.forward(&Matrix::zeros(3, 1), &ctx);
        // H' = tanh(tanh(b_o)·W_c[:d'] + b_c)
        let xo: Vec<f64> = [0.1f64, -0.2, 0.3].iter().map(|v| v.tanh()).collect();
        for c in 0..3 {
            let mut z = p.encoder.fusion.b.get(0, c);
            for (k, x) in xo.iter().enumerate() {
                z += x * p.encoder.fusion.w.get(k, c);
            }
            for r in 0..3 {
                assert!((t.fused.get(r, c) - z.tanh()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn omic_preactivation_is_linear() {
        let p = ModelParams::init(&small_cfg(), 2);
        let x = Matrix::from_rows(&[vec![0.3], vec![-1.2]]).unwrap();
        let mut x2 = x.clone();
        x2.scale(2.0);
        let z1 = p.encoder.omic_preactivation(&x);
        let z2 = p.encoder.omic_preactivation(&x2);
        let z0 = p.encoder.omic_preactivation(&Matrix::zeros(2, 1));
        for i in 0..z1.as_slice().len() {
            let a = z1.as_slice()[i] - z0.as_slice()[i];
            let b = z2.as_slice()[i] - z0.as_slice()[i];
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_hand_matrix_products() {
        let cfg = ModelConfig {
            activation: Activation::Identity,
            ..small_cfg()
        };
        let p = ModelParams::init(&cfg, 1);
        let mut ctx = toy_ctx(3, 1);
        ctx.text = Matrix::from_fn(3, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]).unwrap();
        let t = p.encoder.forward(&x, &ctx);
        let e = &p.encoder;
        for r in 0..3 {
            let xo: Vec<f64> = (0..3)
                .map(|c| x.get(r, 0) * e.omic.w.get(0, c) + e.omic.b.get(0, c))
                .collect();
            let cat: Vec<f64> = xo.iter().copied().chain(ctx.text.row(r).iter().copied()).collect();
            for c in 0..3 {
                let mut z = e.fusion.b.get(0, c);
                for (k, v) in cat.iter().enumerate() {
                    z += v * e.fusion.w.get(k, c);
                }
                assert!((t.fused.get(r, c) - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn internal_layer_hand_trace() {
        // transcript 0 -> protein 1, identity weights, linear activation
        let layer = GraphLayer {
            w_self: Matrix::identity(2),
            w_nbr: Matrix::identity(2),
            b: Matrix::zeros(1, 2),
        };
        let op = SparseOp::neighbour_mean(3, &[(0, 1)], false);
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0], vec![5.0, 5.0]]).unwrap();
        let z = layer.forward(&h, &op);
        assert_eq!(z.row(1), &[11.0, 22.0]);
        assert_eq!(z.row(0), &[1.0, 2.0]);
        assert_eq!(z.row(2), &[5.0, 5.0]);
    }

    #[test]
    fn global_single_pair_averages() {
        let layer = GraphLayer {
            w_self: Matrix::zeros(2, 2),
            w_nbr: Matrix::identity(2),
            b: Matrix::zeros(1, 2),
        };
        let op = SparseOp::sym_normalized(2, &[(0, 1)]);
        let h = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        let z = layer.forward(&h, &op);
        let want = Matrix::from_rows(&[vec![2.0, 4.0], vec![2.0, 4.0]]).unwrap();
        assert!(z.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_decoder_gives_one_half() {
        let mut dec = Mlp::new(&[3, 1], &mut rng::seeded(0));
        dec = dec.zeros_like();
        assert_eq!(edge_logit(&[1.0, 2.0, 3.0], &[-1.0, 0.5, 9.0], &dec), 0.5);
    }

    #[test]
    fn edge_logit_hand_example_and_symmetry() {
        let dec = Mlp {
            layers: vec![Linear {
                w: Matrix::from_rows(&[vec![0.5], vec![-1.0]]).unwrap(),
                b: Matrix::from_rows(&[vec![0.25]]).unwrap(),
            }],
        };
        let (hi, hj) = ([2.0, 1.0], [0.5, 3.0]);
        // 0.5·(2·0.5) − 1·(1·3) + 0.25 = −2.25
        let want = 1.0 / (1.0 + 2.25f64.exp());
        assert!((edge_logit(&hi, &hj, &dec) - want).abs() < 1e-15);
        assert_eq!(edge_logit(&hi, &hj, &dec), edge_logit(&hj, &hi, &dec));
    }

    #[test]
    fn half_probabilities_give_two_ln_two() {
        let cfg = ModelConfig {
            d: 2,
            lambda_deg: 1.0,
            ..small_cfg()
        };
        let mut p = ModelParams::init(&cfg, 1);
        p.edge_decoder = p.edge_decoder.zeros_like();
        p.degree_decoder = p.degree_decoder.zeros_like();
        let h = Matrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let targets = DegreeTargets {
            nodes: vec![0, 1],
            degrees: vec![0.0, 0.0],
        };
        let (l, _) = decoder_loss(&h, &[(0, 1), (2, 3)], &[(0, 2)], &targets, &p, &cfg, None);
        assert!((l.edge - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.deg, 0.0);
        assert_eq!(l.total, l.edge);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut r = rng::seeded(5);
        for _ in 0..50 {
            let np = 1 + rng::index(&mut r, 15);
            let nn = 1 + rng::index(&mut r, 15);
            // coarse scores so ties happen
            let pos: Vec<f64> = (0..np).map(|_| rng::index(&mut r, 6) as f64).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng::index(&mut r, 6) as f64).collect();
            let mut wins = 0.0;
            for p in &pos {
                for n in &neg {
                    wins += if p > n {
                        1.0
                    } else if p == n {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let want = wins / (np * nn) as f64;
            assert!((auc(&pos, &neg).unwrap() - want).abs() < 1e-12);
        }
        assert_eq!(auc(&[0.9; 4], &[0.1; 4]), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &[0.3; 7]), Some(0.5));
    }

    #[test]
    fn mask_extremes() {
        let (g, _, _) = micro_instance();
        let (none, _) = sample_mask(&g, 0.0, 1.0, 1).unwrap();
        assert!(none.masked.is_empty());
        assert_eq!(none.visible, undirected_pairs(&g.edges.ppi));
        let (all, _) = sample_mask(&g, 1.0, 1.0, 1).unwrap();
        assert!(all.visible.is_empty());
        assert_eq!(all.masked.len(), 4);
    }

    #[test]
    fn negatives_avoid_edges_and_self_pairs() {
        let (g, _, _) = micro_instance();
        let (plan, sampler) = sample_mask(&g, 0.2, 3.0, 9).unwrap();
        let edges: HashSet<(usize, usize)> = undirected_pairs(&g.edges.ppi).into_iter().collect();
        let more = sampler.sample(200, &mut rng::seeded(2)).unwrap();
        for &(a, b) in plan.negatives.iter().chain(&more) {
            assert_ne!(a, b);
            assert!(!edges.contains(&(a, b)));
        }
        let masked: HashSet<_> = plan.masked.iter().collect();
        assert!(plan.visible.iter().all(|p| !masked.contains(p)));
    }

    #[test]
    fn micro_gradients_match_finite_differences() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                decoder_hidden: vec![5],
                internal_direction: InternalDirection::Undirected,
                layers_internal: 2,
                ..Default::default()
            },
        ] {
            for e in micro_gradient_check(&cfg).unwrap() {
                assert!(e.relative_error < GRAD_CHECK_TOL, "{e:?}");
            }
        }
    }

    #[test]
    fn masked_edges_do_not_influence_embeddings() {
        let (g, text, feats) = micro_instance();
        let (plan, _) = sample_mask(&g, 0.5, 1.0, 4).unwrap();
        assert!(!plan.masked.is_empty());
        let cfg = ModelConfig::default();
        let mut g2 = g.clone();
        let masked: HashSet<(usize, usize)> = plan.masked.iter().copied().collect();
        g2.edges.ppi.retain(|&(a, b)| !masked.contains(&unordered(a, b)));
        let p = ModelParams::init(&cfg, 2);
        let a = embed_all(
            &p.encoder,
            &feats,
            &GraphContext::new(&g, &text, &plan.visible, cfg.internal_direction).unwrap(),
        );
        let b = embed_all(
            &p.encoder,
            &feats,
            &GraphContext::new(&g2, &text, &plan.visible, cfg.internal_direction).unwrap(),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (g, text, feats) = micro_instance();
        let cfg = ModelConfig {
            learning_rate: 0.0,
            epochs: 4,
            mask_ratio: 0.3,
            resample_negatives: false,
            ..Default::default()
        };
        let out = train(&g, &text, &feats, &cfg).unwrap();
        assert_eq!(out.params, ModelParams::init(&cfg, 2));
        let l0 = out.history[0].l_total;
        assert!(out.history.iter().all(|r| r.l_total == l0));
    }

    #[test]
    fn training_is_deterministic() {
        let (g, text, feats) = micro_instance();
        let cfg = ModelConfig {
            epochs: 5,
            mask_ratio: 0.3,
            ..Default::default()
        };
        let a = train(&g, &text, &feats, &cfg).unwrap();
        let b = train(&g, &text, &feats, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let bits = |h: &[EpochRecord]| h.iter().map(|r| r.l_total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (g, text, feats) = micro_instance();
        for cfg in [
            ModelConfig {
                d: 0,
                ..Default::default()
            },
            ModelConfig {
                mask_ratio: 1.0,
                ..Default::default()
            },
            ModelConfig {
                lambda_deg: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(train(&g, &text, &feats, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (g, text, feats) = micro_instance();
        let cfg = ModelConfig {
            learning_rate: 1e300,
            epochs: 5,
            mask_ratio: 0.3,
            check_gradients: false,
            ..Default::default()
        };
        assert!(matches!(train(&g, &text, &feats, &cfg), Err(Error::Diverged { .. })));
    }
}
