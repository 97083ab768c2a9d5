//! Downstream classification on top of a pretrained encoder, attention
//! affinities restricted to the PPI topology, gene-level aggregation, node
//! scoring and core-subgraph extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm_model::{sample_column, Encoder, EncoderShape, GraphContext, InternalDirection, ModelParams};
use crate::matrix::Matrix;
use crate::nn::{edge_attention, softmax_rows, Activation, AttentionLayer, Linear, OutEdges, Tensors};
use crate::rng;
use crate::stats::mann_whitney_u;

pub const DEFAULT_XI: usize = 120;
pub const DEFAULT_EPSILON: usize = 3;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub d_prime: usize,
    pub d: usize,
    pub layers_internal: usize,
    /// Plain global layers before the final attention layer.
    pub layers_global: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub activation: Activation,
    pub internal_direction: InternalDirection,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d_prime: 16,
            d: 16,
            layers_internal: 1,
            layers_global: 0,
            learning_rate: 0.1,
            epochs: 200,
            seed: 0,
            activation: Activation::Tanh,
            internal_direction: InternalDirection::Directed,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 {
            return Err(Error::Config("head widths must be at least 1".into()));
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

/// Downstream encoder copies plus a linear classifier over the mean-pooled
/// entity states. The encoder's last layer is attention-based; its weights
/// are the edge affinities used for interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamHead {
    pub encoder: Encoder,
    pub classifier: Linear,
    pub classes: Vec<String>,
}

impl DownstreamHead {
    /// `input_dim` is the pretrained embedding width.
    pub fn new(cfg: &HeadConfig, input_dim: usize, text_dim: usize, classes: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut r = rng::derive(cfg.seed, 7);
        let shape = EncoderShape {
            omic_in: input_dim,
            text_dim,
            d_prime: cfg.d_prime,
            d: cfg.d,
            layers_internal: cfg.layers_internal,
            layers_global: cfg.layers_global,
            pre_mlp: false,
            attention: true,
            activation: cfg.activation,
        };
        let encoder = Encoder::new(&shape, &mut r);
        let classifier = Linear::new(cfg.d, classes.len(), &mut r);
        Ok(DownstreamHead {
            encoder,
            classifier,
            classes,
        })
    }

    pub fn attention_layer(&self) -> &AttentionLayer {
        self.encoder
            .attention
            .as_ref()
            .expect("downstream encoder ends in attention")
    }

    /// Class probabilities, one row per pretrained embedding.
    pub fn classify(&self, embeddings: &[Matrix], ctx: &GraphContext) -> Matrix {
        let pooled = self.pool_all(embeddings, ctx);
        softmax_rows(&self.classifier.forward(&pooled))
    }

    fn pool_all(&self, embeddings: &[Matrix], ctx: &GraphContext) -> Matrix {
        let rows: Vec<Vec<f64>> = embeddings
            .iter()
            .map(|h| self.encoder.forward(h, ctx).output().col_means())
            .collect();
        Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, self.classifier.input_dim()))
    }

    /// Mean cross-entropy and, optionally, its gradient.
    pub fn loss(
        &self,
        embeddings: &[Matrix],
        labels: &[usize],
        ctx: &GraphContext,
        with_grad: bool,
    ) -> (f64, Option<Self>) {
        let n = embeddings.len() as f64;
        let mut grad = with_grad.then(|| self.zeros_like());
        let mut total = 0.0;
        for (h, &y) in embeddings.iter().zip(labels) {
            let trace = self.encoder.forward(h, ctx);
            let z = trace.output();
            let pooled = Matrix::from_vec(1, z.cols(), z.col_means()).expect("row");
            let probs = softmax_rows(&self.classifier.forward(&pooled));
            total -= probs.get(0, y).max(1e-300).ln() / n;
            if let Some(g) = grad.as_mut() {
                let mut d_logits = probs.clone();
                d_logits.row_mut(0)[y] -= 1.0;
                d_logits.scale(1.0 / n);
                let d_pooled = self.classifier.backward(&pooled, &d_logits, &mut g.classifier);
                let m = z.rows() as f64;
                let dz = Matrix::from_fn(z.rows(), z.cols(), |_, c| d_pooled.get(0, c) / m);
                self.encoder.backward(&trace, ctx, &dz, &mut g.encoder);
            }
        }
        (total, grad)
    }
}

impl Tensors for DownstreamHead {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.named_tensors("head.");
        out.push(("classifier.w".into(), &self.classifier.w));
        out.push(("classifier.b".into(), &self.classifier.b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.classifier.tensors_mut());
        out
    }
}

/// Pretrained embeddings `H^(τ)` for every sample (all PPI edges visible).
pub fn pretrained_embeddings(pretrained: &ModelParams, features: &Matrix, ctx: &GraphContext) -> Vec<Matrix> {
    (0..features.rows())
        .map(|s| {
            pretrained
                .encoder
                .forward(&sample_column(features, s), ctx)
                .output()
                .clone()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Maps labels onto class indices, rejecting labels outside `classes`.
pub fn encode_labels(labels: &[String], classes: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    labels
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("label `{l}` is not one of the head's classes")))
        })
        .collect()
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Full-batch gradient descent on the cross-entropy of the head.
pub fn train_head(
    head: &mut DownstreamHead,
    embeddings: &[Matrix],
    labels: &[usize],
    ctx: &GraphContext,
    cfg: &HeadConfig,
) -> Result<Vec<HeadEpoch>> {
    cfg.validate()?;
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.classes.len()) {
        return Err(Error::Invalid(format!(
            "label index {bad} exceeds the head's {} classes",
            head.classes.len()
        )));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = head.loss(embeddings, labels, ctx, true);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let acc = accuracy(&head.classify(embeddings, ctx), labels);
        history.push(HeadEpoch {
            epoch,
            loss,
            accuracy: acc,
        });
        head.descend(&grad.expect("requested"), cfg.learning_rate);
    }
    Ok(history)
}

/// Attention weights on the stored directed PPI edges, normalised over
/// each source's outgoing edges. `z` is the representation entering the
/// attention layer.
pub fn attention_affinity(z: &Matrix, layer: &AttentionLayer, graph: &OutEdges) -> Result<Vec<f64>> {
    if !z.is_finite() {
        return Err(Error::Invalid("attention input contains non-finite values".into()));
    }
    Ok(edge_attention(&z.matmul(&layer.w_q), &z.matmul(&layer.w_k), graph))
}

/// Per-sample edge weights from the trained head's attention layer.
pub fn sample_edge_weights(head: &DownstreamHead, embeddings: &[Matrix], ctx: &GraphContext) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|h| {
            let trace = head.encoder.forward(h, ctx);
            attention_affinity(trace.before_attention(), head.attention_layer(), &ctx.attention_graph)
        })
        .collect()
}

/// Undirected gene-pair weights summed over a group of samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    /// Keys are `(a, b)` with `a < b`.
    pub pairs: BTreeMap<(String, String), f64>,
    /// Edge entries skipped because an endpoint has no gene.
    pub unmapped_edges: usize,
    /// Edge entries skipped because both endpoints share a gene.
    pub self_pairs: usize,
}

impl GroupWeights {
    pub fn genes(&self) -> BTreeSet<&str> {
        self.pairs.keys().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect()
    }
}

/// Per sample, directed weights sharing a (source gene, target gene) are
/// summed and reciprocal directions averaged; the undirected weights are
/// then summed over samples.
pub fn aggregate_group(
    samples: &[Vec<f64>],
    edges: &[(usize, usize)],
    gene_of: &[Option<String>],
) -> Result<GroupWeights> {
    let mut out = GroupWeights::default();
    for (s, w) in samples.iter().enumerate() {
        if w.len() != edges.len() {
            return Err(Error::Shape(format!(
                "sample {s} has {} edge weights, topology has {} edges",
                w.len(),
                edges.len()
            )));
        }
        let mut directed: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        for (&(i, j), &wij) in edges.iter().zip(w) {
            let (Some(gi), Some(gj)) = (gene_of[i].as_deref(), gene_of[j].as_deref()) else {
                if s == 0 {
                    out.unmapped_edges += 1;
                }
                continue;
            };
            if gi == gj {
                if s == 0 {
                    out.self_pairs += 1;
                }
                continue;
            }
            *directed.entry((gi, gj)).or_default() += wij;
        }
        let mut done: BTreeSet<(&str, &str)> = BTreeSet::new();
        for (&(a, b), &w_ab) in &directed {
            let key = if a < b { (a, b) } else { (b, a) };
            if !done.insert(key) {
                continue;
            }
            let undirected = match directed.get(&(b, a)) {
                Some(&w_ba) => (w_ab + w_ba) / 2.0,
                None => w_ab,
            };
            *out.pairs.entry((key.0.to_string(), key.1.to_string())).or_default() += undirected;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub gene: String,
    pub attention: f64,
    pub expression: f64,
    pub importance: f64,
    pub p_value: f64,
}

/// Scores in gene-name order; a node's id is its position.
pub type NodeScores = Vec<NodeScore>;

/// Per-column min–max scaling to `[0, 1]`; constant columns become 0.
pub fn min_max_columns(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let col = x.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for r in 0..x.rows() {
            let v = if hi > lo { (x.get(r, c) - lo) / (hi - lo) } else { 0.0 };
            out.set(r, c, v);
        }
    }
    out
}

/// Attention is the mean weight of a gene's incident pairs. Expression uses
/// the gene's transcript with the highest focus-group mean after cohort-wide
/// min–max scaling; its focus-vs-rest Mann–Whitney p-value is reported.
///
/// `expression` is `N × M` on the entity axis; `transcripts` is the number of
/// leading transcript columns.
pub fn node_scores(
    weights: &GroupWeights,
    expression: &Matrix,
    transcripts: usize,
    gene_of: &[Option<String>],
    in_focus: &[bool],
) -> Result<NodeScores> {
    if in_focus.len() != expression.rows() {
        return Err(Error::Shape("group flags do not match the expression rows".into()));
    }
    let focus: Vec<usize> = (0..in_focus.len()).filter(|&i| in_focus[i]).collect();
    let rest: Vec<usize> = (0..in_focus.len()).filter(|&i| !in_focus[i]).collect();
    if focus.is_empty() || rest.is_empty() {
        return Err(Error::Invalid("both comparison groups must be non-empty".into()));
    }
    let norm = min_max_columns(expression);

    let mut incident: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for ((a, b), &w) in &weights.pairs {
        for g in [a, b] {
            let e = incident.entry(g.as_str()).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    let mut by_gene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (e, g) in gene_of.iter().enumerate() {
        if let Some(g) = g {
            let slot = by_gene.entry(g.as_str()).or_default();
            if e < transcripts {
                slot.push(e);
            }
        }
    }
    for g in weights.genes() {
        by_gene.entry(g).or_default();
    }

    let mean_of = |col: usize, rows: &[usize]| rows.iter().map(|&r| norm.get(r, col)).sum::<f64>() / rows.len() as f64;
    let mut out = Vec::with_capacity(by_gene.len());
    for (gene, cols) in by_gene {
        let attention = incident.get(gene).map_or(0.0, |&(s, k)| s / k as f64);
        let best = cols
            .iter()
            .map(|&c| (c, mean_of(c, &focus)))
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        let (expression_score, p_value) = match best {
            Some((c, m)) => {
                let fx: Vec<f64> = focus.iter().map(|&r| norm.get(r, c)).collect();
                let rx: Vec<f64> = rest.iter().map(|&r| norm.get(r, c)).collect();
                (m, mann_whitney_u(&fx, &rx)?.p_value)
            }
            None => (0.0, 1.0),
        };
        out.push(NodeScore {
            gene: gene.to_string(),
            attention,
            expression: expression_score,
            importance: attention * expression_score,
            p_value,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoreEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoreSubgraph {
    pub nodes: Vec<String>,
    pub edges: Vec<CoreEdge>,
    /// `p < 0.05` per retained node.
    pub significant: BTreeMap<String, bool>,
}

/// Node ids ordered by importance, then attention, then lower id.
pub fn importance_order(scores: &[NodeScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .importance
            .total_cmp(&scores[a].importance)
            .then(scores[b].attention.total_cmp(&scores[a].attention))
            .then(a.cmp(&b))
    });
    order
}

/// Leaf preference: significant first, then heavier edge, then lower id.
pub fn leaf_order(leaves: &mut [(usize, f64, bool)]) {
    leaves.sort_by(|x, y| y.2.cmp(&x.2).then(y.1.total_cmp(&x.1)).then(x.0.cmp(&y.0)));
}

/// Keeps the top `xi` nodes, restricts to the largest connected component
/// (ties go to the component holding the best-ranked node) and lets every
/// hub keep at most `epsilon` of its leaf neighbours.
pub fn extract_core(scores: &[NodeScore], weights: &GroupWeights, xi: usize, epsilon: usize) -> Result<CoreSubgraph> {
    if xi == 0 {
        return Err(Error::Config("xi must be at least 1".into()));
    }
    if scores.is_empty() {
        return Ok(CoreSubgraph::default());
    }
    let id_of: HashMap<&str, usize> = scores.iter().enumerate().map(|(i, s)| (s.gene.as_str(), i)).collect();
    let order = importance_order(scores);
    let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let kept: BTreeSet<usize> = order.iter().take(xi).copied().collect();

    let mut adj: BTreeMap<usize, BTreeMap<usize, f64>> = kept.iter().map(|&i| (i, BTreeMap::new())).collect();
    for ((a, b), &w) in &weights.pairs {
        let (Some(&ia), Some(&ib)) = (id_of.get(a.as_str()), id_of.get(b.as_str())) else {
            continue;
        };
        if kept.contains(&ia) && kept.contains(&ib) {
            adj.get_mut(&ia).expect("kept").insert(ib, w);
            adj.get_mut(&ib).expect("kept").insert(ia, w);
        }
    }

    // connected components, best component = largest, then best-ranked member
    let mut comp_of: HashMap<usize, usize> = HashMap::new();
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for &start in adj.keys() {
        if comp_of.contains_key(&start) {
            continue;
        }
        let c = comps.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        comp_of.insert(start, c);
        while let Some(v) = stack.pop() {
            members.push(v);
            for &u in adj[&v].keys() {
                if let std::collections::hash_map::Entry::Vacant(e) = comp_of.entry(u) {
                    e.insert(c);
                    stack.push(u);
                }
            }
        }
        comps.push(members);
    }
    let best_rank = |c: &Vec<usize>| c.iter().map(|v| rank[v]).min().expect("non-empty");
    let comp = comps
        .iter()
        .max_by(|x, y| x.len().cmp(&y.len()).then(best_rank(y).cmp(&best_rank(x))))
        .expect("at least one node");
    let mut alive: BTreeSet<usize> = comp.iter().copied().collect();

    let degree = |v: usize| adj[&v].len();
    let sig = |v: usize| scores[v].p_value < SIGNIFICANCE;
    let mut dropped = BTreeSet::new();
    for &hub in &alive {
        if degree(hub) <= 1 {
            continue;
        }
        let mut leaves: Vec<(usize, f64, bool)> = adj[&hub]
            .iter()
            .filter(|(&u, _)| degree(u) == 1)
            .map(|(&u, &w)| (u, w, sig(u)))
            .collect();
        if leaves.len() <= epsilon {
            continue;
        }
        leaf_order(&mut leaves);
        dropped.extend(leaves[epsilon..].iter().map(|l| l.0));
    }
    alive.retain(|v| !dropped.contains(v));

    let mut nodes: Vec<usize> = alive.iter().copied().collect();
    nodes.sort_by_key(|v| rank[v]);
    let mut edges = Vec::new();
    for &a in &alive {
        for (&b, &w) in &adj[&a] {
            if a < b && alive.contains(&b) {
                let (ga, gb) = (&scores[a].gene, &scores[b].gene);
                let (x, y) = if ga < gb { (ga, gb) } else { (gb, ga) };
                edges.push(CoreEdge {
                    a: x.clone(),
                    b: y.clone(),
                    weight: w,
                });
            }
        }
    }
    edges.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    Ok(CoreSubgraph {
        significant: nodes.iter().map(|&v| (scores[v].gene.clone(), sig(v))).collect(),
        nodes: nodes.into_iter().map(|v| scores[v].gene.clone()).collect(),
        edges,
    })
}

/// Edge list: `gene1, gene2, weight, flag1, flag2` (tab separated).
pub fn write_core_tsv<W: Write>(w: W, core: &CoreSubgraph) -> Result<()> {
    let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
    out.write_record(["gene1", "gene2", "weight", "flag1", "flag2"])?;
    let flag = |g: &str| {
        if core.significant.get(g).copied().unwrap_or(false) {
            "1"
        } else {
            "0"
        }
    };
    for e in &core.edges {
        out.write_record([
            e.a.as_str(),
            e.b.as_str(),
            &format!("{:.10e}", e.weight),
            flag(&e.a),
            flag(&e.b),
        ])?;
    }
    out.flush().map_err(Error::from)
}

pub fn write_core_dot<W: Write>(mut w: W, core: &CoreSubgraph) -> Result<()> {
    writeln!(w, "graph core {{")?;
    for n in &core.nodes {
        let style = if core.significant[n] {
            ", style=filled, fillcolor=\"#f4a261\""
        } else {
            ""
        };
        writeln!(w, "  \"{}\" [label=\"{}\"{}];", escape_dot(n), escape_dot(n), style)?;
    }
    for e in &core.edges {
        writeln!(
            w,
            "  \"{}\" -- \"{}\" [weight={:.6}, penwidth={:.3}];",
            escape_dot(&e.a),
            escape_dot(&e.b),
            e.weight,
            1.0 + 4.0 * e.weight.clamp(0.0, 1.0)
        )?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn write_node_scores<W: Write>(w: W, scores: &[NodeScore]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["gene", "attention", "expression", "importance", "p_value"])?;
    for s in scores {
        out.write_record([
            s.gene.clone(),
            format!("{:.10e}", s.attention),
            format!("{:.10e}", s.expression),
            format!("{:.10e}", s.importance),
            format!("{:.10e}", s.p_value),
        ])?;
    }
    out.flush().map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fm_model::{micro_instance, undirected_pairs, ModelConfig};
    use crate::nn::finite_difference_check;

    fn score(gene: &str, attention: f64, expression: f64, p: f64) -> NodeScore {
        NodeScore {
            gene: gene.into(),
            attention,
            expression,
            importance: attention * expression,
            p_value: p,
        }
    }

    fn pairs(list: &[(&str, &str, f64)]) -> GroupWeights {
        let mut g = GroupWeights::default();
        for &(a, b, w) in list {
            let k = if a < b { (a, b) } else { (b, a) };
            g.pairs.insert((k.0.into(), k.1.into()), w);
        }
        g
    }

    fn head_fixture() -> (DownstreamHead, GraphContext, Vec<Matrix>) {
        let (graph, text, feats) = micro_instance();
        let mcfg = ModelConfig {
            d: 3,
            d_prime: 3,
            ..Default::default()
        };
        let ctx = GraphContext::new(
            &graph,
            &text,
            &undirected_pairs(&graph.edges.ppi),
            mcfg.internal_direction,
        )
        .unwrap();
        let pre = ModelParams::init(&mcfg, 2);
        let emb = pretrained_embeddings(&pre, &feats, &ctx);
        let cfg = HeadConfig {
            d: 4,
            d_prime: 4,
            layers_global: 1,
            ..Default::default()
        };
        let head = DownstreamHead::new(&cfg, 3, 2, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        (head, ctx, emb)
    }

    #[test]
    fn zero_classifier_is_uniform_and_rows_sum_to_one() {
        let (mut head, ctx, emb) = head_fixture();
        let p = head.classify(&emb, &ctx);
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        head.classifier = Linear::zeros(4, 3);
        let p = head.classify(&emb, &ctx);
        assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (head, ctx, emb) = head_fixture();
        let labels = vec![0, 2];
        let (_, grad) = head.loss(&emb, &labels, &ctx, true);
        let report = finite_difference_check(&head, &grad.unwrap(), 1e-5, |h| h.loss(&emb, &labels, &ctx, false).0);
        for e in report {
            assert!(e.relative_error < 1e-4, "{e:?}");
        }
    }

    #[test]
    fn label_errors() {
        let (mut head, ctx, emb) = head_fixture();
        assert!(train_head(&mut head, &emb, &[0, 5], &ctx, &HeadConfig::default()).is_err());
        assert!(train_head(&mut head, &emb, &[0], &ctx, &HeadConfig::default()).is_err());
        assert!(encode_labels(&["zz".to_string()], &head.classes).is_err());
        assert!(DownstreamHead::new(&HeadConfig::default(), 3, 2, vec!["only".into()]).is_err());
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut r = rng::seeded(3);
        for trial in 0..20 {
            let m = 2 + trial % 15;
            let mut edges = Vec::new();
            for i in 0..m {
                for j in 0..m {
                    if i != j && rng::index(&mut r, 3) == 0 {
                        edges.push((i, j));
                    }
                }
            }
            let graph = OutEdges::new(m, &edges);
            let layer = AttentionLayer::new(3, 4, &mut r);
            let z = Matrix::from_fn(m, 3, |_, _| rng::normal(&mut r));
            let got = attention_affinity(&z, &layer, &graph).unwrap();

            let q = z.matmul(&layer.w_q);
            let k = z.matmul(&layer.w_k);
            let scores = q.matmul_t(&k);
            let mut dense = Matrix::zeros(m, m);
            for i in 0..m {
                let nb: Vec<usize> = edges.iter().filter(|e| e.0 == i).map(|e| e.1).collect();
                let total: f64 = nb.iter().map(|&j| (scores.get(i, j) / 2.0).exp()).sum();
                for &j in &nb {
                    dense.set(i, j, (scores.get(i, j) / 2.0).exp() / total);
                }
            }
            for (e, &(i, j)) in edges.iter().enumerate() {
                assert!((got[e] - dense.get(i, j)).abs() < 1e-12);
            }
            let sum_nonedges: f64 = (0..m)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .filter(|p| !edges.contains(p))
                .map(|(i, j)| dense.get(i, j))
                .sum();
            assert_eq!(sum_nonedges, 0.0);
        }
    }

    #[test]
    fn singleton_outgoing_edge_gets_full_weight() {
        let graph = OutEdges::new(3, &[(0, 1), (1, 2), (1, 0)]);
        let layer = AttentionLayer::new(2, 2, &mut rng::seeded(1));
        let z = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let w = attention_affinity(&z, &layer, &graph).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] + w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_examples() {
        let genes = vec![Some("a".to_string()), Some("b".to_string())];
        let edges = vec![(0, 1), (1, 0)];
        let one = aggregate_group(&[vec![0.2, 0.4]], &edges, &genes).unwrap();
        assert!((one.pairs[&("a".into(), "b".into())] - 0.3).abs() < 1e-15);
        let two = aggregate_group(&[vec![0.2, 0.4], vec![0.1, 0.5]], &edges, &genes).unwrap();
        assert!((two.pairs[&("a".into(), "b".into())] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn aggregation_sums_entities_of_one_gene() {
        // entities 0 and 1 both map to gene x, entity 2 to y, entity 3 unmapped
        let genes = vec![
            Some("x".to_string()),
            Some("x".to_string()),
            Some("y".to_string()),
            None,
        ];
        let edges = vec![(0, 2), (1, 2), (2, 0), (0, 1), (3, 2)];
        let w = vec![0.5, 0.25, 1.0, 0.7, 0.9];
        let g = aggregate_group(&[w], &edges, &genes).unwrap();
        // x->y = 0.5 + 0.25, y->x = 1.0, undirected = 0.875
        assert_eq!(g.pairs.len(), 1);
        assert!((g.pairs[&("x".into(), "y".into())] - 0.875).abs() < 1e-15);
        assert_eq!(g.self_pairs, 1);
        assert_eq!(g.unmapped_edges, 1);
    }

    #[test]
    fn aggregation_is_order_invariant_and_linear() {
        let genes: Vec<Option<String>> = (0..4).map(|i| Some(format!("g{i}"))).collect();
        let edges = vec![(0, 1), (1, 2), (2, 1), (3, 0)];
        let s1 = vec![0.1, 0.3, 0.2, 0.9];
        let s2 = vec![0.4, 0.6, 0.8, 0.05];
        let a = aggregate_group(&[s1.clone(), s2.clone()], &edges, &genes).unwrap();
        let b = aggregate_group(&[s2.clone(), s1.clone()], &edges, &genes).unwrap();
        for (k, v) in &a.pairs {
            assert!((v - b.pairs[k]).abs() < 1e-15);
        }
        let doubled: Vec<f64> = s1.iter().map(|v| 2.0 * v).collect();
        let single = aggregate_group(&[s1], &edges, &genes).unwrap();
        let twice = aggregate_group(&[doubled], &edges, &genes).unwrap();
        for (k, v) in &single.pairs {
            assert!((2.0 * v - twice.pairs[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn importance_is_product() {
        let genes = vec![Some("a".to_string()), Some("b".to_string())];
        let w = pairs(&[("a", "b", 0.5)]);
        let expr = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.4, 0.5]]).unwrap();
        let s = node_scores(&w, &expr, 2, &genes, &[true, false, true]).unwrap();
        for n in &s {
            assert_eq!(n.importance, n.attention * n.expression);
            assert!(n.p_value > 0.0 && n.p_value <= 1.0);
        }
        // gene a: normalised focus values 0.0 and 0.4 -> mean 0.2
        assert!((s[0].expression - 0.2).abs() < 1e-12);
        assert_eq!(s[0].attention, 0.5);
    }

    #[test]
    fn zero_degree_gene_has_zero_attention() {
        let genes = vec![Some("a".to_string()), Some("lonely".to_string())];
        let w = pairs(&[]);
        let expr = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = node_scores(&w, &expr, 2, &genes, &[true, false]).unwrap();
        assert!(s.iter().all(|n| n.attention == 0.0 && n.importance == 0.0));
    }

    #[test]
    fn star_keeps_heaviest_leaves() {
        let mut scores = vec![score("hub", 1.0, 1.0, 1.0)];
        let mut list = Vec::new();
        let weights = [0.1, 0.9, 0.3, 0.7, 0.5, 0.2];
        let names: Vec<String> = (0..6).map(|i| format!("leaf{i}")).collect();
        for (i, w) in weights.iter().enumerate() {
            scores.push(score(&names[i], 0.5, 0.5, 0.5));
            list.push(("hub", names[i].as_str(), *w));
        }
        scores.sort_by(|a, b| a.gene.cmp(&b.gene));
        let core = extract_core(&scores, &pairs(&list), DEFAULT_XI, DEFAULT_EPSILON).unwrap();
        let kept: BTreeSet<&str> = core.nodes.iter().map(String::as_str).collect();
        assert_eq!(kept, BTreeSet::from(["hub", "leaf1", "leaf3", "leaf4"]));
        assert_eq!(core.edges.len(), 3);
    }

    #[test]
    fn significant_leaves_win_over_heavier_ones() {
        let mut scores = vec![score("hub", 1.0, 1.0, 1.0)];
        let mut list = Vec::new();
        let names: Vec<String> = (0..5).map(|i| format!("l{i}")).collect();
        for (i, n) in names.iter().enumerate() {
            let p = if i == 0 { 0.01 } else { 0.5 };
            scores.push(score(n, 0.5, 0.5, p));
            list.push(("hub", n.as_str(), if i == 0 { 0.01 } else { 0.9 }));
        }
        scores.sort_by(|a, b| a.gene.cmp(&b.gene));
        let core = extract_core(&scores, &pairs(&list), 10, 1).unwrap();
        assert!(core.nodes.contains(&"l0".to_string()));
        assert_eq!(core.nodes.len(), 2);
    }

    #[test]
    fn largest_component_only() {
        let scores: Vec<NodeScore> = ["a", "b", "c", "d", "e"]
            .iter()
            .map(|g| score(g, 1.0, 1.0, 1.0))
            .collect();
        let w = pairs(&[("a", "b", 1.0), ("c", "d", 1.0), ("d", "e", 1.0)]);
        let core = extract_core(&scores, &w, 5, 3).unwrap();
        let kept: BTreeSet<&str> = core.nodes.iter().map(String::as_str).collect();
        assert_eq!(kept, BTreeSet::from(["c", "d", "e"]));
        assert!(extract_core(&[], &w, 5, 3).unwrap().nodes.is_empty());
        assert!(extract_core(&scores, &w, 0, 3).is_err());
    }

    #[test]
    fn exports_are_well_formed() {
        let scores: Vec<NodeScore> = ["a", "b"].iter().map(|g| score(g, 1.0, 1.0, 0.01)).collect();
        let core = extract_core(&scores, &pairs(&[("a", "b", 0.25)]), 5, 3).unwrap();
        let mut tsv = Vec::new();
        write_core_tsv(&mut tsv, &core).unwrap();
        let text = String::from_utf8(tsv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "gene1\tgene2\tweight\tflag1\tflag2");
        assert!(text.lines().nth(1).unwrap().starts_with("a\tb\t"));
        assert!(text.lines().nth(1).unwrap().ends_with("\t1\t1"));
        let mut dot = Vec::new();
        write_core_dot(&mut dot, &core).unwrap();
        let dot = String::from_utf8(dot).unwrap();
        assert!(dot.starts_with("graph core {") && dot.contains("\"a\" -- \"b\""));
        let mut csv = Vec::new();
        write_node_scores(&mut csv, &scores).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("gene,attention,expression,importance,p_value"));
    }
}
