//! End-to-end glue shared by the command line and the browser demo:
//! expression views for a retrieved cohort, and the downstream run that
//! ends in a core subgraph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm_model::{embed_all, undirected_pairs, GraphContext, ModelConfig, ModelParams};
use crate::graph::{expand_features, EntityTable, TextEmbeddings, TosgGraph};
use crate::inference::{
    accuracy, aggregate_group, encode_labels, extract_core, node_scores, sample_edge_weights, train_head, CoreSubgraph,
    DownstreamHead, GroupWeights, HeadConfig, HeadEpoch, NodeScores, DEFAULT_EPSILON, DEFAULT_XI,
};
use crate::matrix::Matrix;
use crate::preprocess::{normalize, standardize_columns};

/// Two per-entity layouts of one cohort's counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionViews {
    /// Log-normalized values, z-scored per feature; fed to the encoders.
    pub model_input: Matrix,
    /// Log-normalized values; used for expression scores.
    pub expression: Matrix,
}

/// `target_sum` is `None` when `values` are already log-normalized (for
/// example meta-cell output).
pub fn expression_views(
    values: &Matrix<f32>,
    entities: &EntityTable,
    target_sum: Option<f64>,
) -> Result<ExpressionViews> {
    let norm = match target_sum {
        Some(t) => normalize(&Matrix::from(values), t)?,
        None => Matrix::from(values),
    };
    let z = standardize_columns(&norm);
    let to_entities = |m: &Matrix| expand_features(&m.map(|v| v as f32), entities);
    Ok(ExpressionViews {
        model_input: to_entities(&z)?,
        expression: to_entities(&norm)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreConfig {
    pub head: HeadConfig,
    pub xi: usize,
    pub epsilon: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            head: HeadConfig::default(),
            xi: DEFAULT_XI,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoreRun {
    pub head: DownstreamHead,
    pub history: Vec<HeadEpoch>,
    pub train_accuracy: f64,
    pub weights: GroupWeights,
    pub scores: NodeScores,
    pub core: CoreSubgraph,
}

/// Context with every PPI edge visible, as used after pretraining.
pub fn full_context(graph: &TosgGraph, text: &TextEmbeddings, pre_cfg: &ModelConfig) -> Result<GraphContext> {
    GraphContext::new(
        graph,
        text,
        &undirected_pairs(&graph.edges.ppi),
        pre_cfg.internal_direction,
    )
}

/// Trains a head on the whole cohort, then aggregates the attention of the
/// `focus` samples into gene-pair weights and extracts the core subgraph.
#[allow(clippy::too_many_arguments)]
pub fn run_core(
    graph: &TosgGraph,
    text: &TextEmbeddings,
    pre_cfg: &ModelConfig,
    pretrained: &ModelParams,
    views: &ExpressionViews,
    labels: &[String],
    focus: &str,
    cfg: &CoreConfig,
) -> Result<CoreRun> {
    if labels.len() != views.model_input.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            views.model_input.rows()
        )));
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if !classes.iter().any(|c| c == focus) {
        return Err(Error::Invalid(format!(
            "focus label `{focus}` does not occur in the cohort"
        )));
    }
    let y = encode_labels(labels, &classes)?;
    let ctx = full_context(graph, text, pre_cfg)?;
    let emb = embed_all(&pretrained.encoder, &views.model_input, &ctx);
    let mut head = DownstreamHead::new(&cfg.head, pre_cfg.d, text.dim(), classes)?;
    let history = train_head(&mut head, &emb, &y, &ctx, &cfg.head)?;
    let train_accuracy = accuracy(&head.classify(&emb, &ctx), &y);

    let in_focus: Vec<bool> = labels.iter().map(|l| l == focus).collect();
    let focus_emb: Vec<Matrix> = emb
        .iter()
        .zip(&in_focus)
        .filter(|(_, &f)| f)
        .map(|(e, _)| e.clone())
        .collect();
    let per_sample = sample_edge_weights(&head, &focus_emb, &ctx)?;
    let gene_of: Vec<Option<String>> = graph.entities.genes.iter().cloned().map(Some).collect();
    let weights = aggregate_group(&per_sample, &graph.edges.ppi, &gene_of)?;
    let scores = node_scores(
        &weights,
        &views.expression,
        graph.entities.num_transcripts(),
        &gene_of,
        &in_focus,
    )?;
    let core = extract_core(&scores, &weights, cfg.xi, cfg.epsilon)?;
    Ok(CoreRun {
        head,
        history,
        train_accuracy,
        weights,
        scores,
        core,
    })
}
