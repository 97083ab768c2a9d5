//! Browser bindings over the synthetic toy data. Each exported function
//! returns a JSON string for the page to render.

use serde::Serialize;
use tosg_core::fm_model::{self, ModelConfig, ModelParams};
use tosg_core::graph::{build_graph, pseudo_text_embed};
use tosg_core::inference::HeadConfig;
use tosg_core::pipeline::{expression_views, run_core, CoreConfig};
use tosg_core::retrieval::{builtin_task, phase2_balance, Query};
use tosg_core::synthetic::{planted_two_block, toy_cohort, PlantedSpec, ToySpec, TOY_DISEASE};
use wasm_bindgen::prelude::*;

const TEXT_DIM: usize = 8;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

#[derive(Serialize)]
struct CoreView {
    nodes: Vec<CoreNode>,
    edges: Vec<(String, String, f64)>,
    train_accuracy: f64,
    planted: Vec<String>,
}

#[derive(Serialize)]
struct CoreNode {
    gene: String,
    importance: f64,
    significant: bool,
}

/// Trains a small head on the toy cohort and returns the core subgraph of
/// the disease group.
#[wasm_bindgen]
pub fn core_subgraph(xi: usize, epsilon: usize, seed: u32) -> Result<String, JsError> {
    let seed = u64::from(seed);
    let spec = ToySpec {
        n_donors: 8,
        cells_per_donor: 6,
        seed,
        ..Default::default()
    };
    let toy = toy_cohort(&spec).map_err(js)?;
    let graph = build_graph(&toy.mapping, &toy.ppi, Some(toy.text.clone())).map_err(js)?;
    let text = pseudo_text_embed(&graph.text, TEXT_DIM, seed).map_err(js)?;
    let pre_cfg = ModelConfig {
        d: 8,
        d_prime: 8,
        seed,
        ..Default::default()
    };
    let pretrained = ModelParams::init(&pre_cfg, TEXT_DIM);
    let views = expression_views(&toy.counts, &graph.entities, Some(1e4)).map_err(js)?;
    let labels: Vec<String> = toy.records.iter().map(|r| r.disease_bmg_name.clone()).collect();
    let cfg = CoreConfig {
        head: HeadConfig {
            d: 8,
            d_prime: 8,
            epochs: 40,
            learning_rate: 0.3,
            seed,
            ..Default::default()
        },
        xi,
        epsilon,
    };
    let run = run_core(&graph, &text, &pre_cfg, &pretrained, &views, &labels, TOY_DISEASE, &cfg).map_err(js)?;
    let score = |g: &str| run.scores.iter().find(|s| s.gene == g).map_or(0.0, |s| s.importance);
    let view = CoreView {
        nodes: run
            .core
            .nodes
            .iter()
            .map(|g| CoreNode {
                gene: g.clone(),
                importance: score(g),
                significant: run.core.significant.get(g).copied().unwrap_or(false),
            })
            .collect(),
        edges: run
            .core
            .edges
            .iter()
            .map(|e| (e.a.clone(), e.b.clone(), e.weight))
            .collect(),
        train_accuracy: run.train_accuracy,
        planted: toy
            .planted
            .iter()
            .filter_map(|&f| toy.mapping[f].gene.clone())
            .collect(),
    };
    to_json(&view)
}

#[derive(Serialize)]
struct BalanceView {
    strata: Vec<StratumView>,
    discarded: usize,
    cases: usize,
    controls: usize,
    distinct_rows: usize,
}

#[derive(Serialize)]
struct StratumView {
    key: String,
    cases: usize,
    controls: usize,
}

/// Case/control balancing of the toy attribute table under the built-in
/// disease task.
#[wasm_bindgen]
pub fn balance_cohort(tolerance: i32, upsample: bool, seed: u32) -> Result<String, JsError> {
    let seed = u64::from(seed);
    let toy = toy_cohort(&ToySpec {
        n_donors: 24,
        cells_per_donor: 5,
        seed,
        ..Default::default()
    })
    .map_err(js)?;
    let task = builtin_task("disease", i64::from(tolerance), upsample, seed).map_err(js)?;
    let cohort = phase2_balance(&toy.records, &Query::new(), &task).map_err(js)?;
    let distinct: std::collections::BTreeSet<usize> = cohort.rows.iter().copied().collect();
    let view = BalanceView {
        strata: cohort
            .strata
            .iter()
            .map(|s| StratumView {
                key: s.key.join(" / "),
                cases: s.cases.len(),
                controls: s.controls.len(),
            })
            .collect(),
        discarded: cohort.discarded_strata.len(),
        cases: cohort.strata.iter().map(|s| s.cases.len()).sum(),
        controls: cohort.strata.iter().map(|s| s.controls.len()).sum(),
        distinct_rows: distinct.len(),
    };
    to_json(&view)
}

#[derive(Serialize)]
struct CurveView {
    epochs: Vec<usize>,
    loss: Vec<f64>,
    auc: Vec<f64>,
    final_auc: Option<f64>,
    recovered: Option<f64>,
}

/// Masked-edge pretraining on a small two-block graph.
#[wasm_bindgen]
pub fn pretrain_curve(epochs: usize, learning_rate: f64, mask_ratio: f64, seed: u32) -> Result<String, JsError> {
    let seed = u64::from(seed);
    let pg = planted_two_block(&PlantedSpec {
        n_proteins: 60,
        p_in: 0.2,
        p_out: 0.02,
        n_samples: 2,
        seed,
        ..Default::default()
    })
    .map_err(js)?;
    let text = pseudo_text_embed(&pg.graph.text, TEXT_DIM, seed).map_err(js)?;
    let cfg = ModelConfig {
        d: 8,
        d_prime: 8,
        layers_global: 0,
        lambda_deg: 0.01,
        learning_rate,
        mask_ratio,
        epochs,
        seed,
        check_gradients: false,
        ..Default::default()
    };
    let out = fm_model::train(&pg.graph, &text, &pg.features, &cfg).map_err(js)?;
    let view = CurveView {
        epochs: out.history.iter().map(|h| h.epoch).collect(),
        loss: out.history.iter().map(|h| h.l_total).collect(),
        // NaN is not JSON; epochs without masked edges report 0.5
        auc: out
            .history
            .iter()
            .map(|h| if h.auc.is_nan() { 0.5 } else { h.auc })
            .collect(),
        final_auc: out.reconstruction.map(|r| r.auc),
        recovered: out.reconstruction.map(|r| r.recovered_fraction),
    };
    to_json(&view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: Result<String, JsError>) -> Value {
        serde_json::from_str(&s.unwrap_or_else(|_| panic!("demo call failed"))).unwrap()
    }

    #[test]
    fn core_respects_xi() {
        let v = parse(core_subgraph(6, 2, 1));
        let nodes = v["nodes"].as_array().unwrap();
        assert!(!nodes.is_empty() && nodes.len() <= 6);
        assert_eq!(v["planted"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn balanced_strata() {
        let v = parse(balance_cohort(1, false, 0));
        assert_eq!(v["cases"], v["controls"]);
        for s in v["strata"].as_array().unwrap() {
            assert_eq!(s["cases"], s["controls"]);
        }
        assert_eq!(v["distinct_rows"].as_u64().unwrap(), v["cases"].as_u64().unwrap() * 2);
    }

    #[test]
    fn curve_has_one_point_per_epoch() {
        let v = parse(pretrain_curve(5, 0.3, 0.1, 0));
        assert_eq!(v["loss"].as_array().unwrap().len(), 5);
        assert!(v["final_auc"].as_f64().is_some());
    }
}
