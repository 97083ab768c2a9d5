//! Seeded synthetic data used by tests, the acceptance suite, the CLI demo
//! inputs and the browser demo.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{build_graph, MappingRow, PpiRow, TextBundle, TosgGraph};
use crate::matrix::Matrix;
use crate::rng;
use crate::shard_store::{shard_file_name, AttributeRecord, Sex, SuspensionType};

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut r))
}

/// Two-block stochastic block model on proteins, each fed by one
/// transcript whose expression carries the block sign.
#[derive(Debug, Clone)]
pub struct PlantedGraph {
    pub graph: TosgGraph,
    /// Block of each protein, in protein order.
    pub blocks: Vec<usize>,
    /// `N × M` per-entity features; protein columns are zero.
    pub features: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub n_proteins: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub n_samples: usize,
    /// Standard deviation of the per-sample expression noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            n_proteins: 200,
            p_in: 0.15,
            p_out: 0.01,
            n_samples: 4,
            noise: 0.3,
            seed: 0,
        }
    }
}

pub fn planted_two_block(spec: &PlantedSpec) -> Result<PlantedGraph> {
    let n = spec.n_proteins;
    let mut r = rng::seeded(spec.seed);
    let blocks: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let mapping: Vec<MappingRow> = (0..n)
        .map(|i| MappingRow {
            feature_id: format!("F{i:04}"),
            transcript_id: format!("T{i:04}"),
            protein_id: format!("P{i:04}"),
            gene: Some(format!("G{i:04}")),
        })
        .collect();
    let mut ppi = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if blocks[i] == blocks[j] { spec.p_in } else { spec.p_out };
            if r.gen::<f64>() < p {
                let (a, b) = if r.gen::<bool>() { (i, j) } else { (j, i) };
                ppi.push(PpiRow {
                    src_protein: format!("P{a:04}"),
                    dst_protein: format!("P{b:04}"),
                });
            }
        }
    }
    let text = synthetic_text(2 * n, &mut r, |e| {
        if e < n {
            format!("T{e:04}")
        } else {
            format!("P{:04}", e - n)
        }
    });
    let graph = build_graph(&mapping, &ppi, Some(text))?;
    let m = graph.num_entities();
    let features = Matrix::from_fn(spec.n_samples, m, |_, j| {
        if j < n {
            let sign = if blocks[j] == 0 { 1.0 } else { -1.0 };
            sign + spec.noise * rng::normal(&mut r)
        } else {
            0.0
        }
    });
    Ok(PlantedGraph {
        graph,
        blocks,
        features,
    })
}

const AMINO: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

/// Names from `name_of`, a templated description and a random residue string.
fn synthetic_text(m: usize, r: &mut rng::SeededRng, name_of: impl Fn(usize) -> String) -> TextBundle {
    let mut t = TextBundle::default();
    for e in 0..m {
        let name = name_of(e);
        t.descriptions.push(format!("synthetic entity {name}"));
        t.sequences
            .push((0..24).map(|_| AMINO[rng::index(r, AMINO.len())] as char).collect());
        t.names.push(name);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub n_genes: usize,
    pub n_donors: usize,
    pub cells_per_donor: usize,
    /// Transcripts whose mean is multiplied by `shift` in disease donors.
    pub n_planted: usize,
    pub shift: f64,
    pub ppi_prob: f64,
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_genes: 40,
            n_donors: 12,
            cells_per_donor: 10,
            n_planted: 5,
            shift: 4.0,
            ppi_prob: 0.08,
            shard_size: 32,
            seed: 0,
        }
    }
}

pub const TOY_DISEASE: &str = "toy disease";
pub const TOY_CONTROL: &str = "normal";
pub const TOY_STAGES: [&str; 4] = ["child", "adolescent", "adult", "elderly"];

/// Count matrix, attribute table and graph inputs for a two-class cohort.
/// Donors alternate between the control and disease labels; every cell of
/// a disease donor over-expresses the planted transcripts.
#[derive(Debug, Clone)]
pub struct ToyCohort {
    pub counts: Matrix<f32>,
    pub records: Vec<AttributeRecord>,
    pub mapping: Vec<MappingRow>,
    pub ppi: Vec<PpiRow>,
    pub text: TextBundle,
    /// Feature columns carrying the class signal.
    pub planted: Vec<usize>,
}

pub fn toy_cohort(spec: &ToySpec) -> Result<ToyCohort> {
    if spec.n_planted > spec.n_genes || spec.n_genes == 0 || spec.shard_size == 0 {
        return Err(Error::Config(
            "toy cohort needs n_planted ≤ n_genes, n_genes ≥ 1, shard_size ≥ 1".into(),
        ));
    }
    let mut r = rng::seeded(spec.seed);
    let g = spec.n_genes;
    // the last two transcripts share a gene
    let gene_of = |i: usize| if g >= 2 && i == g - 1 { g - 2 } else { i };
    let mut mapping: Vec<MappingRow> = (0..g)
        .map(|i| MappingRow {
            feature_id: format!("F{i:03}"),
            transcript_id: format!("T{i:03}"),
            protein_id: format!("P{:03}", gene_of(i)),
            gene: Some(format!("G{:03}", gene_of(i))),
        })
        .collect();
    // one protein without a measured transcript
    mapping.push(MappingRow {
        feature_id: String::new(),
        transcript_id: String::new(),
        protein_id: format!("P{g:03}"),
        gene: Some(format!("G{g:03}")),
    });
    let proteins: BTreeSet<String> = mapping.iter().map(|m| m.protein_id.clone()).collect();
    let proteins: Vec<String> = proteins.into_iter().collect();
    let mut ppi = Vec::new();
    for (a, pa) in proteins.iter().enumerate() {
        for pb in &proteins[a + 1..] {
            if r.gen::<f64>() < spec.ppi_prob {
                let (s, d) = if r.gen::<bool>() { (pa, pb) } else { (pb, pa) };
                ppi.push(PpiRow {
                    src_protein: s.clone(),
                    dst_protein: d.clone(),
                });
            }
        }
    }
    // keep the planted proteins connected to each other
    for w in 0..spec.n_planted.saturating_sub(1) {
        let e = PpiRow {
            src_protein: format!("P{:03}", gene_of(w)),
            dst_protein: format!("P{:03}", gene_of(w + 1)),
        };
        if e.src_protein != e.dst_protein && !ppi.contains(&e) {
            ppi.push(e);
        }
    }

    let base: Vec<f64> = (0..g).map(|_| 4.0 * (0.5 * rng::normal(&mut r)).exp()).collect();
    let tissues = ["lung", "liver"];
    let cell_types = ["T cell", "B cell", "macrophage"];
    let n = spec.n_donors * spec.cells_per_donor;
    let mut counts = Matrix::<f32>::zeros(n, g);
    let mut records = Vec::with_capacity(n);
    for d in 0..spec.n_donors {
        let disease = d % 2 == 1;
        let stage = TOY_STAGES[rng::index(&mut r, TOY_STAGES.len())];
        let sex = if r.gen::<bool>() { Sex::Female } else { Sex::Male };
        let tissue = tissues[(d / 2) % 2];
        for _ in 0..spec.cells_per_donor {
            let row = records.len();
            for (j, &b) in base.iter().enumerate() {
                let lam = b * if disease && j < spec.n_planted { spec.shift } else { 1.0 };
                let v = (lam + lam.sqrt() * rng::normal(&mut r)).round().max(0.0);
                counts.set(row, j, v as f32);
            }
            let missing_stage = rng::index(&mut r, 20) == 0;
            records.push(AttributeRecord {
                source: Some("synthetic".into()),
                dataset_id: format!("D{}", d % 3),
                suspension_type: if rng::index(&mut r, 4) == 0 {
                    SuspensionType::Nucleus
                } else {
                    SuspensionType::Cell
                },
                tissue_general: tissue.into(),
                tissue: Some(format!("{tissue} parenchyma")),
                matrix_file_path: shard_file_name(row / spec.shard_size),
                matrix_row_idx: row % spec.shard_size,
                donor_id: format!("donor{d:02}"),
                cmt_id: None,
                cmt_name: Some(cell_types[rng::index(&mut r, cell_types.len())].into()),
                disease_bmg_name: if disease { TOY_DISEASE } else { TOY_CONTROL }.into(),
                disease_bmg_id: None,
                development_stage_category: (!missing_stage).then(|| stage.to_string()),
                sex_normalized: sex,
            });
        }
    }
    let mut text_names: Vec<String> = (0..g).map(|i| format!("T{i:03}")).collect();
    text_names.extend(proteins.iter().cloned());
    let text = synthetic_text(text_names.len(), &mut r, |e| text_names[e].clone());
    Ok(ToyCohort {
        counts,
        records,
        mapping,
        ppi,
        text,
        planted: (0..spec.n_planted).collect(),
    })
}
