//! Text-omic signaling graph assembly.
//!
//! Entities are laid out densely: transcripts occupy `[0, M_t)` and virtual
//! protein entities `[M_t, M)`. Internal edges run transcript → protein and
//! PPI edges protein → protein, both stored as directed pairs in input order.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::npy;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRow {
    #[serde(default)]
    pub feature_id: String,
    #[serde(default)]
    pub transcript_id: String,
    #[serde(default)]
    pub protein_id: String,
    /// Gene symbol used when results are summarized per gene.
    #[serde(default)]
    pub gene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PpiRow {
    pub src_protein: String,
    pub dst_protein: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTable {
    pub transcript_ids: Vec<String>,
    pub protein_ids: Vec<String>,
    /// Measured feature ids in matrix column order (size M_0).
    pub feature_ids: Vec<String>,
    /// Measured feature index → transcript entity index.
    pub feature_to_transcript: Vec<usize>,
    /// Gene symbol per entity (size M).
    pub genes: Vec<String>,
}

impl EntityTable {
    pub fn num_transcripts(&self) -> usize {
        self.transcript_ids.len()
    }

    pub fn num_proteins(&self) -> usize {
        self.protein_ids.len()
    }

    pub fn num_entities(&self) -> usize {
        self.transcript_ids.len() + self.protein_ids.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_protein(&self, entity: usize) -> bool {
        entity >= self.num_transcripts() && entity < self.num_entities()
    }

    pub fn entity_id(&self, entity: usize) -> &str {
        let mt = self.num_transcripts();
        if entity < mt {
            &self.transcript_ids[entity]
        } else {
            &self.protein_ids[entity - mt]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeSets {
    /// (transcript entity, protein entity)
    pub internal: Vec<(usize, usize)>,
    /// (protein entity, protein entity), directed as given
    pub ppi: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextBundle {
    pub names: Vec<String>,
    pub descriptions: Vec<String>,
    pub sequences: Vec<String>,
}

impl TextBundle {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn check_len(&self, m: usize) -> Result<()> {
        if self.names.len() != m || self.descriptions.len() != m || self.sequences.len() != m {
            return Err(Error::Shape(format!(
                "text bundle has {}/{}/{} entries, graph has {m} entities",
                self.names.len(),
                self.descriptions.len(),
                self.sequences.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TosgGraph {
    pub entities: EntityTable,
    pub edges: EdgeSets,
    pub text: TextBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCounts {
    pub num_transcripts: usize,
    pub num_proteins: usize,
    pub num_entities: usize,
    pub num_features: usize,
    pub internal_edges: usize,
    pub ppi_edges: usize,
}

/// Size of the published full-scale graph, for reference only.
pub mod full_scale {
    pub const NUM_ENTITIES: usize = 533_458;
    pub const INTERNAL_EDGES: usize = 152_585;
    pub const PPI_EDGES: usize = 16_484_820;
    pub const META_CELLS: usize = 395_317;
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    ids.push(id.to_string());
    index.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

fn row_err(context: &str, row: usize, msg: impl Into<String>) -> Error {
    Error::Row {
        context: context.into(),
        row,
        msg: msg.into(),
    }
}

/// Builds the entity table and both edge sets. `text` may be empty, in which
/// case names default to entity ids and descriptions/sequences to "".
pub fn build_graph(mapping: &[MappingRow], ppi: &[PpiRow], text: Option<TextBundle>) -> Result<TosgGraph> {
    let mut transcripts = Vec::new();
    let mut t_index = HashMap::new();
    let mut proteins = Vec::new();
    let mut p_index = HashMap::new();
    let mut features = Vec::new();
    let mut f_index = HashMap::new();
    let mut feature_target: Vec<usize> = Vec::new();
    let mut internal_local: Vec<(usize, usize)> = Vec::new();
    let mut seen_internal = HashSet::new();
    let mut transcript_feature: HashMap<usize, usize> = HashMap::new();
    let mut gene_hint_t: HashMap<usize, String> = HashMap::new();
    let mut gene_hint_p: HashMap<usize, String> = HashMap::new();

    for (row, m) in mapping.iter().enumerate() {
        let (f, t, p) = (m.feature_id.trim(), m.transcript_id.trim(), m.protein_id.trim());
        if t.is_empty() && p.is_empty() {
            return Err(row_err(
                "mapping table",
                row,
                "row declares neither a transcript nor a protein",
            ));
        }
        let t_idx = (!t.is_empty()).then(|| intern(&mut transcripts, &mut t_index, t));
        let p_idx = (!p.is_empty()).then(|| intern(&mut proteins, &mut p_index, p));
        let gene = m.gene.as_deref().map(str::trim).filter(|g| !g.is_empty());
        if let (Some(g), Some(ti)) = (gene, t_idx) {
            gene_hint_t.entry(ti).or_insert_with(|| g.to_string());
        }
        if let (Some(g), Some(pi)) = (gene, p_idx) {
            gene_hint_p.entry(pi).or_insert_with(|| g.to_string());
        }
        if !f.is_empty() {
            let ti = t_idx.ok_or_else(|| row_err("mapping table", row, format!("feature {f} has no transcript")))?;
            let before = features.len();
            let fi = intern(&mut features, &mut f_index, f);
            if fi == before {
                feature_target.push(ti);
            } else if feature_target[fi] != ti {
                return Err(row_err(
                    "mapping table",
                    row,
                    format!("feature {f} is mapped to two transcripts"),
                ));
            }
            if let Some(&other) = transcript_feature.get(&ti) {
                if other != fi {
                    return Err(row_err(
                        "mapping table",
                        row,
                        format!("transcript {t} is measured by two features"),
                    ));
                }
            }
            transcript_feature.insert(ti, fi);
        }
        if let (Some(ti), Some(pi)) = (t_idx, p_idx) {
            if seen_internal.insert((ti, pi)) {
                internal_local.push((ti, pi));
            } else {
                return Err(row_err(
                    "mapping table",
                    row,
                    format!("duplicate internal edge {t} -> {p}"),
                ));
            }
        }
    }

    let mt = transcripts.len();
    let mut ppi_edges = Vec::with_capacity(ppi.len());
    let mut seen_ppi = HashSet::new();
    for (row, e) in ppi.iter().enumerate() {
        let lookup = |id: &str| {
            p_index.get(id.trim()).copied().ok_or_else(|| {
                row_err(
                    "PPI list",
                    row,
                    format!("protein `{}` is not declared in the mapping table", id.trim()),
                )
            })
        };
        let a = lookup(&e.src_protein)?;
        let b = lookup(&e.dst_protein)?;
        if a == b {
            return Err(row_err("PPI list", row, format!("self-loop on {}", e.src_protein)));
        }
        if !seen_ppi.insert((a, b)) {
            return Err(row_err(
                "PPI list",
                row,
                format!("duplicate edge {} -> {}", e.src_protein, e.dst_protein),
            ));
        }
        ppi_edges.push((mt + a, mt + b));
    }

    // gene per entity: explicit gene column, else the linked protein id for
    // transcripts, else the entity id itself
    let mut linked_protein: HashMap<usize, usize> = HashMap::new();
    for &(t, p) in &internal_local {
        linked_protein.entry(t).or_insert(p);
    }
    let mut genes = Vec::with_capacity(mt + proteins.len());
    for (t, id) in transcripts.iter().enumerate() {
        let g = gene_hint_t
            .get(&t)
            .cloned()
            .or_else(|| linked_protein.get(&t).and_then(|p| gene_hint_p.get(p).cloned()))
            .or_else(|| linked_protein.get(&t).map(|&p| proteins[p].clone()))
            .unwrap_or_else(|| id.clone());
        genes.push(g);
    }
    for (p, id) in proteins.iter().enumerate() {
        genes.push(gene_hint_p.get(&p).cloned().unwrap_or_else(|| id.clone()));
    }

    let entities = EntityTable {
        transcript_ids: transcripts,
        protein_ids: proteins,
        feature_ids: features,
        feature_to_transcript: feature_target,
        genes,
    };
    let m = entities.num_entities();
    let text = match text {
        Some(t) => {
            t.check_len(m)?;
            t
        }
        None => TextBundle {
            names: (0..m).map(|e| entities.entity_id(e).to_string()).collect(),
            descriptions: vec![String::new(); m],
            sequences: vec![String::new(); m],
        },
    };
    Ok(TosgGraph {
        edges: EdgeSets {
            internal: internal_local.into_iter().map(|(t, p)| (t, mt + p)).collect(),
            ppi: ppi_edges,
        },
        entities,
        text,
    })
}

impl TosgGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.num_entities()
    }

    pub fn counts(&self) -> GraphCounts {
        GraphCounts {
            num_transcripts: self.entities.num_transcripts(),
            num_proteins: self.entities.num_proteins(),
            num_entities: self.entities.num_entities(),
            num_features: self.entities.num_features(),
            internal_edges: self.edges.internal.len(),
            ppi_edges: self.edges.ppi.len(),
        }
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let mt = self.entities.num_transcripts();
        let m = self.entities.num_entities();
        if self.entities.genes.len() != m {
            return Err(Error::Graph("gene list length differs from entity count".into()));
        }
        if self.entities.feature_to_transcript.len() != self.entities.feature_ids.len() {
            return Err(Error::Graph("feature map length differs from feature count".into()));
        }
        if self.entities.feature_to_transcript.iter().any(|&t| t >= mt) {
            return Err(Error::Graph("feature mapped outside the transcript range".into()));
        }
        for (i, &(t, p)) in self.edges.internal.iter().enumerate() {
            if t >= mt || p < mt || p >= m {
                return Err(Error::Graph(format!(
                    "internal edge {i} ({t}, {p}) is not transcript -> protein"
                )));
            }
        }
        let mut seen = HashSet::new();
        for (i, &(a, b)) in self.edges.ppi.iter().enumerate() {
            if a < mt || b < mt || a >= m || b >= m {
                return Err(Error::Graph(format!(
                    "PPI edge {i} ({a}, {b}) leaves the protein range"
                )));
            }
            if a == b {
                return Err(Error::Graph(format!("PPI edge {i} is a self-loop")));
            }
            if !seen.insert((a, b)) {
                return Err(Error::Graph(format!("PPI edge {i} is duplicated")));
            }
        }
        self.text.check_len(m)
    }

    /// Undirected PPI degree (distinct neighbours) for every entity.
    pub fn ppi_degrees(&self) -> Vec<f64> {
        undirected_degrees(self.num_entities(), &self.edges.ppi)
    }
}

pub fn undirected_degrees(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut nbrs: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for &(a, b) in edges {
        nbrs[a].insert(b);
        nbrs[b].insert(a);
    }
    nbrs.iter().map(|s| s.len() as f64).collect()
}

/// Lays measured features out on the entity axis. Unmapped transcripts and
/// every protein column stay zero.
pub fn expand_features(block: &Matrix<f32>, entities: &EntityTable) -> Result<Matrix> {
    if block.cols() != entities.num_features() {
        return Err(Error::Shape(format!(
            "expression block has {} columns, graph measures {} features",
            block.cols(),
            entities.num_features()
        )));
    }
    let mut out = Matrix::zeros(block.rows(), entities.num_entities());
    for i in 0..block.rows() {
        let src = block.row(i);
        let dst = out.row_mut(i);
        for (f, &t) in entities.feature_to_transcript.iter().enumerate() {
            dst[t] = f64::from(src[f]);
        }
    }
    Ok(out)
}

/// Which text field an embedding row was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextField {
    Name = 1,
    Description = 2,
    Sequence = 3,
}

/// Frozen text/sequence embeddings, one `M × dim` matrix per field.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub names: Matrix,
    pub descriptions: Matrix,
    pub sequences: Matrix,
}

impl TextEmbeddings {
    pub fn dim(&self) -> usize {
        self.names.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.names.rows()
    }

    pub fn zeros(m: usize, dim: usize) -> Self {
        Self {
            names: Matrix::zeros(m, dim),
            descriptions: Matrix::zeros(m, dim),
            sequences: Matrix::zeros(m, dim),
        }
    }

    pub fn fields(&self) -> [&Matrix; 3] {
        [&self.names, &self.descriptions, &self.sequences]
    }

    /// Loads externally computed embeddings; row order must be entity order.
    pub fn from_npy(names: &Path, descriptions: &Path, sequences: &Path, m: usize) -> Result<Self> {
        let load = |p: &Path| -> Result<Matrix> {
            let e: Matrix = (&npy::read_f32(p)?).into();
            if e.rows() != m {
                return Err(Error::Shape(format!(
                    "{} has {} rows, graph has {m} entities",
                    p.display(),
                    e.rows()
                )));
            }
            Ok(e)
        };
        let out = Self {
            names: load(names)?,
            descriptions: load(descriptions)?,
            sequences: load(sequences)?,
        };
        if out.descriptions.cols() != out.dim() || out.sequences.cols() != out.dim() {
            return Err(Error::Shape("embedding files disagree on width".into()));
        }
        Ok(out)
    }
}

/// 64-bit FNV-1a; stable across platforms and compiler versions.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit vector derived from `(seed, field, text)`; zero for empty text.
pub fn pseudo_embed_one(text: &str, field: TextField, dim: usize, seed: u64) -> Vec<f64> {
    if text.is_empty() {
        return vec![0.0; dim];
    }
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(&[field as u8], h);
    h = fnv1a(text.as_bytes(), h);
    let mut r = rng::seeded(h);
    let mut v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Deterministic stand-in for frozen language/sequence encoders.
pub fn pseudo_text_embed(text: &TextBundle, dim: usize, seed: u64) -> Result<TextEmbeddings> {
    if dim == 0 {
        return Err(Error::Config("embedding width must be at least 1".into()));
    }
    let embed = |items: &[String], field| -> Matrix {
        let mut m = Matrix::zeros(items.len(), dim);
        for (i, s) in items.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&pseudo_embed_one(s, field, dim, seed));
        }
        m
    };
    Ok(TextEmbeddings {
        names: embed(&text.names, TextField::Name),
        descriptions: embed(&text.descriptions, TextField::Description),
        sequences: embed(&text.sequences, TextField::Sequence),
    })
}

pub fn read_mapping<R: std::io::Read>(reader: R) -> Result<Vec<MappingRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let missing: Vec<String> = ["feature_id", "transcript_id", "protein_id"]
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| row_err("mapping table", i, e.to_string())))
        .collect()
}

pub fn read_ppi<R: std::io::Read>(reader: R) -> Result<Vec<PpiRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let missing: Vec<String> = ["src_protein", "dst_protein"]
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| row_err("PPI list", i, e.to_string())))
        .collect()
}

#[derive(Debug, Deserialize)]
struct TextRow {
    entity_id: String,
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    sequence: String,
}

/// Text bundle from a CSV keyed by entity id. Entities without a row get
/// their id as name and empty description/sequence.
pub fn read_text_bundle<R: std::io::Read>(reader: R, entities: &EntityTable) -> Result<TextBundle> {
    let m = entities.num_entities();
    let index: HashMap<&str, usize> = (0..m).map(|e| (entities.entity_id(e), e)).collect();
    let mut bundle = TextBundle {
        names: (0..m).map(|e| entities.entity_id(e).to_string()).collect(),
        descriptions: vec![String::new(); m],
        sequences: vec![String::new(); m],
    };
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, r) in rdr.deserialize::<TextRow>().enumerate() {
        let r = r.map_err(|e| row_err("text table", i, e.to_string()))?;
        let e = *index
            .get(r.entity_id.as_str())
            .ok_or_else(|| row_err("text table", i, format!("unknown entity `{}`", r.entity_id)))?;
        if !r.name.is_empty() {
            bundle.names[e] = r.name;
        }
        bundle.descriptions[e] = r.description;
        bundle.sequences[e] = r.sequence;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: &str, t: &str, p: &str) -> MappingRow {
        MappingRow {
            feature_id: f.into(),
            transcript_id: t.into(),
            protein_id: p.into(),
            gene: None,
        }
    }

    fn ppi(a: &str, b: &str) -> PpiRow {
        PpiRow {
            src_protein: a.into(),
            dst_protein: b.into(),
        }
    }

    fn three_by_three() -> Vec<MappingRow> {
        vec![row("f1", "t1", "p1"), row("f2", "t2", "p2"), row("f3", "t3", "p3")]
    }

    #[test]
    fn three_transcripts_three_proteins() {
        let g = build_graph(&three_by_three(), &[], None).unwrap();
        let c = g.counts();
        assert_eq!(c.internal_edges, 3);
        assert_eq!(c.num_entities, 6);
        assert_eq!(c.ppi_edges, 0);
        assert_eq!(g.edges.internal, vec![(0, 3), (1, 4), (2, 5)]);
        g.validate().unwrap();
    }

    #[test]
    fn ppi_edges_live_in_the_protein_range() {
        let g = build_graph(
            &three_by_three(),
            &[ppi("p1", "p2"), ppi("p2", "p1"), ppi("p3", "p1")],
            None,
        )
        .unwrap();
        assert_eq!(g.edges.ppi, vec![(3, 4), (4, 3), (5, 3)]);
        assert_eq!(g.ppi_degrees(), vec![0.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn dangling_and_duplicate_ppi_rows_are_rejected() {
        match build_graph(&three_by_three(), &[ppi("p1", "p2"), ppi("p1", "p9")], None) {
            Err(Error::Row { row, msg, .. }) => {
                assert_eq!(row, 1);
                assert!(msg.contains("p9"));
            }
            other => panic!("{other:?}"),
        }
        assert!(build_graph(&three_by_three(), &[ppi("p1", "p2"), ppi("p1", "p2")], None).is_err());
        assert!(build_graph(&three_by_three(), &[ppi("p1", "p1")], None).is_err());
    }

    #[test]
    fn expansion_places_features_and_zeroes_proteins() {
        let mut mapping = three_by_three();
        mapping.push(row("", "t4", "p3"));
        let g = build_graph(&mapping, &[], None).unwrap();
        let block = Matrix::<f32>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let x = expand_features(&block, &g.entities).unwrap();
        assert_eq!(x.shape(), (2, 7));
        assert_eq!(x.row(1), &[4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(expand_features(&Matrix::<f32>::zeros(1, 2), &g.entities).is_err());
    }

    #[test]
    fn pseudo_embeddings_are_deterministic_and_zero_for_empty() {
        let text = TextBundle {
            names: vec!["TP53".into(), "TP53".into(), "".into()],
            descriptions: vec!["".into(), "kinase".into(), "".into()],
            sequences: vec!["AUG".into(), "".into(), "".into()],
        };
        let e = pseudo_text_embed(&text, 16, 7).unwrap();
        assert_eq!(e.names.row(0), e.names.row(1));
        assert!(e.names.row(2).iter().all(|v| *v == 0.0));
        assert!(e.descriptions.row(0).iter().all(|v| *v == 0.0));
        let n: f64 = e.sequences.row(0).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        // field kind is part of the hash
        assert_ne!(
            pseudo_embed_one("x", TextField::Name, 8, 1),
            pseudo_embed_one("x", TextField::Description, 8, 1)
        );
    }

    #[test]
    fn reads_csv_tables() {
        let m = read_mapping("feature_id,transcript_id,protein_id,gene\nf1,t1,p1,TP53\n,,p2,\n".as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].gene.as_deref(), Some("TP53"));
        let p = read_ppi("src_protein,dst_protein\np1,p2\n".as_bytes()).unwrap();
        let g = build_graph(&m, &p, None).unwrap();
        assert_eq!(g.entities.genes, vec!["TP53", "TP53", "p2"]);
        assert!(read_ppi("a,b\n".as_bytes()).is_err());
        let text = read_text_bundle(
            "entity_id,name,description,sequence\np2,MDM2,ubiquitin ligase,MCNT\n".as_bytes(),
            &g.entities,
        )
        .unwrap();
        assert_eq!(text.names, vec!["t1", "p1", "MDM2"]);
        assert_eq!(text.sequences[2], "MCNT");
    }
}
