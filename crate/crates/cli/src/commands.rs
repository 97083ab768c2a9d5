use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use tosg_core::checkpoint::{load_pretrained, save_head, save_pretrained};
use tosg_core::fm_model::{embed_all, train, write_history, ModelConfig};
use tosg_core::graph::{
    build_graph, pseudo_text_embed, read_mapping, read_ppi, read_text_bundle, TextEmbeddings, TosgGraph,
};
use tosg_core::inference::{accuracy, encode_labels, write_core_dot, write_core_tsv, write_node_scores};
use tosg_core::npy;
use tosg_core::pipeline::{expression_views, full_context, run_core, CoreConfig, ExpressionViews};
use tosg_core::preprocess::{preprocess, PreprocessConfig, DEFAULT_TARGET_SUM};
use tosg_core::retrieval::{
    builtin_task, donor_split, label_values, phase1_extract, phase2_balance, subsample, task_label_column,
    upsample_rare, Cohort, Query, SampleSpec, SplitConfig, Stratum, TaskConfig, UpsampleReport, DEFAULT_MIN_COUNT,
};
use tosg_core::shard_store::{
    load_attributes, shard_file_name, write_attributes, write_shards, AttributeRecord, ShardStore, DEFAULT_SHARD_SIZE,
};
use tosg_core::synthetic::{toy_cohort, ToySpec};
use tosg_core::{rng, Error, Matrix};

use crate::config::usage;

pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const GRAPH_FILE: &str = "graph.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())).into())
}

fn write_lines(path: &Path, rows: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(rows.len() * 6);
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("missing required setting `{name}` (flag or config file)")).into())
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a T,
}

fn write_run_config<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    write_json(
        &dir.join(RUN_CONFIG_FILE),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
        },
    )
}

/// Sidecar describing what the stored matrix holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// True when rows are already log-normalized (meta-cell output).
    pub normalized: bool,
    pub target_sum: f64,
    pub num_rows: usize,
    pub num_features: usize,
}

pub struct Dataset {
    pub store: ShardStore,
    pub records: Vec<AttributeRecord>,
    pub graph: TosgGraph,
    pub info: DatasetInfo,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let store = ShardStore::open(dir)?;
        let records = load_attributes(&dir.join(ATTRIBUTES_FILE))?;
        let graph: TosgGraph = read_json(&dir.join(GRAPH_FILE))?;
        graph.validate()?;
        let info: DatasetInfo = read_json(&dir.join(DATASET_FILE))?;
        Ok(Dataset {
            store,
            records,
            graph,
            info,
        })
    }

    /// Stored rows for the given record positions.
    pub fn read(&self, records: &[usize]) -> Result<Matrix<f32>> {
        if let Some(&bad) = records.iter().find(|&&r| r >= self.records.len()) {
            return Err(usage(format!("record {bad} is out of range ({} records)", self.records.len())).into());
        }
        let picked: Vec<AttributeRecord> = records.iter().map(|&r| self.records[r].clone()).collect();
        let global = self.store.resolve_records(&picked)?;
        Ok(self.store.read_rows(&global)?.values)
    }

    pub fn views(&self, records: &[usize]) -> Result<ExpressionViews> {
        let values = self.read(records)?;
        let target = (!self.info.normalized).then_some(self.info.target_sum);
        Ok(expression_views(&values, &self.graph.entities, target)?)
    }
}

fn write_dataset(
    dir: &Path,
    matrix: &Matrix<f32>,
    records: &[AttributeRecord],
    graph: &TosgGraph,
    info: &DatasetInfo,
    shard_size: usize,
) -> Result<()> {
    write_shards(matrix, shard_size, dir)?;
    write_attributes(&dir.join(ATTRIBUTES_FILE), records)?;
    write_json(&dir.join(GRAPH_FILE), graph)?;
    write_json(&dir.join(DATASET_FILE), info)
}

// ---------------------------------------------------------------- build

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub matrix: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub ppi: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub shard_size: usize,
    pub target_sum: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            matrix: None,
            attributes: None,
            mapping: None,
            ppi: None,
            text: None,
            shard_size: DEFAULT_SHARD_SIZE,
            target_sum: DEFAULT_TARGET_SUM,
            output_dir: None,
        }
    }
}

#[derive(Serialize)]
struct BuildReport {
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    graph: Option<tosg_core::graph::GraphCounts>,
    matrix_rows: usize,
    attribute_rows: usize,
    unreferenced_rows: usize,
}

fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            usage(format!("{}: file not found", path.display())).into()
        } else {
            anyhow!(e).context(format!("opening {}", path.display()))
        }
    })
}

/// Reads a count matrix from `.npy` (columns in mapping feature order) or
/// CSV with a header of feature ids (reordered to mapping order).
fn read_matrix(path: &Path, feature_ids: &[String]) -> Result<Matrix<f32>> {
    let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy {
        open_file(path)?;
        let m = npy::read_f32(path)?;
        if m.cols() != feature_ids.len() {
            return Err(Error::Shape(format!(
                "{} has {} columns, mapping declares {} features",
                path.display(),
                m.cols(),
                feature_ids.len()
            ))
            .into());
        }
        return Ok(m);
    }
    let mut rdr = csv::Reader::from_reader(open_file(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let position: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let cols: Vec<usize> = feature_ids
        .iter()
        .map(|f| {
            position
                .get(f.as_str())
                .copied()
                .ok_or_else(|| Error::MissingColumns(vec![f.clone()]))
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &c in &cols {
            let cell = rec.get(c).unwrap_or("");
            let v: f32 = cell.trim().parse().map_err(|_| Error::Row {
                context: format!("matrix {}", path.display()),
                row: i,
                msg: format!("`{cell}` is not a number"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols.len(), data)?)
}

pub fn cmd_build(cfg: &BuildConfig) -> Result<()> {
    let out = required(&cfg.output_dir, "output_dir")?;
    if cfg.shard_size == 0 {
        return Err(usage("shard_size must be at least 1").into());
    }
    create_dir(out)?;
    let mut report = BuildReport {
        ok: false,
        error: None,
        graph: None,
        matrix_rows: 0,
        attribute_rows: 0,
        unreferenced_rows: 0,
    };
    let result = (|| -> Result<(Matrix<f32>, Vec<AttributeRecord>, TosgGraph)> {
        let mapping = read_mapping(open_file(required(&cfg.mapping, "mapping")?)?)?;
        let ppi = read_ppi(open_file(required(&cfg.ppi, "ppi")?)?)?;
        let mut graph = build_graph(&mapping, &ppi, None)?;
        if let Some(t) = &cfg.text {
            graph.text = read_text_bundle(open_file(t)?, &graph.entities)?;
        }
        graph.validate()?;
        report.graph = Some(graph.counts());
        let matrix = read_matrix(required(&cfg.matrix, "matrix")?, &graph.entities.feature_ids)?;
        report.matrix_rows = matrix.rows();
        let mut records = load_attributes(required(&cfg.attributes, "attributes")?)?;
        report.attribute_rows = records.len();
        let mut used = BTreeSet::new();
        for (i, r) in records.iter_mut().enumerate() {
            let row = r.matrix_row_idx;
            if row >= matrix.rows() {
                return Err(Error::Row {
                    context: "attribute table".into(),
                    row: i,
                    msg: format!("matrix_row_idx {row} exceeds the matrix's {} rows", matrix.rows()),
                }
                .into());
            }
            if !used.insert(row) {
                return Err(Error::Row {
                    context: "attribute table".into(),
                    row: i,
                    msg: format!("matrix_row_idx {row} is referenced twice"),
                }
                .into());
            }
            r.matrix_file_path = shard_file_name(row / cfg.shard_size);
            r.matrix_row_idx = row % cfg.shard_size;
        }
        report.unreferenced_rows = matrix.rows() - used.len();
        Ok((matrix, records, graph))
    })();
    let (matrix, records, graph) = match result {
        Ok(v) => v,
        Err(e) => {
            report.error = Some(format!("{e:#}"));
            write_json(&out.join("validation_report.json"), &report)?;
            return Err(e);
        }
    };
    let info = DatasetInfo {
        normalized: false,
        target_sum: cfg.target_sum,
        num_rows: matrix.rows(),
        num_features: matrix.cols(),
    };
    write_dataset(out, &matrix, &records, &graph, &info, cfg.shard_size)?;
    report.ok = true;
    write_json(&out.join("validation_report.json"), &report)?;
    write_run_config(out, "build", cfg)?;
    println!(
        "built {} rows × {} features, {} entities, {} PPI edges into {}",
        matrix.rows(),
        matrix.cols(),
        graph.num_entities(),
        graph.edges.ppi.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PreprocessRun {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub shard_size: Option<usize>,
    pub preprocess: PreprocessConfig,
}

#[derive(Serialize)]
struct PreprocessSummary {
    metacells: usize,
    hvg_features: Vec<String>,
    explained_variance: Vec<f64>,
    rank_deficient: bool,
    members: Vec<Vec<usize>>,
}

pub fn cmd_preprocess(cfg: &PreprocessRun) -> Result<()> {
    let data = Dataset::open(required(&cfg.data_dir, "data_dir")?)?;
    let out = required(&cfg.output_dir, "output_dir")?;
    if data.info.normalized {
        return Err(usage("dataset is already preprocessed").into());
    }
    let mut pcfg = cfg.preprocess.clone();
    pcfg.target_sum = data.info.target_sum;
    let all: Vec<usize> = (0..data.records.len()).collect();
    let counts = Matrix::from(&data.read(&all)?);
    let pre = preprocess(&counts, &data.records, &pcfg)?;
    let shard_size = cfg.shard_size.unwrap_or(data.store.manifest().shard_size);
    let rows: Vec<Vec<f32>> = pre
        .metacells
        .iter()
        .map(|m| m.expression.iter().map(|&v| v as f32).collect())
        .collect();
    let matrix = Matrix::from_rows(&rows)?;
    let records: Vec<AttributeRecord> = pre
        .metacells
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r = m.attributes.clone();
            r.matrix_file_path = shard_file_name(i / shard_size);
            r.matrix_row_idx = i % shard_size;
            r
        })
        .collect();
    create_dir(out)?;
    let info = DatasetInfo {
        normalized: true,
        target_sum: pcfg.target_sum,
        num_rows: matrix.rows(),
        num_features: matrix.cols(),
    };
    write_dataset(out, &matrix, &records, &data.graph, &info, shard_size)?;
    let summary = PreprocessSummary {
        metacells: pre.metacells.len(),
        hvg_features: pre
            .hvg
            .iter()
            .map(|&c| data.graph.entities.feature_ids[c].clone())
            .collect(),
        explained_variance: pre.pca.explained_variance.clone(),
        rank_deficient: pre.pca.rank_deficient,
        members: pre.metacells.iter().map(|m| m.member_rows.clone()).collect(),
    };
    write_json(&out.join("preprocess_summary.json"), &summary)?;
    write_run_config(
        out,
        "preprocess",
        &PreprocessRun {
            preprocess: pcfg,
            shard_size: Some(shard_size),
            ..cfg.clone()
        },
    )?;
    println!(
        "grouped {} cells into {} meta-cells in {}",
        counts.rows(),
        pre.metacells.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- query / balance / split

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    #[default]
    Inference,
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub cap: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            test_fraction: 0.2,
            cap: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRun {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub conditions: Query,
    pub task: String,
    /// Replaces the named task's balancing configuration.
    pub task_config: Option<TaskConfig>,
    pub label_column: Option<String>,
    pub sample_ratio: Option<f64>,
    pub sample_size: Option<usize>,
    pub shuffle: bool,
    pub stratified_balancing: bool,
    pub tolerance: i64,
    pub upsample: bool,
    pub extract_mode: ExtractMode,
    pub split: SplitSettings,
    pub upsample_rare: bool,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for QueryRun {
    fn default() -> Self {
        QueryRun {
            data_dir: None,
            output_dir: None,
            conditions: Query::default(),
            task: "disease".into(),
            task_config: None,
            label_column: None,
            sample_ratio: None,
            sample_size: None,
            shuffle: false,
            stratified_balancing: false,
            tolerance: 1,
            upsample: false,
            extract_mode: ExtractMode::Inference,
            split: SplitSettings::default(),
            upsample_rare: false,
            min_count: DEFAULT_MIN_COUNT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortPart {
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
}

/// Retrieved cohort. Rows are positions in the dataset's attribute table;
/// in train mode `rows`/`labels` hold the training side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub mode: ExtractMode,
    pub label_column: String,
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<CohortPart>,
    #[serde(default)]
    pub test_donors: Vec<String>,
    #[serde(default)]
    pub strata: Vec<Stratum>,
    #[serde(default)]
    pub discarded_strata: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsampled: Option<UpsampleReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const COHORT_FILE: &str = "cohort.json";

fn split_cohort(records: &[AttributeRecord], file: &mut CohortFile, settings: &SplitSettings, seed: u64) -> Result<()> {
    let split = donor_split(
        records,
        &file.rows,
        &SplitConfig {
            test_fraction: settings.test_fraction,
            cap: settings.cap,
            seed,
        },
    )?;
    let take = |pos: &[usize]| CohortPart {
        rows: pos.iter().map(|&p| file.rows[p]).collect(),
        labels: pos.iter().map(|&p| file.labels[p].clone()).collect(),
    };
    let train = take(&split.train);
    let test = take(&split.test);
    file.mode = ExtractMode::Train;
    file.rows = train.rows;
    file.labels = train.labels;
    file.test = Some(test);
    file.test_donors = split.test_donors;
    if file.test.as_ref().is_some_and(|t| t.rows.is_empty()) {
        file.warnings
            .push("test split is empty: every donor exceeds the cap".into());
    }
    Ok(())
}

fn write_cohort(out: &Path, file: &CohortFile) -> Result<()> {
    write_json(&out.join(COHORT_FILE), file)?;
    match &file.test {
        Some(test) => {
            write_lines(&out.join("train_rows.txt"), &file.rows)?;
            write_lines(&out.join("test_rows.txt"), &test.rows)?;
        }
        None => write_lines(&out.join("rows.txt"), &file.rows)?,
    }
    for w in &file.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn cmd_query(cfg: &QueryRun, command: &str) -> Result<()> {
    let data_dir = required(&cfg.data_dir, "data_dir")?;
    let out = required(&cfg.output_dir, "output_dir")?;
    let records = load_attributes(&data_dir.join(ATTRIBUTES_FILE))?;
    let spec = SampleSpec::from_options(cfg.sample_ratio, cfg.sample_size)?;
    let q = cfg.conditions.canonical()?;

    let (mut cohort, label_column) = if cfg.stratified_balancing {
        let task = match &cfg.task_config {
            Some(t) => t.clone(),
            None => builtin_task(&cfg.task, cfg.tolerance, cfg.upsample, cfg.seed)?,
        };
        task.validate()?;
        let mut cohort = phase2_balance(&records, &q, &task)?;
        let column = cfg.label_column.clone().unwrap_or_else(|| task.balance_field.clone());
        cohort.labels = label_values(&records, &cohort.rows, &column)?;
        (cohort, column)
    } else {
        let column = match &cfg.label_column {
            Some(c) => c.clone(),
            None => task_label_column(&cfg.task)?.to_string(),
        };
        let rows = phase1_extract(&records, &q)?;
        (Cohort::unbalanced(&records, rows, &column)?, column)
    };
    if let Some(spec) = spec {
        cohort = subsample(&cohort, spec, cfg.seed);
    }
    if cfg.shuffle {
        let mut order: Vec<usize> = (0..cohort.rows.len()).collect();
        rng::shuffle(&mut order, &mut rng::derive(cfg.seed, 0x5f));
        cohort.rows = order.iter().map(|&i| cohort.rows[i]).collect();
        cohort.labels = order.iter().map(|&i| cohort.labels[i].clone()).collect();
    }
    let mut file = CohortFile {
        mode: ExtractMode::Inference,
        label_column,
        rows: cohort.rows,
        labels: cohort.labels,
        strata: cohort.strata,
        discarded_strata: cohort.discarded_strata,
        ..Default::default()
    };
    if file.rows.is_empty() {
        file.warnings
            .push("the query matched no rows; the cohort is empty".into());
    }
    if cfg.extract_mode == ExtractMode::Train && !file.rows.is_empty() {
        split_cohort(&records, &mut file, &cfg.split, cfg.seed)?;
    }
    if cfg.upsample_rare {
        if file.mode == ExtractMode::Train {
            let classes: Vec<String> = file
                .labels
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let (rows, labels, report) = upsample_rare(&file.rows, &file.labels, cfg.min_count, cfg.seed, &classes)?;
            file.rows = rows;
            file.labels = labels;
            file.upsampled = Some(report);
        } else {
            file.warnings
                .push("upsample_rare applies to the training split only; ignored in inference mode".into());
        }
    }
    create_dir(out)?;
    write_cohort(out, &file)?;
    write_run_config(out, command, cfg)?;
    let test = file
        .test
        .as_ref()
        .map_or(String::new(), |t| format!(", {} test", t.rows.len()));
    println!(
        "{command}: {} rows{test} -> {}",
        file.rows.len(),
        out.join(COHORT_FILE).display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitRun {
    pub data_dir: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub split: SplitSettings,
    pub seed: u64,
}

pub fn cmd_split(cfg: &SplitRun) -> Result<()> {
    let records = load_attributes(&required(&cfg.data_dir, "data_dir")?.join(ATTRIBUTES_FILE))?;
    let out = required(&cfg.output_dir, "output_dir")?;
    let mut file: CohortFile = read_json(required(&cfg.cohort, "cohort")?)?;
    if file.mode == ExtractMode::Train {
        return Err(usage("cohort is already split").into());
    }
    if let Some(&bad) = file.rows.iter().find(|&&r| r >= records.len()) {
        return Err(usage(format!("cohort row {bad} is out of range")).into());
    }
    split_cohort(&records, &mut file, &cfg.split, cfg.seed)?;
    create_dir(out)?;
    write_cohort(out, &file)?;
    write_run_config(out, "split", cfg)?;
    println!(
        "split: {} train, {} test -> {}",
        file.rows.len(),
        file.test.as_ref().map_or(0, |t| t.rows.len()),
        out.join(COHORT_FILE).display()
    );
    Ok(())
}

// ---------------------------------------------------------------- pretrain / infer-core

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextSettings {
    /// Width of the pseudo-embeddings when no precomputed files are given.
    pub dim: usize,
    pub seed: u64,
    /// Directory holding names.npy, descriptions.npy and sequences.npy.
    pub npy_dir: Option<PathBuf>,
}

impl Default for TextSettings {
    fn default() -> Self {
        TextSettings {
            dim: 16,
            seed: 0,
            npy_dir: None,
        }
    }
}

fn text_embeddings(graph: &TosgGraph, t: &TextSettings, dim: usize) -> Result<TextEmbeddings> {
    let e = match &t.npy_dir {
        Some(d) => TextEmbeddings::from_npy(
            &d.join("names.npy"),
            &d.join("descriptions.npy"),
            &d.join("sequences.npy"),
            graph.num_entities(),
        )?,
        None => pseudo_text_embed(&graph.text, dim, t.seed)?,
    };
    if e.dim() != dim {
        return Err(usage(format!("text embeddings have width {}, expected {dim}", e.dim())).into());
    }
    Ok(e)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainRun {
    pub data_dir: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub max_samples: Option<usize>,
    pub text: TextSettings,
    pub model: ModelConfig,
}

#[derive(Serialize)]
struct PretrainMetrics {
    samples: usize,
    masked_edges: usize,
    visible_edges: usize,
    reconstruction: Option<tosg_core::fm_model::Reconstruction>,
    grad_check: Vec<tosg_core::nn::GradCheckEntry>,
}

pub fn cmd_pretrain(cfg: &PretrainRun) -> Result<()> {
    let data = Dataset::open(required(&cfg.data_dir, "data_dir")?)?;
    let out = required(&cfg.output_dir, "output_dir")?;
    let mut rows: Vec<usize> = match &cfg.cohort {
        Some(p) => read_json::<CohortFile>(p)?.rows,
        None => (0..data.records.len()).collect(),
    };
    if let Some(n) = cfg.max_samples {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(usage("no samples to pretrain on").into());
    }
    let views = data.views(&rows)?;
    let text = text_embeddings(&data.graph, &cfg.text, cfg.text.dim)?;
    let trained = train(&data.graph, &text, &views.model_input, &cfg.model)?;
    create_dir(out)?;
    save_pretrained(&out.join("model.ckpt"), &cfg.model, text.dim(), &trained.params)?;
    let f = fs::File::create(out.join("history.csv"))?;
    write_history(BufWriter::new(f), &trained.history)?;
    write_json(
        &out.join("metrics.json"),
        &PretrainMetrics {
            samples: rows.len(),
            masked_edges: trained.plan.masked.len(),
            visible_edges: trained.plan.visible.len(),
            reconstruction: trained.reconstruction,
            grad_check: trained.grad_check,
        },
    )?;
    write_run_config(out, "pretrain", cfg)?;
    match trained.reconstruction {
        Some(r) => println!(
            "pretrained {} epochs on {} samples: masked-edge AUC {:.3}, recovered {:.3}",
            cfg.model.epochs,
            rows.len(),
            r.auc,
            r.recovered_fraction
        ),
        None => println!("pretrained {} epochs on {} samples", cfg.model.epochs, rows.len()),
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferRun {
    pub data_dir: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Group whose attention is interpreted; defaults to the single
    /// non-control label when there is one.
    pub focus: Option<String>,
    pub text: TextSettings,
    pub core: CoreConfig,
}

#[derive(Serialize)]
struct InferSummary {
    focus: String,
    classes: Vec<String>,
    train_samples: usize,
    train_accuracy: f64,
    test_samples: usize,
    test_accuracy: Option<f64>,
    core_nodes: usize,
    core_edges: usize,
    significant_nodes: usize,
    unmapped_edges: usize,
    self_pairs: usize,
}

fn default_focus(labels: &[String]) -> Result<String> {
    let classes: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let non_control: Vec<&str> = classes
        .iter()
        .copied()
        .filter(|c| *c != "normal" && *c != "male")
        .collect();
    match non_control.as_slice() {
        [one] if classes.len() == 2 => Ok(one.to_string()),
        _ => Err(usage(format!(
            "cannot infer the focus group from classes {classes:?}; pass --focus"
        ))
        .into()),
    }
}

pub fn cmd_infer_core(cfg: &InferRun) -> Result<()> {
    let data = Dataset::open(required(&cfg.data_dir, "data_dir")?)?;
    let out = required(&cfg.output_dir, "output_dir")?;
    let cohort: CohortFile = read_json(required(&cfg.cohort, "cohort")?)?;
    let (pre_cfg, text_dim, pretrained) = load_pretrained(required(&cfg.model, "model")?)?;
    if cohort.rows.is_empty() {
        return Err(usage("the cohort is empty").into());
    }
    let focus = match &cfg.focus {
        Some(f) => f.clone(),
        None => default_focus(&cohort.labels)?,
    };
    let text = text_embeddings(&data.graph, &cfg.text, text_dim)?;

    // standardize train and test together; labels are not involved
    let test = cohort.test.clone().unwrap_or_default();
    let mut all_rows = cohort.rows.clone();
    all_rows.extend(&test.rows);
    let views = data.views(&all_rows)?;
    let n_train = cohort.rows.len();
    let train_idx: Vec<usize> = (0..n_train).collect();
    let train_views = ExpressionViews {
        model_input: views.model_input.select_rows(&train_idx),
        expression: views.expression.select_rows(&train_idx),
    };
    let run = run_core(
        &data.graph,
        &text,
        &pre_cfg,
        &pretrained,
        &train_views,
        &cohort.labels,
        &focus,
        &cfg.core,
    )?;

    let test_accuracy = if test.rows.is_empty() {
        None
    } else {
        let idx: Vec<usize> = (n_train..all_rows.len()).collect();
        let ctx = full_context(&data.graph, &text, &pre_cfg)?;
        let emb = embed_all(&pretrained.encoder, &views.model_input.select_rows(&idx), &ctx);
        match encode_labels(&test.labels, &run.head.classes) {
            Ok(y) => Some(accuracy(&run.head.classify(&emb, &ctx), &y)),
            Err(_) => {
                eprintln!("warning: test labels include classes unseen in training; test accuracy skipped");
                None
            }
        }
    };

    create_dir(out)?;
    write_core_tsv(BufWriter::new(fs::File::create(out.join("core_edges.tsv"))?), &run.core)?;
    write_core_dot(BufWriter::new(fs::File::create(out.join("core.dot"))?), &run.core)?;
    write_node_scores(
        BufWriter::new(fs::File::create(out.join("node_scores.csv"))?),
        &run.scores,
    )?;
    save_head(&out.join("head.ckpt"), &cfg.core.head, pre_cfg.d, text_dim, &run.head)?;
    let mut hist = csv::Writer::from_path(out.join("head_history.csv"))?;
    hist.write_record(["epoch", "loss", "accuracy"])?;
    for h in &run.history {
        hist.write_record([
            h.epoch.to_string(),
            format!("{:.10e}", h.loss),
            format!("{:.6}", h.accuracy),
        ])?;
    }
    hist.flush()?;
    let summary = InferSummary {
        focus: focus.clone(),
        classes: run.head.classes.clone(),
        train_samples: n_train,
        train_accuracy: run.train_accuracy,
        test_samples: test.rows.len(),
        test_accuracy,
        core_nodes: run.core.nodes.len(),
        core_edges: run.core.edges.len(),
        significant_nodes: run.core.significant.values().filter(|&&s| s).count(),
        unmapped_edges: run.weights.unmapped_edges,
        self_pairs: run.weights.self_pairs,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_run_config(out, "infer-core", cfg)?;
    println!(
        "core subgraph for `{focus}`: {} nodes, {} edges (train accuracy {:.3}{})",
        summary.core_nodes,
        summary.core_edges,
        summary.train_accuracy,
        test_accuracy.map_or(String::new(), |a| format!(", test accuracy {a:.3}"))
    );
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthRun {
    pub output_dir: Option<PathBuf>,
    pub genes: usize,
    pub donors: usize,
    pub cells_per_donor: usize,
    pub seed: u64,
}

impl Default for SynthRun {
    fn default() -> Self {
        let t = ToySpec::default();
        SynthRun {
            output_dir: None,
            genes: t.n_genes,
            donors: 20,
            cells_per_donor: t.cells_per_donor,
            seed: 0,
        }
    }
}

/// Writes a toy input set: matrix.npy, attributes.csv, mapping.csv,
/// ppi.csv and text.csv.
pub fn cmd_synth(cfg: &SynthRun) -> Result<()> {
    let out = required(&cfg.output_dir, "output_dir")?;
    let toy = toy_cohort(&ToySpec {
        n_genes: cfg.genes,
        n_donors: cfg.donors,
        cells_per_donor: cfg.cells_per_donor,
        seed: cfg.seed,
        ..Default::default()
    })?;
    create_dir(out)?;
    npy::write_f32(&out.join("matrix.npy"), &toy.counts)?;
    let records: Vec<AttributeRecord> = toy
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| AttributeRecord {
            matrix_file_path: "matrix.npy".into(),
            matrix_row_idx: i,
            ..r.clone()
        })
        .collect();
    write_attributes(&out.join("attributes.csv"), &records)?;
    let mut w = csv::Writer::from_path(out.join("mapping.csv"))?;
    for m in &toy.mapping {
        w.serialize(m)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("ppi.csv"))?;
    for e in &toy.ppi {
        w.serialize(e)?;
    }
    w.flush()?;
    let graph = build_graph(&toy.mapping, &toy.ppi, Some(toy.text.clone()))?;
    let mut w = csv::Writer::from_path(out.join("text.csv"))?;
    w.write_record(["entity_id", "name", "description", "sequence"])?;
    for e in 0..graph.num_entities() {
        w.write_record([
            graph.entities.entity_id(e),
            &graph.text.names[e],
            &graph.text.descriptions[e],
            &graph.text.sequences[e],
        ])?;
    }
    w.flush()?;
    write_run_config(out, "synth", cfg)?;
    println!("wrote a {}-cell toy cohort to {}", records.len(), out.display());
    Ok(())
}
