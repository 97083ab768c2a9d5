//! Row-sharded float32 expression storage and the aligned attribute table.
//!
//! A corpus is a directory holding `manifest.json` plus one NPY file per
//! shard. Global row `g` lives in shard `g / shard_size` at local row
//! `g % shard_size`. Attribute records point at rows through
//! `(matrix_file_path, matrix_row_idx)`; those pointers are the only link
//! between metadata and matrix rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::npy;

pub const DEFAULT_SHARD_SIZE: usize = 10_000;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard_size: usize,
    pub num_rows: usize,
    pub num_cols: usize,
    /// Paths relative to the directory holding the manifest.
    pub shard_paths: Vec<String>,
}

impl ShardManifest {
    pub fn expected_shards(num_rows: usize, shard_size: usize) -> usize {
        num_rows.div_ceil(shard_size)
    }

    /// (shard index, local row) for a global row index.
    pub fn locate(&self, global: usize) -> Result<(usize, usize)> {
        if global >= self.num_rows {
            return Err(Error::IndexOutOfRange {
                index: global,
                len: self.num_rows,
            });
        }
        Ok((global / self.shard_size, global % self.shard_size))
    }

    pub fn shard_rows(&self, shard: usize) -> usize {
        let start = shard * self.shard_size;
        self.shard_size.min(self.num_rows.saturating_sub(start))
    }

    /// Inverse of [`locate`](Self::locate) for a `(path, row)` pointer.
    pub fn resolve(&self, path: &str, local_row: usize) -> Option<usize> {
        let shard = self.shard_paths.iter().position(|p| p == path)?;
        (local_row < self.shard_rows(shard)).then_some(shard * self.shard_size + local_row)
    }

    pub fn check(&self) -> Result<()> {
        if self.shard_size == 0 {
            return Err(Error::Config("shard_size must be positive".into()));
        }
        let expected = Self::expected_shards(self.num_rows, self.shard_size);
        if self.shard_paths.len() != expected {
            return Err(Error::Invalid(format!(
                "manifest lists {} shards but {} rows at {} per shard need {expected}",
                self.shard_paths.len(),
                self.num_rows,
                self.shard_size
            )));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Rows materialized from the store, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBlock {
    pub row_ids: Vec<usize>,
    pub values: Matrix<f32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub shards_opened: usize,
}

pub fn shard_file_name(shard: usize) -> String {
    format!("shards/x_{shard:05}.npy")
}

/// Splits `matrix` into row shards under `dir` and writes the manifest.
pub fn write_shards(matrix: &Matrix<f32>, shard_size: usize, dir: &Path) -> Result<ShardManifest> {
    if shard_size == 0 {
        return Err(Error::Config("shard_size must be at least 1".into()));
    }
    if matrix.rows() == 0 {
        return Err(Error::Invalid("cannot shard an empty matrix".into()));
    }
    if matrix.cols() == 0 {
        return Err(Error::Invalid("cannot shard a zero-column matrix".into()));
    }
    let shard_dir = dir.join("shards");
    fs::create_dir_all(&shard_dir).map_err(|e| Error::io(&shard_dir, e))?;

    let n = ShardManifest::expected_shards(matrix.rows(), shard_size);
    let mut shard_paths = Vec::with_capacity(n);
    for s in 0..n {
        let start = s * shard_size;
        let end = (start + shard_size).min(matrix.rows());
        let rows: Vec<usize> = (start..end).collect();
        let rel = shard_file_name(s);
        npy::write_f32(&dir.join(&rel), &matrix.select_rows(&rows))?;
        shard_paths.push(rel);
    }
    let manifest = ShardManifest {
        shard_size,
        num_rows: matrix.rows(),
        num_cols: matrix.cols(),
        shard_paths,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Read-only handle on a shard directory. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct ShardStore {
    root: PathBuf,
    manifest: ShardManifest,
}

impl ShardStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = ShardManifest::load(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn new(root: impl Into<PathBuf>, manifest: ShardManifest) -> Self {
        Self {
            root: root.into(),
            manifest,
        }
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn read_rows(&self, indices: &[usize]) -> Result<ExpressionBlock> {
        self.read_rows_with_stats(indices).map(|(b, _)| b)
    }

    /// Each touched shard is opened once; only the requested rows are read.
    pub fn read_rows_with_stats(&self, indices: &[usize]) -> Result<(ExpressionBlock, ReadStats)> {
        let m = &self.manifest;
        // shard -> [(output position, local row)]
        let mut by_shard: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (pos, &g) in indices.iter().enumerate() {
            let (s, local) = m.locate(g)?;
            by_shard.entry(s).or_default().push((pos, local));
        }

        let mut values = Matrix::<f32>::zeros(indices.len(), m.num_cols);
        for (&s, wanted) in &by_shard {
            let path = self.root.join(&m.shard_paths[s]);
            let locals: Vec<usize> = wanted.iter().map(|&(_, l)| l).collect();
            let rows = npy::read_rows_f32(&path, &locals)?;
            if rows.cols() != m.num_cols {
                return Err(Error::Shape(format!(
                    "{} has {} columns, manifest says {}",
                    path.display(),
                    rows.cols(),
                    m.num_cols
                )));
            }
            for (k, &(pos, _)) in wanted.iter().enumerate() {
                values.row_mut(pos).copy_from_slice(rows.row(k));
            }
        }
        let stats = ReadStats {
            shards_opened: by_shard.len(),
        };
        Ok((
            ExpressionBlock {
                row_ids: indices.to_vec(),
                values,
            },
            stats,
        ))
    }

    /// Global row index for every record, or the first dangling pointer.
    pub fn resolve_records(&self, records: &[AttributeRecord]) -> Result<Vec<usize>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.manifest
                    .resolve(&r.matrix_file_path, r.matrix_row_idx)
                    .ok_or_else(|| Error::Row {
                        context: "attribute table".into(),
                        row: i,
                        msg: format!(
                            "pointer ({}, {}) does not resolve to a stored row",
                            r.matrix_file_path, r.matrix_row_idx
                        ),
                    })
            })
            .collect()
    }

    /// Records whose pointer does not resolve, as (record position, reason).
    pub fn validate(&self, records: &[AttributeRecord]) -> Vec<(usize, String)> {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut problems = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match self.manifest.resolve(&r.matrix_file_path, r.matrix_row_idx) {
                None => problems.push((
                    i,
                    format!("dangling pointer ({}, {})", r.matrix_file_path, r.matrix_row_idx),
                )),
                Some(g) => {
                    if let Some(prev) = seen.insert(g, i) {
                        problems.push((i, format!("points at the same row as record {prev}")));
                    }
                }
            }
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuspensionType {
    Cell,
    Nucleus,
}

impl SuspensionType {
    pub fn as_str(self) -> &'static str {
        match self {
            SuspensionType::Cell => "cell",
            SuspensionType::Nucleus => "nucleus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "male" => Some(Sex::Male),
            "female" => Some(Sex::Female),
            "unknown" => Some(Sex::Unknown),
            _ => None,
        }
    }
}

/// One row of cohort metadata. Column names follow the published attribute
/// table; optional columns may be absent from the CSV entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    #[serde(default)]
    pub source: Option<String>,
    pub dataset_id: String,
    pub suspension_type: SuspensionType,
    pub tissue_general: String,
    #[serde(default)]
    pub tissue: Option<String>,
    pub matrix_file_path: String,
    pub matrix_row_idx: usize,
    pub donor_id: String,
    #[serde(rename = "CMT_id", default)]
    pub cmt_id: Option<String>,
    #[serde(rename = "CMT_name", default)]
    pub cmt_name: Option<String>,
    #[serde(rename = "disease_BMG_name")]
    pub disease_bmg_name: String,
    #[serde(rename = "disease_BMG_id", default)]
    pub disease_bmg_id: Option<String>,
    #[serde(default)]
    pub development_stage_category: Option<String>,
    pub sex_normalized: Sex,
}

pub const REQUIRED_COLUMNS: &[&str] = &[
    "dataset_id",
    "suspension_type",
    "tissue_general",
    "matrix_file_path",
    "matrix_row_idx",
    "donor_id",
    "disease_BMG_name",
    "sex_normalized",
];

pub const OPTIONAL_COLUMNS: &[&str] = &[
    "source",
    "tissue",
    "CMT_id",
    "CMT_name",
    "disease_BMG_id",
    "development_stage_category",
];

/// Canonical column name for an attribute, accepting the loader-style
/// shorthands (`disease`, `cell_type`, `sex`, ...).
pub fn canonical_attribute(name: &str) -> Option<&'static str> {
    let alias = match name {
        "disease" | "disease_name" => "disease_BMG_name",
        "disease_id" => "disease_BMG_id",
        "cell_type" => "CMT_name",
        "cell_type_id" => "CMT_id",
        "sex" => "sex_normalized",
        "development_stage" | "age" | "age_stage" => "development_stage_category",
        other => other,
    };
    REQUIRED_COLUMNS
        .iter()
        .chain(OPTIONAL_COLUMNS)
        .find(|c| **c == alias)
        .copied()
}

impl AttributeRecord {
    /// Value of a categorical attribute; `None` when the optional field is unset.
    pub fn value(&self, attr: &str) -> Result<Option<&str>> {
        let col = canonical_attribute(attr).ok_or_else(|| Error::UnknownAttribute(attr.into()))?;
        Ok(match col {
            "source" => self.source.as_deref(),
            "dataset_id" => Some(self.dataset_id.as_str()),
            "suspension_type" => Some(self.suspension_type.as_str()),
            "tissue_general" => Some(self.tissue_general.as_str()),
            "tissue" => self.tissue.as_deref(),
            "matrix_file_path" => Some(self.matrix_file_path.as_str()),
            "matrix_row_idx" => {
                return Err(Error::UnknownAttribute(
                    "matrix_row_idx is a pointer, not a categorical attribute".into(),
                ))
            }
            "donor_id" => Some(self.donor_id.as_str()),
            "CMT_id" => self.cmt_id.as_deref(),
            "CMT_name" => self.cmt_name.as_deref(),
            "disease_BMG_name" => Some(self.disease_bmg_name.as_str()),
            "disease_BMG_id" => self.disease_bmg_id.as_deref(),
            "development_stage_category" => self.development_stage_category.as_deref(),
            "sex_normalized" => Some(self.sex_normalized.as_str()),
            _ => unreachable!("canonical_attribute returned an unlisted column"),
        }
        .filter(|v| !v.is_empty()))
    }

    /// Overwrites a categorical attribute. Required fields reject `None`.
    pub fn set_value(&mut self, attr: &str, value: Option<String>) -> Result<()> {
        let col = canonical_attribute(attr).ok_or_else(|| Error::UnknownAttribute(attr.into()))?;
        let required =
            |v: Option<String>| v.ok_or_else(|| Error::Invalid(format!("{col} is required and cannot be unset")));
        match col {
            "source" => self.source = value,
            "dataset_id" => self.dataset_id = required(value)?,
            "suspension_type" => {
                self.suspension_type = match required(value)?.as_str() {
                    "cell" => SuspensionType::Cell,
                    "nucleus" => SuspensionType::Nucleus,
                    other => return Err(Error::Invalid(format!("bad suspension_type `{other}`"))),
                }
            }
            "tissue_general" => self.tissue_general = required(value)?,
            "tissue" => self.tissue = value,
            "matrix_file_path" => self.matrix_file_path = required(value)?,
            "donor_id" => self.donor_id = required(value)?,
            "CMT_id" => self.cmt_id = value,
            "CMT_name" => self.cmt_name = value,
            "disease_BMG_name" => self.disease_bmg_name = required(value)?,
            "disease_BMG_id" => self.disease_bmg_id = value,
            "development_stage_category" => self.development_stage_category = value,
            "sex_normalized" => {
                let v = required(value)?;
                self.sex_normalized = Sex::parse(&v).ok_or_else(|| Error::Invalid(format!("bad sex `{v}`")))?;
            }
            _ => return Err(Error::UnknownAttribute(attr.into())),
        }
        Ok(())
    }
}

/// Categorical columns subject to majority voting and query constraints.
pub const CATEGORICAL_COLUMNS: &[&str] = &[
    "source",
    "dataset_id",
    "suspension_type",
    "tissue_general",
    "tissue",
    "donor_id",
    "CMT_id",
    "CMT_name",
    "disease_BMG_name",
    "disease_BMG_id",
    "development_stage_category",
    "sex_normalized",
];

pub fn load_attributes(csv_path: &Path) -> Result<Vec<AttributeRecord>> {
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    read_attributes(file, &csv_path.display().to_string())
}

pub fn read_attributes<R: std::io::Read>(reader: R, context: &str) -> Result<Vec<AttributeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<AttributeRecord>().enumerate() {
        out.push(rec.map_err(|e| Error::Row {
            context: context.to_string(),
            row: i,
            msg: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => match err.field() {
                    Some(f) => format!("column {}: {}", headers.get(f as usize).unwrap_or("?"), err.kind()),
                    None => err.kind().to_string(),
                },
                other => format!("{other:?}"),
            },
        })?);
    }
    Ok(out)
}

pub fn write_attributes(path: &Path, records: &[AttributeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "source,dataset_id,suspension_type,tissue_general,tissue,matrix_file_path,matrix_row_idx,donor_id,CMT_id,CMT_name,disease_BMG_name,disease_BMG_id,development_stage_category,sex_normalized";

    fn csv_with_rows(rows: &[&str]) -> String {
        let mut s = HEADER.to_string();
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    #[test]
    fn locate_uses_division_and_remainder() {
        let m = ShardManifest {
            shard_size: 10_000,
            num_rows: 25_000,
            num_cols: 3,
            shard_paths: (0..3).map(shard_file_name).collect(),
        };
        assert_eq!(m.locate(10_001).unwrap(), (1, 1));
        assert_eq!(m.locate(24_999).unwrap(), (2, 4_999));
        assert!(matches!(
            m.locate(25_000),
            Err(Error::IndexOutOfRange { index: 25_000, .. })
        ));
        assert_eq!(m.shard_rows(2), 5_000);
        assert_eq!(m.resolve(&shard_file_name(0), 2025), Some(2025));
        assert_eq!(m.resolve(&shard_file_name(2), 5_000), None);
    }

    #[test]
    fn loads_three_rows() {
        let text = csv_with_rows(&[
            "CellxGene,GSE1,cell,brain,,shards/x_00000.npy,0,D1,,microglial cell,normal,,adult,male",
            "CellxGene,GSE1,nucleus,brain,cortex,shards/x_00000.npy,1,D1,CMT1,neuron,Alzheimer's disease,BMG1,adult,female",
            ",GSE2,cell,liver,,shards/x_00000.npy,2025,\"Donor, 26\",,,normal,,,unknown",
        ]);
        let recs = read_attributes(text.as_bytes(), "t").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].tissue, None);
        assert_eq!(recs[1].tissue.as_deref(), Some("cortex"));
        assert_eq!(recs[2].donor_id, "Donor, 26");
        assert_eq!(recs[2].matrix_row_idx, 2025);
        assert_eq!(recs[2].development_stage_category, None);
        assert_eq!(recs[1].value("disease").unwrap(), Some("Alzheimer's disease"));
        assert_eq!(recs[0].value("sex").unwrap(), Some("male"));
        assert!(recs[0].value("no_such_column").is_err());
    }

    #[test]
    fn missing_required_column_is_a_schema_error() {
        let text = "dataset_id,suspension_type,tissue_general,matrix_file_path,matrix_row_idx,disease_BMG_name,sex_normalized\nG,cell,brain,p,0,normal,male\n";
        match read_attributes(text.as_bytes(), "t") {
            Err(Error::MissingColumns(cols)) => assert_eq!(cols, vec!["donor_id".to_string()]),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn optional_columns_may_be_absent() {
        let text = "dataset_id,suspension_type,tissue_general,matrix_file_path,matrix_row_idx,donor_id,disease_BMG_name,sex_normalized\nG,cell,brain,p,3,D,normal,male\n";
        let recs = read_attributes(text.as_bytes(), "t").unwrap();
        assert_eq!(recs[0].source, None);
        assert_eq!(recs[0].cmt_name, None);
    }

    #[test]
    fn malformed_row_index_names_the_row() {
        let text = csv_with_rows(&[
            "S,G,cell,brain,,p,0,D,,,normal,,,male",
            "S,G,cell,brain,,p,twelve,D,,,normal,,,male",
        ]);
        match read_attributes(text.as_bytes(), "t") {
            Err(Error::Row { row, msg, .. }) => {
                assert_eq!(row, 1);
                assert!(msg.contains("matrix_row_idx"), "{msg}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn set_value_round_trips_through_value() {
        let text = csv_with_rows(&["S,G,cell,brain,,p,0,D,,,normal,,,male"]);
        let mut r = read_attributes(text.as_bytes(), "t").unwrap().remove(0);
        r.set_value("sex", Some("female".into())).unwrap();
        r.set_value("cell_type", Some("T cell".into())).unwrap();
        assert_eq!(r.value("sex_normalized").unwrap(), Some("female"));
        assert_eq!(r.value("CMT_name").unwrap(), Some("T cell"));
        assert!(r.set_value("donor_id", None).is_err());
    }
}
