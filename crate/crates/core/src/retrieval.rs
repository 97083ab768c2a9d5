//! Cohort retrieval: conjunctive attribute queries, key-stratified
//! case/control balancing with an ordered age-stage tolerance, donor-level
//! train/test splitting and rare-class upsampling.
//!
//! Row indices everywhere in this module are positions in the attribute
//! record slice; the shard store turns them into matrix rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::shard_store::{canonical_attribute, AttributeRecord};

/// Token that missing values are matched as.
pub const UNKNOWN: &str = "unknown";
pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

/// Conjunction of `attribute ∈ admissible set` constraints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, OneOrMany>", into = "BTreeMap<String, Vec<String>>")]
pub struct Query {
    pub constraints: BTreeMap<String, BTreeSet<String>>,
}

impl From<BTreeMap<String, OneOrMany>> for Query {
    fn from(m: BTreeMap<String, OneOrMany>) -> Self {
        let constraints = m
            .into_iter()
            .map(|(k, v)| {
                let set = match v {
                    OneOrMany::One(s) => BTreeSet::from([s]),
                    OneOrMany::Many(v) => v.into_iter().collect(),
                };
                (k, set)
            })
            .collect();
        Query { constraints }
    }
}

impl From<Query> for BTreeMap<String, Vec<String>> {
    fn from(q: Query) -> Self {
        q.constraints
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }
}

impl Query {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, attr: &str, values: &[&str]) -> Self {
        self.constraints
            .entry(attr.to_string())
            .or_default()
            .extend(values.iter().map(|v| v.to_string()));
        self
    }

    /// Rewrites keys to canonical column names and rejects unknown keys or
    /// empty value sets.
    pub fn canonical(&self) -> Result<Query> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (k, v) in &self.constraints {
            let col = canonical_attribute(k).ok_or_else(|| Error::UnknownAttribute(k.clone()))?;
            if col == "matrix_row_idx" || col == "matrix_file_path" {
                return Err(Error::UnknownAttribute(format!("{k} cannot be queried")));
            }
            if v.is_empty() {
                return Err(Error::Config(format!("constraint on {k} has no admissible values")));
            }
            let slot = out.entry(col.to_string()).or_default();
            if slot.is_empty() {
                slot.extend(v.iter().cloned());
            } else {
                // the same column given twice under different aliases: both must hold
                let both: BTreeSet<String> = slot.intersection(v).cloned().collect();
                *slot = both;
            }
        }
        Ok(Query { constraints: out })
    }

    pub fn without(&self, attr: &str) -> Query {
        let col = canonical_attribute(attr).unwrap_or(attr);
        Query {
            constraints: self
                .constraints
                .iter()
                .filter(|(k, _)| canonical_attribute(k).unwrap_or(k) != col)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// `q` must already be canonical.
    fn matches(&self, r: &AttributeRecord) -> Result<bool> {
        for (attr, admissible) in &self.constraints {
            let v = r.value(attr)?.unwrap_or(UNKNOWN);
            if !admissible.contains(v) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Rows satisfying every constraint, ascending. The empty query selects all.
pub fn phase1_extract(records: &[AttributeRecord], q: &Query) -> Result<Vec<usize>> {
    let q = q.canonical()?;
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if q.matches(r)? {
            out.push(i);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Balance field `b`.
    pub balance_field: String,
    /// Control value `b0`.
    pub control_value: String,
    /// Ordered exact-match keys `K`.
    pub match_keys: Vec<String>,
    /// Position of the age-stage key inside `match_keys`.
    pub age_key_index: usize,
    /// Stage labels in rank order.
    pub age_order: Vec<String>,
    /// Largest admitted age-rank offset `δ`.
    pub tolerance: i64,
    /// Fill short strata by sampling matches with replacement.
    #[serde(default)]
    pub upsample: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance < 0 {
            return Err(Error::Config(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        let b = canonical_attribute(&self.balance_field)
            .ok_or_else(|| Error::UnknownAttribute(self.balance_field.clone()))?;
        if self.match_keys.is_empty() {
            return Err(Error::Config("at least one match key is required".into()));
        }
        for k in &self.match_keys {
            let c = canonical_attribute(k).ok_or_else(|| Error::UnknownAttribute(k.clone()))?;
            if c == b {
                return Err(Error::Config(format!("balance field {b} cannot also be a match key")));
            }
        }
        if self.age_key_index >= self.match_keys.len() {
            return Err(Error::Config(format!(
                "age_key_index {} is outside the {} match keys",
                self.age_key_index,
                self.match_keys.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.age_order.iter().collect();
        if distinct.len() != self.age_order.len() {
            return Err(Error::Config("age_order contains duplicate stages".into()));
        }
        Ok(())
    }

    fn rank_map(&self) -> HashMap<&str, i64> {
        self.age_order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as i64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    /// Values of the match keys, in `match_keys` order.
    pub key: Vec<String>,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
    pub strata: Vec<Stratum>,
    /// Strata of the reference side that found no admissible match.
    #[serde(default)]
    pub discarded_strata: Vec<Vec<String>>,
    /// True when cases were the smaller side and acted as the reference.
    #[serde(default)]
    pub cases_as_reference: bool,
}

impl Cohort {
    /// Unbalanced cohort: every row of `rows` labelled by `label_field`.
    pub fn unbalanced(records: &[AttributeRecord], rows: Vec<usize>, label_field: &str) -> Result<Self> {
        let labels = label_values(records, &rows, label_field)?;
        Ok(Cohort {
            rows,
            labels,
            ..Default::default()
        })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn key_of(r: &AttributeRecord, keys: &[String]) -> Result<Option<Vec<String>>> {
    let mut out = Vec::with_capacity(keys.len());
    for k in keys {
        match r.value(k)? {
            Some(v) => out.push(v.to_string()),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Seeded sample of `n` items without replacement; candidates are sorted
/// before shuffling so the result depends only on the set and the stream.
fn sample_without_replacement(mut cand: Vec<usize>, n: usize, rng: &mut rng::SeededRng) -> Vec<usize> {
    cand.sort_unstable();
    rng::shuffle(&mut cand, rng);
    cand.truncate(n);
    cand
}

/// Task-aware stratified balancing on top of the Phase I query.
///
/// Cases are query rows whose balance field differs from the control
/// value; controls re-apply the query minus the balance constraint with the
/// balance field fixed to the control value. The smaller side is the
/// reference. Each reference stratum collects target rows with identical
/// non-age keys in age-offset layers `0..=δ`, sampling without replacement
/// inside a layer. Short strata are upsampled with replacement when enabled,
/// otherwise the reference side is subsampled to the number of matches so
/// every retained stratum is balanced. Strata with no match are discarded.
pub fn phase2_balance(records: &[AttributeRecord], q: &Query, cfg: &TaskConfig) -> Result<Cohort> {
    cfg.validate()?;
    let q = q.canonical()?;
    let b = canonical_attribute(&cfg.balance_field).expect("validated");
    let ranks = cfg.rank_map();
    let age_key = &cfg.match_keys[cfg.age_key_index];

    let label = |i: usize| -> Result<String> { Ok(records[i].value(b)?.unwrap_or(UNKNOWN).to_string()) };

    let q_minus_b = q.without(b);
    let mut cases: Vec<(usize, Vec<String>)> = Vec::new();
    let mut controls: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let is_control = r.value(b)?.unwrap_or(UNKNOWN) == cfg.control_value;
        let selected = if is_control {
            q_minus_b.matches(r)?
        } else {
            q.matches(r)?
        };
        if !selected {
            continue;
        }
        // rows with a missing match key are dropped from both sides
        let Some(key) = key_of(r, &cfg.match_keys)? else {
            continue;
        };
        if !ranks.contains_key(key[cfg.age_key_index].as_str()) {
            return Err(Error::Config(format!(
                "record {i}: stage `{}` of {age_key} is not listed in age_order",
                key[cfg.age_key_index]
            )));
        }
        if is_control {
            controls.push((i, key));
        } else {
            cases.push((i, key));
        }
    }

    let cases_as_reference = cases.len() <= controls.len();
    let (reference, target) = if cases_as_reference {
        (&cases, &controls)
    } else {
        (&controls, &cases)
    };

    let j = cfg.age_key_index;
    let strip_age = |key: &[String]| -> Vec<String> {
        key.iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, v)| v.clone())
            .collect()
    };

    // target rows grouped by their non-age keys, with age rank attached
    let mut target_pool: HashMap<Vec<String>, Vec<(i64, usize)>> = HashMap::new();
    for (idx, key) in target {
        target_pool
            .entry(strip_age(key))
            .or_default()
            .push((ranks[key[j].as_str()], *idx));
    }

    let mut ref_strata: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (idx, key) in reference {
        ref_strata.entry(key.clone()).or_default().push(*idx);
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut cohort = Cohort {
        cases_as_reference,
        ..Default::default()
    };
    let empty = Vec::new();
    // target rows already matched into any stratum
    let mut used: BTreeSet<usize> = BTreeSet::new();
    for (key, ref_rows) in ref_strata {
        let n = ref_rows.len();
        let stage = ranks[key[j].as_str()];
        let pool = target_pool.get(&strip_age(&key)).unwrap_or(&empty);
        let mut matched: Vec<usize> = Vec::with_capacity(n);
        for t in 0..=cfg.tolerance {
            let cand: Vec<usize> = pool
                .iter()
                .filter(|(r, idx)| (r - stage).abs() <= t && !used.contains(idx))
                .map(|&(_, idx)| idx)
                .collect();
            let take = (n - matched.len()).min(cand.len());
            let picked = sample_without_replacement(cand, take, &mut rng);
            used.extend(picked.iter().copied());
            matched.extend(picked);
            if matched.len() == n {
                break;
            }
        }
        if matched.is_empty() {
            cohort.discarded_strata.push(key);
            continue;
        }
        let mut ref_rows = ref_rows;
        if matched.len() < n {
            if cfg.upsample {
                let distinct = matched.clone();
                while matched.len() < n {
                    matched.push(distinct[rng::index(&mut rng, distinct.len())]);
                }
            } else {
                ref_rows = sample_without_replacement(ref_rows, matched.len(), &mut rng);
                ref_rows.sort_unstable();
            }
        }
        let (case_rows, control_rows) = if cases_as_reference {
            (ref_rows, matched)
        } else {
            (matched, ref_rows)
        };
        for &i in case_rows.iter().chain(&control_rows) {
            cohort.rows.push(i);
            cohort.labels.push(label(i)?);
        }
        cohort.strata.push(Stratum {
            key,
            cases: case_rows,
            controls: control_rows,
        });
    }
    Ok(cohort)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSpec {
    Ratio(f64),
    Size(usize),
}

impl SampleSpec {
    /// Builds a spec from the two mutually exclusive loader options.
    pub fn from_options(ratio: Option<f64>, size: Option<usize>) -> Result<Option<Self>> {
        match (ratio, size) {
            (Some(_), Some(_)) => Err(Error::Config(
                "sample_ratio and sample_size are mutually exclusive".into(),
            )),
            (Some(r), None) if !(r > 0.0 && r <= 1.0) => {
                Err(Error::Config(format!("sample_ratio must lie in (0, 1], got {r}")))
            }
            (Some(r), None) => Ok(Some(SampleSpec::Ratio(r))),
            (None, Some(s)) => Ok(Some(SampleSpec::Size(s))),
            (None, None) => Ok(None),
        }
    }
}

/// Seeded uniform subsample of a cohort's rows, applied after balancing.
/// Relative row order is kept; strata are trimmed to the surviving rows.
pub fn subsample(cohort: &Cohort, spec: SampleSpec, seed: u64) -> Cohort {
    let n = cohort.rows.len();
    let keep_n = match spec {
        SampleSpec::Ratio(r) => ((n as f64) * r).round() as usize,
        SampleSpec::Size(s) => s,
    }
    .min(n);
    let mut rng = rng::derive(seed, 0x5a);
    let mut positions = sample_without_replacement((0..n).collect(), keep_n, &mut rng);
    positions.sort_unstable();
    let mut kept: HashMap<usize, usize> = HashMap::new();
    for &p in &positions {
        *kept.entry(cohort.rows[p]).or_default() += 1;
    }
    let trim = |rows: &[usize], budget: &mut HashMap<usize, usize>| -> Vec<usize> {
        rows.iter()
            .copied()
            .filter(|r| match budget.get_mut(r) {
                Some(c) if *c > 0 => {
                    *c -= 1;
                    true
                }
                _ => false,
            })
            .collect()
    };
    let mut budget = kept.clone();
    let strata = cohort
        .strata
        .iter()
        .map(|s| Stratum {
            key: s.key.clone(),
            cases: trim(&s.cases, &mut budget),
            controls: trim(&s.controls, &mut budget),
        })
        .filter(|s| !s.cases.is_empty() || !s.controls.is_empty())
        .collect();
    Cohort {
        rows: positions.iter().map(|&p| cohort.rows[p]).collect(),
        labels: positions.iter().map(|&p| cohort.labels[p].clone()).collect(),
        strata,
        discarded_strata: cohort.discarded_strata.clone(),
        cases_as_reference: cohort.cases_as_reference,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Intended share of samples in the test split.
    pub test_fraction: f64,
    /// Hard upper bound on the test share.
    pub cap: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::Config(format!("cap must lie in (0, 1], got {}", self.cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorSplit {
    /// Positions into the input row list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// `dataset_id/donor_id` keys assigned to the test side.
    pub test_donors: Vec<String>,
}

/// Donors visited in the order used by [`donor_split`]: seeded shuffle, then
/// each consecutive block of four sorted by ascending sample count.
pub fn donor_visit_order(sizes: &BTreeMap<(String, String), usize>, seed: u64) -> Vec<(String, String)> {
    let mut donors: Vec<(String, String)> = sizes.keys().cloned().collect();
    let mut rng = rng::seeded(seed);
    rng::shuffle(&mut donors, &mut rng);
    for block in donors.chunks_mut(4) {
        block.sort_by_key(|d| sizes[d]);
    }
    donors
}

/// Assigns every donor (keyed by dataset and donor id) wholly to train or
/// test. Donors join the test side until the intended fraction is reached;
/// selection stops as soon as the next donor would push the test side past
/// `cap`.
///
/// `rows` are record indices (duplicates allowed); the returned splits hold
/// positions into `rows`.
pub fn donor_split(records: &[AttributeRecord], rows: &[usize], cfg: &SplitConfig) -> Result<DonorSplit> {
    cfg.validate()?;
    let donor_of = |i: usize| (records[i].dataset_id.clone(), records[i].donor_id.clone());
    let mut sizes: BTreeMap<(String, String), usize> = BTreeMap::new();
    for &i in rows {
        *sizes.entry(donor_of(i)).or_default() += 1;
    }
    let total = rows.len() as f64;
    let target = cfg.test_fraction * total;
    let cap = cfg.cap * total;

    let mut test_donors: BTreeSet<(String, String)> = BTreeSet::new();
    let mut test_count = 0usize;
    for d in donor_visit_order(&sizes, cfg.seed) {
        if test_count as f64 >= target {
            break;
        }
        let s = sizes[&d];
        if (test_count + s) as f64 > cap {
            break;
        }
        test_count += s;
        test_donors.insert(d);
    }

    let mut split = DonorSplit {
        test_donors: test_donors.iter().map(|(a, b)| format!("{a}/{b}")).collect(),
        ..Default::default()
    };
    for (pos, &i) in rows.iter().enumerate() {
        if test_donors.contains(&donor_of(i)) {
            split.test.push(pos);
        } else {
            split.train.push(pos);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleReport {
    pub added: BTreeMap<String, usize>,
    /// Expected classes with no members; these stay empty.
    pub empty_classes: Vec<String>,
}

/// Tops every class up to `min_count` by drawing its own members with
/// replacement. Duplicates are appended after the original rows.
pub fn upsample_rare(
    rows: &[usize],
    labels: &[String],
    min_count: usize,
    seed: u64,
    expected_classes: &[String],
) -> Result<(Vec<usize>, Vec<String>, UpsampleReport)> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Shape("rows and labels differ in length".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (&r, l) in rows.iter().zip(labels) {
        members.entry(l.as_str()).or_default().push(r);
    }
    let mut out_rows = rows.to_vec();
    let mut out_labels = labels.to_vec();
    let mut report = UpsampleReport::default();
    let mut rng = rng::seeded(seed);
    for (label, m) in &members {
        if m.len() >= min_count {
            continue;
        }
        let extra = min_count - m.len();
        for _ in 0..extra {
            out_rows.push(m[rng::index(&mut rng, m.len())]);
            out_labels.push(label.to_string());
        }
        report.added.insert(label.to_string(), extra);
    }
    report.empty_classes = expected_classes
        .iter()
        .filter(|c| !members.contains_key(c.as_str()))
        .cloned()
        .collect();
    Ok((out_rows, out_labels, report))
}

/// Stage labels in rank order used by the built-in tasks.
pub const DEFAULT_AGE_ORDER: &[&str] = &[
    "embryo",
    "fetal",
    "infant",
    "child",
    "adolescent",
    "young adult",
    "adult",
    "middle aged",
    "aged",
    "elderly",
];

/// Task configurations for the named loader tasks. Cell-type annotation has
/// no case/control structure and therefore no balancing task.
pub fn builtin_task(name: &str, tolerance: i64, upsample: bool, seed: u64) -> Result<TaskConfig> {
    let (b, b0, others) = match name {
        "disease" => (
            "disease_BMG_name",
            "normal",
            ["tissue_general", "CMT_name", "sex_normalized"],
        ),
        "sex" => (
            "sex_normalized",
            "male",
            ["tissue_general", "CMT_name", "disease_BMG_name"],
        ),
        "cell_type" => {
            return Err(Error::Config(
                "task `cell_type` does not support stratified balancing; use rare-class upsampling".into(),
            ))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task `{other}` (expected disease, sex or cell_type)"
            )))
        }
    };
    let mut match_keys: Vec<String> = others.iter().map(|s| s.to_string()).collect();
    match_keys.push("development_stage_category".into());
    let cfg = TaskConfig {
        balance_field: b.into(),
        control_value: b0.into(),
        age_key_index: match_keys.len() - 1,
        match_keys,
        age_order: DEFAULT_AGE_ORDER.iter().map(|s| s.to_string()).collect(),
        tolerance,
        upsample,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Label column of a named task.
pub fn task_label_column(task: &str) -> Result<&'static str> {
    match task {
        "disease" => Ok("disease_BMG_name"),
        "sex" => Ok("sex_normalized"),
        "cell_type" => Ok("CMT_name"),
        other => Err(Error::Config(format!(
            "unknown task `{other}` (expected disease, sex or cell_type)"
        ))),
    }
}

/// Values of `column` for `rows`; missing values read as [`UNKNOWN`].
pub fn label_values(records: &[AttributeRecord], rows: &[usize], column: &str) -> Result<Vec<String>> {
    rows.iter()
        .map(|&i| Ok(records[i].value(column)?.unwrap_or(UNKNOWN).to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tasks() {
        let t = builtin_task("disease", 1, false, 0).unwrap();
        assert_eq!(t.match_keys[t.age_key_index], "development_stage_category");
        assert_eq!(t.control_value, "normal");
        assert!(builtin_task("cell_type", 0, false, 0).is_err());
        assert!(builtin_task("weather", 0, false, 0).is_err());
        assert_eq!(task_label_column("sex").unwrap(), "sex_normalized");
    }
    use crate::shard_store::{Sex, SuspensionType};

    fn rec(tissue: &str, disease: &str, sex: &str, stage: Option<&str>, donor: &str) -> AttributeRecord {
        AttributeRecord {
            source: None,
            dataset_id: "D".into(),
            suspension_type: SuspensionType::Cell,
            tissue_general: tissue.into(),
            tissue: None,
            matrix_file_path: "x.npy".into(),
            matrix_row_idx: 0,
            donor_id: donor.into(),
            cmt_id: None,
            cmt_name: None,
            disease_bmg_name: disease.into(),
            disease_bmg_id: None,
            development_stage_category: stage.map(str::to_string),
            sex_normalized: Sex::parse(sex).unwrap(),
        }
    }

    fn task(delta: i64, upsample: bool) -> TaskConfig {
        TaskConfig {
            balance_field: "disease".into(),
            control_value: "normal".into(),
            match_keys: vec!["sex".into(), "development_stage_category".into()],
            age_key_index: 1,
            age_order: vec!["child".into(), "adult".into(), "aged".into()],
            tolerance: delta,
            upsample,
            seed: 3,
        }
    }

    #[test]
    fn phase1_examples() {
        let recs = vec![
            rec("brain", "AD", "male", None, "a"),
            rec("lung", "AD", "male", None, "b"),
            rec("brain", "normal", "female", None, "c"),
        ];
        let q = Query::new().with("tissue_general", &["brain"]);
        assert_eq!(phase1_extract(&recs, &q).unwrap(), vec![0, 2]);
        assert_eq!(phase1_extract(&recs, &Query::new()).unwrap(), vec![0, 1, 2]);
        assert!(phase1_extract(&recs, &Query::new().with("colour", &["red"])).is_err());
    }

    #[test]
    fn missing_values_only_match_unknown() {
        let recs = vec![
            rec("brain", "AD", "male", None, "a"),
            rec("brain", "AD", "male", Some("adult"), "b"),
        ];
        let q = Query::new().with("development_stage", &["adult"]);
        assert_eq!(phase1_extract(&recs, &q).unwrap(), vec![1]);
        let q = Query::new().with("development_stage", &["unknown"]);
        assert_eq!(phase1_extract(&recs, &q).unwrap(), vec![0]);
    }

    #[test]
    fn query_json_accepts_scalars_and_lists() {
        let q: Query = serde_json::from_str(r#"{"tissue_general":"brain","disease":["AD","PD"]}"#).unwrap();
        assert_eq!(q.constraints["disease"].len(), 2);
        assert_eq!(q.constraints["tissue_general"].len(), 1);
    }

    #[test]
    fn two_cases_three_exact_controls() {
        let recs = vec![
            rec("brain", "AD", "male", Some("adult"), "a"),
            rec("brain", "AD", "male", Some("adult"), "b"),
            rec("brain", "normal", "male", Some("adult"), "c"),
            rec("brain", "normal", "male", Some("adult"), "d"),
            rec("brain", "normal", "male", Some("adult"), "e"),
        ];
        let q = Query::new().with("disease", &["AD"]);
        let c = phase2_balance(&recs, &q, &task(0, false)).unwrap();
        assert!(c.cases_as_reference);
        assert_eq!(c.strata.len(), 1);
        let s = &c.strata[0];
        assert_eq!(s.cases, vec![0, 1]);
        assert_eq!(s.controls.len(), 2);
        // every admissible 2-subset of {2,3,4} is a valid answer
        let admissible: Vec<BTreeSet<usize>> = vec![[2, 3].into(), [2, 4].into(), [3, 4].into()];
        let got: BTreeSet<usize> = s.controls.iter().copied().collect();
        assert!(admissible.contains(&got));
        assert_eq!(c.labels.iter().filter(|l| *l == "normal").count(), 2);
    }

    #[test]
    fn stratum_without_admissible_controls_is_discarded() {
        let recs = vec![
            rec("brain", "AD", "male", Some("child"), "a"),
            rec("brain", "normal", "male", Some("aged"), "b"),
            rec("brain", "normal", "female", Some("child"), "c"),
        ];
        let c = phase2_balance(&recs, &Query::new().with("disease", &["AD"]), &task(1, true)).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.discarded_strata, vec![vec!["male".to_string(), "child".to_string()]]);
    }

    #[test]
    fn offset_one_control_is_admitted() {
        let recs = vec![
            rec("brain", "AD", "male", Some("adult"), "a"),
            rec("brain", "normal", "male", Some("aged"), "b"),
        ];
        let c = phase2_balance(&recs, &Query::new().with("disease", &["AD"]), &task(1, false)).unwrap();
        assert_eq!(c.rows, vec![0, 1]);
        assert_eq!(c.strata[0].controls, vec![1]);
        let c0 = phase2_balance(&recs, &Query::new().with("disease", &["AD"]), &task(0, false)).unwrap();
        assert!(c0.is_empty());
    }

    #[test]
    fn a_control_serves_one_stratum_only() {
        // both case strata reach the single adult control at offset 1
        let recs = vec![
            rec("brain", "AD", "male", Some("child"), "a"),
            rec("brain", "AD", "male", Some("aged"), "b"),
            rec("brain", "normal", "male", Some("adult"), "c"),
            rec("brain", "normal", "female", Some("adult"), "d"),
        ];
        let c = phase2_balance(&recs, &Query::new().with("disease", &["AD"]), &task(1, false)).unwrap();
        assert_eq!(c.strata.len(), 1);
        assert_eq!(c.rows.iter().filter(|&&i| i == 2).count(), 1);
        assert_eq!(c.discarded_strata.len(), 1);
    }

    #[test]
    fn swap_branch_when_controls_are_scarce() {
        let recs = vec![
            rec("brain", "AD", "male", Some("adult"), "a"),
            rec("brain", "AD", "male", Some("adult"), "b"),
            rec("brain", "AD", "male", Some("adult"), "c"),
            rec("brain", "normal", "male", Some("adult"), "d"),
        ];
        let c = phase2_balance(&recs, &Query::new().with("disease", &["AD"]), &task(0, false)).unwrap();
        assert!(!c.cases_as_reference);
        assert_eq!(c.strata[0].controls, vec![3]);
        assert_eq!(c.strata[0].cases.len(), 1);
    }

    #[test]
    fn short_stratum_upsampling_and_trimming() {
        let recs = vec![
            rec("brain", "AD", "male", Some("adult"), "a"),
            rec("brain", "AD", "male", Some("adult"), "b"),
            rec("brain", "AD", "male", Some("adult"), "c"),
            rec("brain", "normal", "male", Some("adult"), "d"),
            rec("brain", "normal", "female", Some("adult"), "e"),
            rec("brain", "normal", "female", Some("adult"), "f"),
            rec("brain", "normal", "female", Some("adult"), "g"),
        ];
        let q = Query::new().with("disease", &["AD"]);
        let up = phase2_balance(&recs, &q, &task(0, true)).unwrap();
        assert!(up.cases_as_reference);
        let s = &up.strata[0];
        assert_eq!(s.cases.len(), 3);
        assert_eq!(s.controls, vec![3, 3, 3]);

        let trimmed = phase2_balance(&recs, &q, &task(0, false)).unwrap();
        let s = &trimmed.strata[0];
        assert_eq!(s.cases.len(), 1);
        assert_eq!(s.controls, vec![3]);
    }

    #[test]
    fn config_errors() {
        let recs = vec![rec("brain", "AD", "male", Some("adult"), "a")];
        let q = Query::new();
        assert!(phase2_balance(&recs, &q, &task(-1, false)).is_err());
        let mut t = task(0, false);
        t.match_keys.push("disease".into());
        assert!(phase2_balance(&recs, &q, &t).is_err());
        let mut t = task(0, false);
        t.age_key_index = 5;
        assert!(phase2_balance(&recs, &q, &t).is_err());
        let mut t = task(0, false);
        t.age_order = vec!["child".into()];
        assert!(matches!(phase2_balance(&recs, &q, &t), Err(Error::Config(_))));
    }

    #[test]
    fn absent_control_value_gives_empty_cohort() {
        let recs = vec![rec("brain", "AD", "male", Some("adult"), "a")];
        let c = phase2_balance(&recs, &Query::new(), &task(2, true)).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn donor_split_examples() {
        let one: Vec<AttributeRecord> = (0..10).map(|_| rec("b", "AD", "male", None, "solo")).collect();
        let rows: Vec<usize> = (0..10).collect();
        let s = donor_split(
            &one,
            &rows,
            &SplitConfig {
                test_fraction: 0.2,
                cap: 0.3,
                seed: 1,
            },
        )
        .unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.train.len(), 10);

        let mut two: Vec<AttributeRecord> = (0..50).map(|_| rec("b", "AD", "male", None, "x")).collect();
        two.extend((0..50).map(|_| rec("b", "AD", "male", None, "y")));
        let rows: Vec<usize> = (0..100).collect();
        for seed in 0..8 {
            let s = donor_split(
                &two,
                &rows,
                &SplitConfig {
                    test_fraction: 0.5,
                    cap: 0.6,
                    seed,
                },
            )
            .unwrap();
            assert_eq!(s.test.len(), 50);
            assert_eq!(s.test_donors.len(), 1);
        }
        assert!(donor_split(
            &two,
            &rows,
            &SplitConfig {
                test_fraction: 1.0,
                cap: 1.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn donor_key_combines_dataset_and_donor() {
        let mut a = rec("b", "AD", "male", None, "Donor1");
        let mut b = a.clone();
        a.dataset_id = "S1".into();
        b.dataset_id = "S2".into();
        let recs = vec![a, b];
        let s = donor_split(
            &recs,
            &[0, 1],
            &SplitConfig {
                test_fraction: 0.5,
                cap: 0.5,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.train.len(), 1);
    }

    #[test]
    fn upsample_examples() {
        let rows = vec![0, 1, 2, 3, 4, 5, 6, 7];
        let labels: Vec<String> = ["a", "a", "a", "b", "b", "b", "b", "b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (r, l, rep) = upsample_rare(&rows, &labels, 5, 0, &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!(rep.added.get("a"), Some(&2));
        assert!(r[8..].iter().all(|x| *x < 3));
        assert!(l[8..].iter().all(|x| x == "a"));
        assert_eq!(rep.empty_classes, vec!["c".to_string()]);

        let (r2, l2, rep2) = upsample_rare(&rows, &labels, 3, 0, &[]).unwrap();
        assert_eq!((r2, l2), (rows.clone(), labels.clone()));
        assert!(rep2.added.is_empty());
    }

    #[test]
    fn sample_spec_is_mutually_exclusive() {
        assert!(SampleSpec::from_options(Some(0.5), Some(10)).is_err());
        assert_eq!(
            SampleSpec::from_options(None, Some(10)).unwrap(),
            Some(SampleSpec::Size(10))
        );
        assert!(SampleSpec::from_options(Some(1.5), None).is_err());
    }

    #[test]
    fn subsample_keeps_order_and_size() {
        let c = Cohort {
            rows: (0..20).collect(),
            labels: (0..20).map(|i| (i % 2).to_string()).collect(),
            ..Default::default()
        };
        let s = subsample(&c, SampleSpec::Ratio(0.25), 4);
        assert_eq!(s.rows.len(), 5);
        assert!(s.rows.windows(2).all(|w| w[0] < w[1]));
        for (r, l) in s.rows.iter().zip(&s.labels) {
            assert_eq!(*l, (r % 2).to_string());
        }
    }
}
