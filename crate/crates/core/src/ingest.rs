//! Loading clinical stays from CSV event tables.
//!
//! A table spec binds each file to an event type and names the stay, name
//! and value columns. Structural problems (missing file, missing declared
//! column, malformed CSV) are fatal; bad rows are dropped and counted.
//! An under-15 age row excludes its entire stay from the sample.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ehr::{map_event, ClinicalEvent, EventType, EventValue, MapError, MapOptions};
use crate::kv;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStay {
    pub stay_id: String,
    pub events: Vec<ClinicalEvent>,
}

impl PatientStay {
    pub fn new(stay_id: impl Into<String>) -> Self {
        PatientStay {
            stay_id: stay_id.into(),
            events: Vec::new(),
        }
    }
}

/// One file-to-event-type binding from a table spec.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBinding {
    pub label: String,
    pub file: String,
    pub event_type: EventType,
    pub stay_col: String,
    pub name_col: Option<String>,
    pub value_col: Option<String>,
}

/// Parsed `table.<label>.<field> = ...` spec. Binding order follows first
/// appearance of each label, which fixes event order within a stay.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub bindings: Vec<TableBinding>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("table spec: {0}")]
    SpecSyntax(#[from] kv::KvError),
    #[error("table spec: {msg}")]
    BadSpec { msg: String },
    #[error("event table {path} does not exist")]
    MissingFile { path: PathBuf },
    #[error("table {table}: column {column:?} not found in {file}")]
    MissingColumn {
        table: String,
        column: String,
        file: String,
    },
    #[error("table {table}: {source}")]
    Csv { table: String, source: csv::Error },
    #[error("cannot split {patients} stays with test fraction {fraction}")]
    SplitInfeasible { patients: usize, fraction: f64 },
    #[error("cohort table line {line}: {msg}")]
    CohortParse { line: usize, msg: String },
    #[error("cohort ranges overlap: {a} and {b}")]
    CohortOverlap { a: String, b: String },
    #[error("{path} line {line}: {msg}")]
    StayParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl TableSpec {
    pub fn from_file(path: &Path) -> Result<TableSpec, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        TableSpec::parse(&text)
    }

    pub fn parse(text: &str) -> Result<TableSpec, IngestError> {
        let pairs = kv::parse(text)?;
        let mut order: Vec<String> = Vec::new();
        let mut fields: HashMap<String, BTreeMap<String, String>> = HashMap::new();
        for (key, value) in pairs {
            let mut parts = key.splitn(3, '.');
            let (head, label, field) = (parts.next(), parts.next(), parts.next());
            let (Some("table"), Some(label), Some(field)) = (head, label, field) else {
                return Err(IngestError::BadSpec {
                    msg: format!("unrecognized key {key:?}, expected table.<label>.<field>"),
                });
            };
            if !matches!(field, "file" | "type" | "stay" | "name" | "value") {
                return Err(IngestError::BadSpec {
                    msg: format!("unknown field {field:?} in key {key:?}"),
                });
            }
            let entry = fields.entry(label.to_string()).or_insert_with(|| {
                order.push(label.to_string());
                BTreeMap::new()
            });
            if entry.insert(field.to_string(), value).is_some() {
                return Err(IngestError::BadSpec {
                    msg: format!("duplicate key table.{label}.{field}"),
                });
            }
        }
        if order.is_empty() {
            return Err(IngestError::BadSpec {
                msg: "spec declares no tables".into(),
            });
        }
        let mut bindings = Vec::new();
        for label in order {
            let f = fields.remove(&label).unwrap();
            let require = |field: &str| {
                f.get(field).cloned().ok_or_else(|| IngestError::BadSpec {
                    msg: format!("table.{label}.{field} is missing"),
                })
            };
            let type_text = require("type")?;
            let event_type =
                EventType::parse(&type_text).ok_or_else(|| IngestError::BadSpec {
                    msg: format!("table.{label}.type: unknown event type {type_text:?}"),
                })?;
            let binding = TableBinding {
                label: label.clone(),
                file: require("file")?,
                event_type,
                stay_col: require("stay")?,
                name_col: f.get("name").cloned(),
                value_col: f.get("value").cloned(),
            };
            match event_type {
                EventType::Age => {
                    if binding.value_col.is_none() {
                        return Err(IngestError::BadSpec {
                            msg: format!("table.{label}: age tables need a value column"),
                        });
                    }
                }
                EventType::Microbiology => {
                    if binding.name_col.is_none() || binding.value_col.is_none() {
                        return Err(IngestError::BadSpec {
                            msg: format!(
                                "table.{label}: microbiology tables need name and value columns"
                            ),
                        });
                    }
                }
                _ => {
                    if binding.name_col.is_none() {
                        return Err(IngestError::BadSpec {
                            msg: format!("table.{label}: a name column is required"),
                        });
                    }
                }
            }
            bindings.push(binding);
        }
        Ok(TableSpec { bindings })
    }
}

/// Outcome of a load: surviving stays (sorted by id) plus row accounting.
/// A file serving several bindings is read once per binding and its rows
/// counted per pass. Every read row lands in exactly one bucket, so
/// `rows_read = rejected + excluded + deduplicated + accepted`.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub stays: Vec<PatientStay>,
    pub rows_read: u64,
    pub rows_rejected: u64,
    pub rows_excluded: u64,
    pub rows_deduplicated: u64,
    pub stays_excluded: u64,
    pub rejects_by_table: BTreeMap<String, u64>,
}

impl LoadReport {
    pub fn accepted_rows(&self) -> u64 {
        self.stays.iter().map(|s| s.events.len() as u64).sum()
    }
}

struct StayAcc {
    events: Vec<ClinicalEvent>,
    seen: BTreeSet<(EventType, String, String)>,
}

fn field_is_clean(text: &str) -> bool {
    !text.contains(['\t', '\n', '\r'])
}

pub fn load_tables(data_dir: &Path, spec: &TableSpec) -> Result<LoadReport, IngestError> {
    let mut report = LoadReport::default();
    let mut acc: BTreeMap<String, StayAcc> = BTreeMap::new();
    let mut excluded: BTreeSet<String> = BTreeSet::new();
    let options = MapOptions::default();

    for binding in &spec.bindings {
        let path = data_dir.join(&binding.file);
        if !path.is_file() {
            return Err(IngestError::MissingFile { path });
        }
        let mut reader =
            csv::Reader::from_path(&path).map_err(|source| IngestError::Csv {
                table: binding.label.clone(),
                source,
            })?;
        let headers = reader
            .headers()
            .map_err(|source| IngestError::Csv {
                table: binding.label.clone(),
                source,
            })?
            .clone();
        let col = |name: &Option<String>| -> Result<Option<usize>, IngestError> {
            match name {
                None => Ok(None),
                Some(n) => headers
                    .iter()
                    .position(|h| h.trim() == n)
                    .map(Some)
                    .ok_or_else(|| IngestError::MissingColumn {
                        table: binding.label.clone(),
                        column: n.clone(),
                        file: binding.file.clone(),
                    }),
            }
        };
        let stay_idx = col(&Some(binding.stay_col.clone()))?.unwrap();
        let name_idx = col(&binding.name_col)?;
        let value_idx = col(&binding.value_col)?;

        let reject = |report: &mut LoadReport, why: &str| {
            report.rows_rejected += 1;
            *report
                .rejects_by_table
                .entry(binding.label.clone())
                .or_default() += 1;
            log::debug!("table {}: rejected row: {why}", binding.label);
        };

        for record in reader.records() {
            let record = record.map_err(|source| IngestError::Csv {
                table: binding.label.clone(),
                source,
            })?;
            report.rows_read += 1;
            let stay_id = record.get(stay_idx).unwrap_or("").trim().to_string();
            if stay_id.is_empty() || !field_is_clean(&stay_id) {
                reject(&mut report, "unusable stay id");
                continue;
            }
            let raw_name = match name_idx {
                Some(i) => record.get(i).unwrap_or("").to_string(),
                None => "age".to_string(),
            };
            let raw_value = match value_idx {
                Some(i) => record.get(i).unwrap_or("").to_string(),
                None => String::new(),
            };
            if !field_is_clean(&raw_name) || !field_is_clean(&raw_value) {
                reject(&mut report, "field contains tab or newline");
                continue;
            }
            let value = match binding.event_type {
                EventType::Age => match raw_value.trim().parse::<f64>() {
                    Ok(years) => Some(EventValue::Number(years)),
                    Err(_) => {
                        reject(&mut report, "age value is not a number");
                        continue;
                    }
                },
                _ => {
                    if raw_value.trim().is_empty() {
                        None
                    } else {
                        Some(EventValue::Text(raw_value.trim().to_string()))
                    }
                }
            };
            let event = ClinicalEvent::new(binding.event_type, raw_name.trim(), value);
            match map_event(&event, &options) {
                Ok(_) => {}
                Err(MapError::UnderAge { .. }) => {
                    report.rows_excluded += 1;
                    excluded.insert(stay_id);
                    continue;
                }
                Err(err) => {
                    reject(&mut report, &err.to_string());
                    continue;
                }
            }
            let entry = acc.entry(stay_id).or_insert_with(|| StayAcc {
                events: Vec::new(),
                seen: BTreeSet::new(),
            });
            let dedup_key = (
                binding.event_type,
                event.name.clone(),
                raw_value.trim().to_string(),
            );
            if entry.seen.insert(dedup_key) {
                entry.events.push(event);
            } else {
                report.rows_deduplicated += 1;
            }
        }
    }

    for (stay_id, acc) in acc {
        if excluded.contains(&stay_id) {
            report.rows_excluded += acc.events.len() as u64;
            continue;
        }
        report.stays.push(PatientStay {
            stay_id,
            events: acc.events,
        });
    }
    report.stays_excluded = excluded.len() as u64;
    Ok(report)
}

/// Seeded shuffle split; the test side gets `round(fraction * n)` stays.
/// Both sides come back sorted by stay id.
pub fn split(
    stays: Vec<PatientStay>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatientStay>, Vec<PatientStay>), IngestError> {
    let n = stays.len();
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(IngestError::SplitInfeasible {
            patients: n,
            fraction: test_fraction,
        });
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(IngestError::SplitInfeasible {
            patients: n,
            fraction: test_fraction,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let test_set: BTreeSet<usize> = indices[..n_test].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (i, stay) in stays.into_iter().enumerate() {
        if test_set.contains(&i) {
            test.push(stay);
        } else {
            train.push(stay);
        }
    }
    train.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    test.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    Ok((train, test))
}

/// Writes stays as `stay_id \t type \t name \t value` lines.
pub fn save_stays(path: &Path, stays: &[PatientStay]) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = fs::File::create(path).map_err(io_err)?;
    let mut buf = String::new();
    for stay in stays {
        if stay.events.is_empty() {
            buf.push_str(&format!("{}\t\t\t\n", stay.stay_id));
            continue;
        }
        for ev in &stay.events {
            let value = match &ev.value {
                None => String::new(),
                Some(EventValue::Text(t)) => t.clone(),
                Some(EventValue::Number(x)) => format!("{x}"),
            };
            buf.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                stay.stay_id,
                ev.event_type.abbrev(),
                ev.name,
                value
            ));
        }
    }
    out.write_all(buf.as_bytes()).map_err(io_err)
}

/// Reads the format written by [`save_stays`]. Lines with an empty type
/// mark event-less stays. Stays come back sorted by id.
pub fn load_stays(path: &Path) -> Result<Vec<PatientStay>, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, msg: String| IngestError::StayParse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut stays: BTreeMap<String, PatientStay> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let (stay_id, ty, name, value) = (fields[0], fields[1], fields[2], fields[3]);
        if stay_id.is_empty() {
            return Err(parse_err(i + 1, "empty stay id".into()));
        }
        let stay = stays
            .entry(stay_id.to_string())
            .or_insert_with(|| PatientStay::new(stay_id));
        if ty.is_empty() {
            continue;
        }
        let event_type = EventType::parse(ty)
            .ok_or_else(|| parse_err(i + 1, format!("unknown event type {ty:?}")))?;
        let value = if value.is_empty() {
            None
        } else if event_type == EventType::Age {
            let years = value
                .parse::<f64>()
                .map_err(|_| parse_err(i + 1, format!("bad age value {value:?}")))?;
            Some(EventValue::Number(years))
        } else {
            Some(EventValue::Text(value.to_string()))
        };
        stay.events.push(ClinicalEvent::new(event_type, name, value));
    }
    Ok(stays.into_values().collect())
}

/// ICD-9 root classes a cohort range can cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeClass {
    Numeric,
    V,
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeRange {
    pub class: CodeClass,
    pub lo: u16,
    pub hi: u16,
}

impl CodeRange {
    fn contains(&self, class: CodeClass, root: u16) -> bool {
        self.class == class && (self.lo..=self.hi).contains(&root)
    }

    fn overlaps(&self, other: &CodeRange) -> bool {
        self.class == other.class && self.lo <= other.hi && other.lo <= self.hi
    }

    fn render(&self) -> String {
        match self.class {
            CodeClass::Numeric => format!("{:03}-{:03}", self.lo, self.hi),
            CodeClass::V => format!("V{:02}-V{:02}", self.lo, self.hi),
            CodeClass::E => format!("E{:03}-E{:03}", self.lo, self.hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortEntry {
    pub label: String,
    pub ranges: Vec<CodeRange>,
}

/// Coarse diagnosis groups keyed by ICD-9 root ranges. Used to collapse
/// diagnosis nodes into cohort nodes for group-level evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub entries: Vec<CohortEntry>,
}

fn parse_range_bound(text: &str, line: usize) -> Result<(CodeClass, u16), IngestError> {
    let err = |msg: String| IngestError::CohortParse { line, msg };
    let (class, digits) = match text.chars().next() {
        Some('V') => (CodeClass::V, &text[1..]),
        Some('E') => (CodeClass::E, &text[1..]),
        Some(c) if c.is_ascii_digit() => (CodeClass::Numeric, text),
        _ => return Err(err(format!("bad range bound {text:?}"))),
    };
    let expected = match class {
        CodeClass::V => 2,
        _ => 3,
    };
    if digits.len() != expected || !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(err(format!("bad range bound {text:?}")));
    }
    Ok((class, digits.parse().unwrap()))
}

impl CohortTable {
    pub fn from_file(path: &Path) -> Result<CohortTable, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        CohortTable::parse(&text)
    }

    /// Grammar: one `label: lo-hi [lo-hi ...]` per line, `#` comments.
    pub fn parse(text: &str) -> Result<CohortTable, IngestError> {
        let mut entries: Vec<CohortEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| IngestError::CohortParse { line: i + 1, msg };
            let Some((label, ranges_text)) = line.split_once(':') else {
                return Err(err(format!("expected `label: ranges`, got {line:?}")));
            };
            let label = label.trim().to_string();
            if label.is_empty() {
                return Err(err("empty label".into()));
            }
            if entries.iter().any(|e| e.label == label) {
                return Err(err(format!("duplicate label {label:?}")));
            }
            let mut ranges = Vec::new();
            for token in ranges_text.split_whitespace() {
                let Some((lo, hi)) = token.split_once('-') else {
                    return Err(err(format!("range {token:?} is not `lo-hi`")));
                };
                let (lo_class, lo) = parse_range_bound(lo, i + 1)?;
                let (hi_class, hi) = parse_range_bound(hi, i + 1)?;
                if lo_class != hi_class {
                    return Err(err(format!("range {token:?} mixes code classes")));
                }
                if lo > hi {
                    return Err(err(format!("range {token:?} is reversed")));
                }
                ranges.push(CodeRange {
                    class: lo_class,
                    lo,
                    hi,
                });
            }
            if ranges.is_empty() {
                return Err(err(format!("label {label:?} has no ranges")));
            }
            entries.push(CohortEntry { label, ranges });
        }
        if entries.is_empty() {
            return Err(IngestError::CohortParse {
                line: 0,
                msg: "cohort table is empty".into(),
            });
        }
        let table = CohortTable { entries };
        table.check_disjoint()?;
        Ok(table)
    }

    fn check_disjoint(&self) -> Result<(), IngestError> {
        for (i, a) in self.entries.iter().enumerate() {
            for ra in &a.ranges {
                for b in &self.entries[i..] {
                    for rb in &b.ranges {
                        if std::ptr::eq(ra, rb) {
                            continue;
                        }
                        if ra.overlaps(rb) {
                            return Err(IngestError::CohortOverlap {
                                a: format!("{}: {}", a.label, ra.render()),
                                b: format!("{}: {}", b.label, rb.render()),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The standard twenty-group table: seventeen numeric chapters plus
    /// V codes, E codes and a residual group.
    pub fn default_groups() -> CohortTable {
        let text = "\
infectious parasitic: 001-139
neoplasms: 140-239
endocrine metabolic: 240-279
blood organs: 280-289
mental disorders: 290-319
nervous system: 320-389
circulatory system: 390-459
respiratory system: 460-519
digestive system: 520-579
genitourinary system: 580-629
pregnancy childbirth: 630-679
skin tissue: 680-709
musculoskeletal: 710-739
congenital anomalies: 740-759
perinatal conditions: 760-779
ill-defined symptoms: 780-799
injury poisoning: 800-999
supplementary factors: V01-V91
external causes: E000-E999
residual: 000-000
";
        CohortTable::parse(text).expect("built-in cohort table parses")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            let ranges: Vec<String> = entry.ranges.iter().map(|r| r.render()).collect();
            out.push_str(&format!("{}: {}\n", entry.label, ranges.join(" ")));
        }
        out
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    /// Maps a normalized ICD-9 code to its cohort by three-character root
    /// (V roots keep two digits, E roots three). Codes too short to carry
    /// a root, or outside every range, map to nothing.
    pub fn map_code(&self, code: &str) -> Option<&str> {
        let (class, digits) = match code.chars().next()? {
            'V' => (CodeClass::V, code.get(1..3)?),
            'E' => (CodeClass::E, code.get(1..4)?),
            c if c.is_ascii_digit() => (CodeClass::Numeric, code.get(0..3)?),
            _ => return None,
        };
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let root: u16 = digits.parse().ok()?;
        self.entries
            .iter()
            .find(|e| e.ranges.iter().any(|r| r.contains(class, root)))
            .map(|e| e.label.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SPEC: &str = "\
table.demo_gender.file = demo.csv
table.demo_gender.type = gender
table.demo_gender.stay = stay_id
table.demo_gender.name = gender

table.demo_age.file = demo.csv
table.demo_age.type = age
table.demo_age.stay = stay_id
table.demo_age.value = age_years

table.labs.file = lab.csv
table.labs.type = laboratory
table.labs.stay = stay_id
table.labs.name = test_name
table.labs.value = flag

table.dx.file = diagnoses.csv
table.dx.type = diagnosis
table.dx.stay = stay_id
table.dx.name = icd9_code
";

    fn write_fixture(dir: &Path) {
        fs::write(
            dir.join("demo.csv"),
            "stay_id,gender,age_years\ns1,M,40\ns2,F,22\ns3,F,9\n",
        )
        .unwrap();
        fs::write(
            dir.join("lab.csv"),
            "stay_id,test_name,flag\n\
             s1,Glucose,abnormal\n\
             s1,Glucose,abnormal\n\
             s1,Sodium,\n\
             s2,Glucose,delta\n\
             s3,Sodium,normal\n",
        )
        .unwrap();
        fs::write(
            dir.join("diagnoses.csv"),
            "stay_id,icd9_code\ns1,4280\ns2,heart failure\ns2,V4511\n",
        )
        .unwrap();
    }

    #[test]
    fn spec_parse_reads_bindings_in_order() {
        let spec = TableSpec::parse(SPEC).unwrap();
        let labels: Vec<&str> = spec.bindings.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["demo_gender", "demo_age", "labs", "dx"]);
        assert_eq!(spec.bindings[1].event_type, EventType::Age);
        assert_eq!(spec.bindings[1].name_col, None);
    }

    #[test]
    fn spec_parse_rejects_structural_problems() {
        assert!(TableSpec::parse("").is_err());
        assert!(TableSpec::parse("x = 1").is_err());
        assert!(TableSpec::parse("table.a.file = f\ntable.a.type = nope\ntable.a.stay = s").is_err());
        // age without a value column
        assert!(TableSpec::parse(
            "table.a.file = f\ntable.a.type = age\ntable.a.stay = s"
        )
        .is_err());
        // microbiology without an interpretation column
        assert!(TableSpec::parse(
            "table.m.file = f\ntable.m.type = microbiology\ntable.m.stay = s\ntable.m.name = org"
        )
        .is_err());
        assert!(TableSpec::parse(
            "table.a.file = f\ntable.a.file = g\ntable.a.type = gender\ntable.a.stay = s\ntable.a.name = n"
        )
        .is_err());
    }

    #[test]
    fn load_counts_every_row_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let spec = TableSpec::parse(SPEC).unwrap();
        let report = load_tables(dir.path(), &spec).unwrap();

        // s3 is excluded by age 9; its lab row counts as excluded too.
        assert_eq!(report.stays_excluded, 1);
        let ids: Vec<&str> = report.stays.iter().map(|s| s.stay_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2"]);

        // s2's bad flag and bad code are rejected; duplicate Glucose row
        // dedups; s3's gender, age and lab rows are all excluded. demo.csv
        // feeds two bindings, so its rows are read once per binding.
        assert_eq!(report.rows_read, 14);
        assert_eq!(report.rows_rejected, 2);
        assert_eq!(report.rows_deduplicated, 1);
        assert_eq!(report.rows_excluded, 3);
        assert_eq!(report.accepted_rows(), 8);
        assert_eq!(
            report.rows_read,
            report.rows_rejected
                + report.rows_excluded
                + report.rows_deduplicated
                + report.accepted_rows()
        );
        assert_eq!(report.rejects_by_table.get("labs"), Some(&1));
        assert_eq!(report.rejects_by_table.get("dx"), Some(&1));

        let s1 = &report.stays[0];
        assert_eq!(s1.events.len(), 5); // gender, age, two labs, one diagnosis
        let s2 = &report.stays[1];
        assert!(s2
            .events
            .iter()
            .any(|e| e.event_type == EventType::Diagnosis && e.name == "V4511"));
    }

    #[test]
    fn load_fails_fast_on_missing_structures() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TableSpec::parse(SPEC).unwrap();
        assert!(matches!(
            load_tables(dir.path(), &spec),
            Err(IngestError::MissingFile { .. })
        ));
        write_fixture(dir.path());
        fs::write(dir.path().join("lab.csv"), "stay_id,test_name\ns1,Glucose\n").unwrap();
        assert!(matches!(
            load_tables(dir.path(), &spec),
            Err(IngestError::MissingColumn { .. })
        ));
    }

    #[test]
    fn split_rounds_and_rejects_degenerate_fractions() {
        let stays: Vec<PatientStay> = (0..10).map(|i| PatientStay::new(format!("s{i}"))).collect();
        let (train, test) = split(stays.clone(), 0.2, 7).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
        assert!(split(stays.clone(), 0.0, 7).is_err());
        assert!(split(stays.clone(), 1.0, 7).is_err());
        assert!(split(vec![PatientStay::new("a")], 0.5, 7).is_err());
    }

    #[test]
    fn stay_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stays = vec![
            PatientStay {
                stay_id: "s1".into(),
                events: vec![
                    ClinicalEvent::new(EventType::Age, "age", Some(EventValue::Number(40.0))),
                    ClinicalEvent::new(
                        EventType::Laboratory,
                        "Glucose",
                        Some(EventValue::Text("abnormal".into())),
                    ),
                    ClinicalEvent::new(EventType::Laboratory, "Sodium", None),
                ],
            },
            PatientStay::new("s2"),
        ];
        let path = dir.path().join("stays.tsv");
        save_stays(&path, &stays).unwrap();
        let loaded = load_stays(&path).unwrap();
        assert_eq!(loaded, stays);
    }

    #[test]
    fn default_cohorts_place_the_reference_codes() {
        let table = CohortTable::default_groups();
        assert_eq!(table.entries.len(), 20);
        assert_eq!(table.map_code("4282"), Some("circulatory system"));
        assert_eq!(table.map_code("2875"), Some("blood organs"));
        assert_eq!(table.map_code("V4511"), Some("supplementary factors"));
        assert_eq!(table.map_code("E8889"), Some("external causes"));
        assert_eq!(table.map_code("0031"), Some("infectious parasitic"));
        assert_eq!(table.map_code("0000"), Some("residual"));
        // An E code with no three-digit root maps nowhere.
        assert_eq!(table.map_code("E88"), None);
    }

    #[test]
    fn cohort_parse_round_trips_and_rejects_overlap() {
        let table = CohortTable::default_groups();
        let again = CohortTable::parse(&table.render()).unwrap();
        assert_eq!(table, again);
        assert!(matches!(
            CohortTable::parse("a: 100-200\nb: 150-300\n"),
            Err(IngestError::CohortOverlap { .. })
        ));
        assert!(CohortTable::parse("a: 200-100\n").is_err());
        assert!(CohortTable::parse("a: V1-V2\n").is_err());
    }

    proptest! {
        #[test]
        fn split_is_deterministic_and_partitions(
            n in 2usize..60,
            frac in 0.05f64..0.95,
            seed in 0u64..1000,
        ) {
            let stays: Vec<PatientStay> =
                (0..n).map(|i| PatientStay::new(format!("s{i:03}"))).collect();
            let expected = (frac * n as f64).round() as usize;
            prop_assume!(expected > 0 && expected < n);
            let (tr1, te1) = split(stays.clone(), frac, seed).unwrap();
            let (tr2, te2) = split(stays.clone(), frac, seed).unwrap();
            prop_assert_eq!(&tr1, &tr2);
            prop_assert_eq!(&te1, &te2);
            prop_assert_eq!(te1.len(), expected);
            let mut all: Vec<String> = tr1
                .iter()
                .chain(te1.iter())
                .map(|s| s.stay_id.clone())
                .collect();
            all.sort();
            let mut orig: Vec<String> = stays.iter().map(|s| s.stay_id.clone()).collect();
            orig.sort();
            prop_assert_eq!(all, orig);
        }
    }
}
