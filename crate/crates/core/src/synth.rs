//! Synthetic stay generator with planted disease structure.
//!
//! Each patient draws a set of latent clusters. Every cluster owns a
//! slice of each evidence vocabulary (item j belongs to cluster
//! j mod K) and a fixed set of diagnosis codes inside one cohort group,
//! so cluster k is recoverable from the cohort of its codes. Evidence
//! events come from an owned slice with probability beta and from the
//! whole vocabulary otherwise; beta 0 severs evidence from diagnosis,
//! beta 1 makes emission deterministic.
//!
//! The writer emits the ingest table layout plus two truth files, and
//! the in-memory stays are exactly what ingest reconstructs from the
//! written tables: same event order, same first-occurrence dedup.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ehr::{ClinicalEvent, EventType, EventValue};
use crate::ingest::{CodeClass, CohortTable, PatientStay};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("spec: {msg}")]
    Infeasible { msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path} line {line}: {msg}")]
    TruthParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

fn infeasible(msg: impl Into<String>) -> SynthError {
    SynthError::Infeasible { msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub patients: usize,
    pub clusters: usize,
    /// Probability an evidence event is emitted from the patient's own
    /// clusters rather than the background.
    pub beta: f64,
    /// Distinct clusters drawn per patient.
    pub diagnoses_per_patient: usize,
    pub codes_per_cluster: usize,
    pub labs: usize,
    pub symptoms: usize,
    pub prescriptions: usize,
    pub procedures: usize,
    pub microbes: usize,
    pub ethnicities: usize,
    pub labs_per_patient: usize,
    pub symptoms_per_patient: usize,
    pub prescriptions_per_patient: usize,
    pub procedures_per_patient: usize,
    pub microbes_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            patients: 1000,
            clusters: 10,
            beta: 0.9,
            diagnoses_per_patient: 1,
            codes_per_cluster: 1,
            labs: 200,
            symptoms: 150,
            prescriptions: 100,
            procedures: 60,
            microbes: 30,
            ethnicities: 5,
            labs_per_patient: 12,
            symptoms_per_patient: 8,
            prescriptions_per_patient: 6,
            procedures_per_patient: 3,
            microbes_per_patient: 1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.patients == 0 {
            return Err(infeasible("patients must be at least 1"));
        }
        if self.clusters == 0 {
            return Err(infeasible("clusters must be at least 1"));
        }
        let groups = CohortTable::default_groups().entries.len();
        if self.clusters > groups {
            return Err(infeasible(format!(
                "{} clusters exceed the {} cohort groups",
                self.clusters, groups
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(infeasible("beta must lie in [0, 1]"));
        }
        if self.diagnoses_per_patient == 0 || self.diagnoses_per_patient > self.clusters {
            return Err(infeasible(
                "diagnoses_per_patient must lie in 1..=clusters",
            ));
        }
        if self.codes_per_cluster == 0 {
            return Err(infeasible("codes_per_cluster must be at least 1"));
        }
        for (what, size) in [
            ("labs", self.labs),
            ("symptoms", self.symptoms),
            ("prescriptions", self.prescriptions),
            ("procedures", self.procedures),
            ("microbes", self.microbes),
        ] {
            if size < self.clusters {
                return Err(infeasible(format!(
                    "{what} vocabulary ({size}) is smaller than the cluster count"
                )));
            }
        }
        if self.procedures > 10_000 {
            return Err(infeasible("procedure vocabulary tops out at 10000 codes"));
        }
        if self.ethnicities == 0 {
            return Err(infeasible("ethnicities must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedTruth {
    pub stay_id: String,
    /// Ascending cluster indices.
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInfo {
    pub index: usize,
    /// Cohort group label every code of this cluster collapses into.
    pub cohort: String,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub stays: Vec<PatientStay>,
    pub truth: Vec<PlantedTruth>,
    pub clusters: Vec<ClusterInfo>,
}

/// One diagnosis code per (group, offset), shaped so the cohort table
/// maps it back to exactly that group.
fn group_code(class: CodeClass, root: u16) -> String {
    match class {
        CodeClass::Numeric => format!("{root:03}0"),
        CodeClass::V => format!("V{root:02}0"),
        CodeClass::E => format!("E{root:03}"),
    }
}

fn plan_clusters(spec: &SynthSpec, table: &CohortTable) -> Result<Vec<ClusterInfo>, SynthError> {
    let mut out = Vec::with_capacity(spec.clusters);
    for c in 0..spec.clusters {
        let entry = &table.entries[c];
        let range = entry.ranges[0];
        let capacity = (range.hi - range.lo + 1) as usize;
        if capacity < spec.codes_per_cluster {
            return Err(infeasible(format!(
                "cohort group {:?} holds {} roots, fewer than codes_per_cluster {}",
                entry.label, capacity, spec.codes_per_cluster
            )));
        }
        let codes = (0..spec.codes_per_cluster)
            .map(|i| group_code(range.class, range.lo + i as u16))
            .collect();
        out.push(ClusterInfo {
            index: c,
            cohort: entry.label.clone(),
            codes,
        });
    }
    Ok(out)
}

/// Draws `want` distinct values below `n` without replacement.
fn distinct_below<R: Rng + ?Sized>(rng: &mut R, n: usize, want: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(want);
    while picked.len() < want {
        let x = rng.random_range(0..n);
        if !picked.contains(&x) {
            picked.push(x);
        }
    }
    picked.sort_unstable();
    picked
}

/// Index of one emission: an owned item of a random planted cluster with
/// probability beta, any item otherwise. Returns the index and whether
/// the owned branch fired.
fn emit_index<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &SynthSpec,
    planted: &[usize],
    vocab: usize,
) -> (usize, bool) {
    let owned = spec.beta > 0.0 && rng.random_bool(spec.beta);
    if owned {
        let c = planted[rng.random_range(0..planted.len())];
        let slots = (vocab - c).div_ceil(spec.clusters);
        (c + spec.clusters * rng.random_range(0..slots), true)
    } else {
        (rng.random_range(0..vocab), false)
    }
}

const MICRO_INTERPS: [&str; 3] = ["sensitive", "resistant", "intermediate"];

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let table = CohortTable::default_groups();
    let clusters = plan_clusters(spec, &table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stays = Vec::with_capacity(spec.patients);
    let mut truth = Vec::with_capacity(spec.patients);

    for i in 0..spec.patients {
        let stay_id = format!("s{i:05}");
        let planted = distinct_below(&mut rng, spec.clusters, spec.diagnoses_per_patient);
        let mut events: Vec<ClinicalEvent> = Vec::new();
        let mut seen: std::collections::BTreeSet<(EventType, String, String)> =
            std::collections::BTreeSet::new();
        let mut push = |events: &mut Vec<ClinicalEvent>, event: ClinicalEvent, raw: &str| {
            let key = (event.event_type, event.name.clone(), raw.to_string());
            if seen.insert(key) {
                events.push(event);
            }
        };

        let age = rng.random_range(15..=89u32);
        push(
            &mut events,
            ClinicalEvent::new(EventType::Age, "age", Some(EventValue::Number(age as f64))),
            &age.to_string(),
        );
        let gender = if rng.random_bool(0.5) { "M" } else { "F" };
        push(
            &mut events,
            ClinicalEvent::new(EventType::Gender, gender, None),
            "",
        );
        let eth = format!("eth{}", rng.random_range(0..spec.ethnicities));
        push(
            &mut events,
            ClinicalEvent::new(EventType::Ethnicity, &eth, None),
            "",
        );
        for _ in 0..spec.labs_per_patient {
            let (j, owned) = emit_index(&mut rng, spec, &planted, spec.labs);
            // Short-circuit keeps the draw conditional on !owned, so the
            // random stream is unchanged.
            let flag = if owned || rng.random_bool(0.5) {
                "abnormal"
            } else {
                "normal"
            };
            push(
                &mut events,
                ClinicalEvent::new(
                    EventType::Laboratory,
                    format!("lab{j}"),
                    Some(EventValue::Text(flag.to_string())),
                ),
                flag,
            );
        }
        for _ in 0..spec.microbes_per_patient {
            let (j, _) = emit_index(&mut rng, spec, &planted, spec.microbes);
            let interp = MICRO_INTERPS[rng.random_range(0..MICRO_INTERPS.len())];
            push(
                &mut events,
                ClinicalEvent::new(
                    EventType::Microbiology,
                    format!("org{j}"),
                    Some(EventValue::Text(interp.to_string())),
                ),
                interp,
            );
        }
        for _ in 0..spec.symptoms_per_patient {
            let (j, _) = emit_index(&mut rng, spec, &planted, spec.symptoms);
            push(
                &mut events,
                ClinicalEvent::new(EventType::Symptom, format!("symp{j}"), None),
                "",
            );
        }
        for _ in 0..spec.prescriptions_per_patient {
            let (j, _) = emit_index(&mut rng, spec, &planted, spec.prescriptions);
            push(
                &mut events,
                ClinicalEvent::new(EventType::Prescription, format!("drug{j}"), None),
                "",
            );
        }
        for _ in 0..spec.procedures_per_patient {
            let (j, _) = emit_index(&mut rng, spec, &planted, spec.procedures);
            push(
                &mut events,
                ClinicalEvent::new(EventType::Procedure, format!("{j:04}"), None),
                "",
            );
        }
        for &c in &planted {
            for code in &clusters[c].codes {
                push(
                    &mut events,
                    ClinicalEvent::new(EventType::Diagnosis, code, None),
                    "",
                );
            }
        }
        stays.push(PatientStay { stay_id: stay_id.clone(), events });
        truth.push(PlantedTruth {
            stay_id,
            clusters: planted,
        });
    }

    Ok(SynthOutput {
        stays,
        truth,
        clusters,
    })
}

/// The table layout [`write_dataset`] emits and ingest reads back.
pub const TABLES_CONF: &str = "\
table.age.file = demo.csv
table.age.type = age
table.age.stay = stay_id
table.age.value = age
table.gender.file = demo.csv
table.gender.type = gender
table.gender.stay = stay_id
table.gender.name = gender
table.eth.file = demo.csv
table.eth.type = ethnicity
table.eth.stay = stay_id
table.eth.name = ethnicity
table.lab.file = lab.csv
table.lab.type = laboratory
table.lab.stay = stay_id
table.lab.name = test
table.lab.value = flag
table.micro.file = micro.csv
table.micro.type = microbiology
table.micro.stay = stay_id
table.micro.name = organism
table.micro.value = interpretation
table.symptom.file = symptoms.csv
table.symptom.type = symptom
table.symptom.stay = stay_id
table.symptom.name = symptom
table.pres.file = prescriptions.csv
table.pres.type = prescription
table.pres.stay = stay_id
table.pres.name = drug
table.proc.file = procedures.csv
table.proc.type = procedure
table.proc.stay = stay_id
table.proc.name = code
table.diag.file = diagnoses.csv
table.diag.type = diagnosis
table.diag.stay = stay_id
table.diag.name = code
";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> SynthError + '_ {
    move |source| SynthError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the dataset tables, `tables.conf`, and the truth files
/// `truth.tsv` (stay -> clusters) and `clusters.tsv` (cluster -> cohort
/// and codes) into `dir`.
pub fn write_dataset(output: &SynthOutput, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let open = |name: &str, headers: &[&str]| -> Result<csv::Writer<fs::File>, SynthError> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(headers).map_err(csv_err(&path))?;
        Ok(w)
    };
    let mut demo = open("demo.csv", &["stay_id", "age", "gender", "ethnicity"])?;
    let mut lab = open("lab.csv", &["stay_id", "test", "flag"])?;
    let mut micro = open("micro.csv", &["stay_id", "organism", "interpretation"])?;
    let mut symptoms = open("symptoms.csv", &["stay_id", "symptom"])?;
    let mut prescriptions = open("prescriptions.csv", &["stay_id", "drug"])?;
    let mut procedures = open("procedures.csv", &["stay_id", "code"])?;
    let mut diagnoses = open("diagnoses.csv", &["stay_id", "code"])?;

    for stay in &output.stays {
        let id = stay.stay_id.as_str();
        let mut age = String::new();
        let mut gender = "";
        let mut eth = "";
        for event in &stay.events {
            match event.event_type {
                EventType::Age => {
                    if let Some(EventValue::Number(x)) = &event.value {
                        age = format!("{}", *x as u32);
                    }
                }
                EventType::Gender => gender = &event.name,
                EventType::Ethnicity => eth = &event.name,
                _ => {}
            }
        }
        demo.write_record([id, &age, gender, eth])
            .map_err(csv_err(&dir.join("demo.csv")))?;
        for event in &stay.events {
            let name = event.name.as_str();
            let text = match &event.value {
                Some(EventValue::Text(t)) => t.as_str(),
                _ => "",
            };
            match event.event_type {
                EventType::Laboratory => lab
                    .write_record([id, name, text])
                    .map_err(csv_err(&dir.join("lab.csv")))?,
                EventType::Microbiology => micro
                    .write_record([id, name, text])
                    .map_err(csv_err(&dir.join("micro.csv")))?,
                EventType::Symptom => symptoms
                    .write_record([id, name])
                    .map_err(csv_err(&dir.join("symptoms.csv")))?,
                EventType::Prescription => prescriptions
                    .write_record([id, name])
                    .map_err(csv_err(&dir.join("prescriptions.csv")))?,
                EventType::Procedure => procedures
                    .write_record([id, name])
                    .map_err(csv_err(&dir.join("procedures.csv")))?,
                EventType::Diagnosis => diagnoses
                    .write_record([id, name])
                    .map_err(csv_err(&dir.join("diagnoses.csv")))?,
                EventType::Age | EventType::Gender | EventType::Ethnicity => {}
            }
        }
    }
    for (mut writer, name) in [
        (demo, "demo.csv"),
        (lab, "lab.csv"),
        (micro, "micro.csv"),
        (symptoms, "symptoms.csv"),
        (prescriptions, "prescriptions.csv"),
        (procedures, "procedures.csv"),
        (diagnoses, "diagnoses.csv"),
    ] {
        writer.flush().map_err(io_err(&dir.join(name)))?;
    }

    let conf_path = dir.join("tables.conf");
    fs::write(&conf_path, TABLES_CONF).map_err(io_err(&conf_path))?;

    let truth_path = dir.join("truth.tsv");
    let mut truth_text = String::new();
    for t in &output.truth {
        let ids: Vec<String> = t.clusters.iter().map(|c| c.to_string()).collect();
        truth_text.push_str(&format!("{}\t{}\n", t.stay_id, ids.join(",")));
    }
    fs::write(&truth_path, truth_text).map_err(io_err(&truth_path))?;

    let clusters_path = dir.join("clusters.tsv");
    let mut clusters_text = String::new();
    for c in &output.clusters {
        clusters_text.push_str(&format!(
            "{}\t{}\t{}\n",
            c.index,
            c.cohort,
            c.codes.join(",")
        ));
    }
    fs::write(&clusters_path, clusters_text).map_err(io_err(&clusters_path))?;
    Ok(())
}

/// Reads a `truth.tsv` written by [`write_dataset`].
pub fn read_truth(path: &Path) -> Result<Vec<PlantedTruth>, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SynthError::TruthParse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (stay_id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected stay_id<TAB>clusters".into()))?;
        let mut clusters = Vec::new();
        for part in rest.split(',') {
            clusters.push(
                part.parse::<usize>()
                    .map_err(|_| err(format!("bad cluster index {part:?}")))?,
            );
        }
        out.push(PlantedTruth {
            stay_id: stay_id.to_string(),
            clusters,
        });
    }
    Ok(out)
}
