//! Ranking diagnoses for unseen patients from a trained model alone.
//!
//! Input events must be diagnostic-category evidence; any treatment-typed
//! event in the input is refused before anything else happens, because
//! prescriptions, procedures and recorded diagnoses leak the answer into
//! the question. Evaluation therefore splits held-out stays itself: the
//! diagnostic events become the input, the diagnosis events become the
//! truth, and other treatment events are discarded.
//!
//! The model and the event mapper must agree on diagnosis identity. A
//! model trained over cohort-collapsed codes needs a mapper with the same
//! cohort table; the unknown-code counters surface a mismatch.

use std::collections::{BTreeMap, BTreeSet};

use crate::ehr::{ClinicalEvent, EventType, TypeCategory, DIAGNOSTIC_TYPES};
use crate::embedding::{dot, EmbeddingModel};
use crate::hin::{EventMapper, NodeType};
use crate::ingest::PatientStay;
use crate::metrics::{ap_at_k, auroc, ApDenominator, MetricError};

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("stay {stay_id}: {event_type} events are treatment data and may not be used as prediction input")]
    Leakage {
        event_type: EventType,
        stay_id: String,
    },
    #[error("stay {stay_id}: no event maps into the model vocabulary")]
    ColdPatient { stay_id: String },
    #[error("model has no diagnosis vectors to rank")]
    NoDiagnosisNodes,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A patient vector composed from raw events, plus how many events made
/// it into the composition and how many were unknown to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPatient {
    pub vector: Vec<f64>,
    pub known_events: usize,
    pub unknown_events: usize,
}

/// Builds the patient vector the supervised objective trains against:
/// per-type means of the matched rows, mixed by the learned type weights.
/// Events that fail to map or miss the vocabulary are skipped and
/// counted; duplicates of one node count once.
pub fn compose_patient(
    model: &EmbeddingModel,
    stay_id: &str,
    events: &[ClinicalEvent],
    mapper: &EventMapper,
) -> Result<ComposedPatient, PredictError> {
    for event in events {
        if event.event_type.category() == TypeCategory::Treatment {
            return Err(PredictError::Leakage {
                event_type: event.event_type,
                stay_id: stay_id.to_string(),
            });
        }
    }
    let mut rows: BTreeMap<EventType, BTreeSet<usize>> = BTreeMap::new();
    let mut unknown_events = 0usize;
    for event in events {
        let key = match mapper.node_key(event) {
            Ok(key) => key,
            Err(e) => {
                log::debug!("stay {stay_id}: skipping unmappable event: {e}");
                unknown_events += 1;
                continue;
            }
        };
        match model.lookup(NodeType::Event(key.event_type), &key.identity) {
            Some(id) => {
                rows.entry(key.event_type).or_default().insert(id);
            }
            None => unknown_events += 1,
        }
    }
    if rows.is_empty() {
        return Err(PredictError::ColdPatient {
            stay_id: stay_id.to_string(),
        });
    }
    let dim = model.dim();
    let mut vector = vec![0.0; dim];
    let mut known_events = 0usize;
    // same per-type mean, type order and weighting as training composition
    for t in DIAGNOSTIC_TYPES {
        let Some(ids) = rows.get(&t) else { continue };
        known_events += ids.len();
        let mut avg = vec![0.0; dim];
        for &id in ids {
            for (a, &x) in avg.iter_mut().zip(model.vector(id)) {
                *a += x;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for a in &mut avg {
            *a *= inv;
        }
        let w = model.type_weight(t);
        for (f, &a) in vector.iter_mut().zip(&avg) {
            *f += w * a;
        }
    }
    Ok(ComposedPatient {
        vector,
        known_events,
        unknown_events,
    })
}

/// Every diagnosis identity with its relevance score, best first. Ties
/// break toward the lower model row so the order is total. `k` truncates.
pub fn rank_diagnoses(
    model: &EmbeddingModel,
    patient: &[f64],
    k: Option<usize>,
) -> Result<Vec<(String, f64)>, PredictError> {
    let diag_ids = model.ids_of_type(NodeType::Event(EventType::Diagnosis));
    if diag_ids.is_empty() {
        return Err(PredictError::NoDiagnosisNodes);
    }
    let mut scored: Vec<(usize, f64)> = diag_ids
        .into_iter()
        .map(|id| (id, dot(model.vector(id), patient)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    if let Some(k) = k {
        scored.truncate(k);
    }
    Ok(scored
        .into_iter()
        .map(|(id, s)| (model.label(id).identity.clone(), s))
        .collect())
}

struct Case {
    stay_id: String,
    vector: Vec<f64>,
    truth: Vec<String>,
}

#[derive(Default)]
struct CaseCounts {
    skipped_cold: usize,
    skipped_no_truth: usize,
    unknown_events: usize,
    unknown_truth_codes: usize,
}

/// Splits each stay into evidence and truth, composing the evidence.
/// Stays with no recognizable truth or no recognizable evidence are
/// counted and dropped.
fn collect_cases(
    model: &EmbeddingModel,
    stays: &[PatientStay],
    mapper: &EventMapper,
) -> Result<(Vec<Case>, CaseCounts), PredictError> {
    let mut cases = Vec::new();
    let mut counts = CaseCounts::default();
    for stay in stays {
        let mut truth: BTreeSet<String> = BTreeSet::new();
        let mut evidence: Vec<ClinicalEvent> = Vec::new();
        for event in &stay.events {
            if event.event_type.category() == TypeCategory::Diagnostic {
                evidence.push(event.clone());
                continue;
            }
            if event.event_type != EventType::Diagnosis {
                continue;
            }
            match mapper.node_key(event) {
                Ok(key)
                    if model
                        .lookup(NodeType::Event(EventType::Diagnosis), &key.identity)
                        .is_some() =>
                {
                    truth.insert(key.identity);
                }
                _ => counts.unknown_truth_codes += 1,
            }
        }
        if truth.is_empty() {
            counts.skipped_no_truth += 1;
            continue;
        }
        match compose_patient(model, &stay.stay_id, &evidence, mapper) {
            Ok(composed) => {
                counts.unknown_events += composed.unknown_events;
                cases.push(Case {
                    stay_id: stay.stay_id.clone(),
                    vector: composed.vector,
                    truth: truth.into_iter().collect(),
                });
            }
            Err(PredictError::ColdPatient { .. }) => counts.skipped_cold += 1,
            Err(other) => return Err(other),
        }
    }
    Ok((cases, counts))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub evaluated: usize,
    pub skipped_cold: usize,
    pub skipped_no_truth: usize,
    pub unknown_events: usize,
    pub unknown_truth_codes: usize,
    /// Stays that were scored, aligned with each `per_patient` row.
    pub stay_ids: Vec<String>,
    pub map_at: BTreeMap<usize, f64>,
    pub per_patient: BTreeMap<usize, Vec<f64>>,
}

/// Ranks diagnoses for every usable held-out stay and averages precision
/// at each cutoff in `ks`.
pub fn evaluate(
    model: &EmbeddingModel,
    stays: &[PatientStay],
    mapper: &EventMapper,
    ks: &[usize],
    denom: ApDenominator,
) -> Result<EvalReport, PredictError> {
    let cutoffs: BTreeSet<usize> = ks.iter().copied().collect();
    let (cases, counts) = collect_cases(model, stays, mapper)?;
    let mut per_patient: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut stay_ids = Vec::with_capacity(cases.len());
    for case in &cases {
        let ranked: Vec<String> = rank_diagnoses(model, &case.vector, None)?
            .into_iter()
            .map(|(identity, _)| identity)
            .collect();
        for &k in &cutoffs {
            let ap = ap_at_k(&ranked, &case.truth, k, denom)?;
            per_patient.entry(k).or_default().push(ap);
        }
        stay_ids.push(case.stay_id.clone());
    }
    let mut map_at = BTreeMap::new();
    for (&k, aps) in &per_patient {
        map_at.insert(k, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    Ok(EvalReport {
        evaluated: cases.len(),
        skipped_cold: counts.skipped_cold,
        skipped_no_truth: counts.skipped_no_truth,
        unknown_events: counts.unknown_events,
        unknown_truth_codes: counts.unknown_truth_codes,
        stay_ids,
        map_at,
        per_patient,
    })
}

#[derive(Debug, Clone)]
pub struct DiscriminationReport {
    pub evaluated: usize,
    pub skipped_cold: usize,
    pub skipped_no_truth: usize,
    /// One-vs-rest ranking quality per diagnosis identity; None when the
    /// evaluated stays are single-class for that identity.
    pub auroc: BTreeMap<String, Option<f64>>,
    /// Mean over the identities with a defined value.
    pub macro_auroc: Option<f64>,
}

/// How well each diagnosis identity's score separates the stays that
/// have it from the stays that do not. With a cohort-collapsed model the
/// identities are cohort labels, so this is per-cohort discrimination.
pub fn diagnosis_aurocs(
    model: &EmbeddingModel,
    stays: &[PatientStay],
    mapper: &EventMapper,
) -> Result<DiscriminationReport, PredictError> {
    let diag_ids = model.ids_of_type(NodeType::Event(EventType::Diagnosis));
    if diag_ids.is_empty() {
        return Err(PredictError::NoDiagnosisNodes);
    }
    let (cases, counts) = collect_cases(model, stays, mapper)?;
    let mut auroc_by_label: BTreeMap<String, Option<f64>> = BTreeMap::new();
    let mut defined = Vec::new();
    for &d in &diag_ids {
        let identity = model.label(d).identity.clone();
        let mut scores = Vec::with_capacity(cases.len());
        let mut labels = Vec::with_capacity(cases.len());
        for case in &cases {
            scores.push(dot(model.vector(d), &case.vector));
            labels.push(case.truth.binary_search(&identity).is_ok());
        }
        let value = if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let v = auroc(&scores, &labels)?;
            defined.push(v);
            Some(v)
        } else {
            None
        };
        auroc_by_label.insert(identity, value);
    }
    let macro_auroc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(DiscriminationReport {
        evaluated: cases.len(),
        skipped_cold: counts.skipped_cold,
        skipped_no_truth: counts.skipped_no_truth,
        auroc: auroc_by_label,
        macro_auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EventValue, MapOptions};
    use crate::hin::{build_graph, HeteroGraph, NetworkSchema};
    use crate::trainer::compose_patient_vector;

    fn lab(name: &str) -> ClinicalEvent {
        ClinicalEvent::new(
            EventType::Laboratory,
            name,
            Some(EventValue::Text("abnormal".into())),
        )
    }

    fn ev(ty: EventType, name: &str) -> ClinicalEvent {
        ClinicalEvent::new(ty, name, None)
    }

    fn fixture() -> (HeteroGraph, EmbeddingModel) {
        let stays = vec![
            PatientStay {
                stay_id: "p1".into(),
                events: vec![
                    lab("A"),
                    lab("B"),
                    ev(EventType::Symptom, "fever"),
                    ev(EventType::Diagnosis, "0010"),
                    ev(EventType::Diagnosis, "0020"),
                ],
            },
            PatientStay {
                stay_id: "p2".into(),
                events: vec![lab("C"), ev(EventType::Diagnosis, "0030")],
            },
        ];
        let graph = build_graph(
            &stays,
            &NetworkSchema::patient_centric(),
            &EventMapper::new(MapOptions::default()),
        )
        .unwrap()
        .graph;
        let model = EmbeddingModel::for_graph(&graph, 4, 9);
        (graph, model)
    }

    #[test]
    fn treatment_input_is_refused_before_anything_else() {
        let (_, model) = fixture();
        let mapper = EventMapper::new(MapOptions::default());
        for (ty, name) in [
            (EventType::Prescription, "aspirin"),
            (EventType::Procedure, "3891"),
            (EventType::Diagnosis, "0010"),
        ] {
            let events = vec![lab("A"), ev(ty, name)];
            let err = compose_patient(&model, "s", &events, &mapper).unwrap_err();
            match err {
                PredictError::Leakage { event_type, .. } => assert_eq!(event_type, ty),
                other => panic!("expected leakage, got {other}"),
            }
        }
        // even when every event is treatment-typed and unmappable
        let events = vec![ev(EventType::Prescription, "")];
        assert!(matches!(
            compose_patient(&model, "s", &events, &mapper),
            Err(PredictError::Leakage { .. })
        ));
    }

    #[test]
    fn composition_matches_the_training_side_exactly() {
        let (graph, model) = fixture();
        let mapper = EventMapper::new(MapOptions::default());
        let p1 = graph.node_id(NodeType::Patient, "p1").unwrap();
        let from_graph = compose_patient_vector(&model, &graph, p1).unwrap();
        let events = vec![
            lab("A"),
            lab("B"),
            lab("B"),
            ev(EventType::Symptom, "fever"),
        ];
        let composed = compose_patient(&model, "p1", &events, &mapper).unwrap();
        assert_eq!(composed.vector, from_graph);
        assert_eq!(composed.known_events, 3);
        assert_eq!(composed.unknown_events, 0);
    }

    #[test]
    fn unknown_and_unmappable_events_are_counted_not_fatal() {
        let (_, model) = fixture();
        let mapper = EventMapper::new(MapOptions::default());
        let events = vec![
            lab("A"),
            lab("never-seen"),
            ClinicalEvent::new(EventType::Age, "age", Some(EventValue::Text("x".into()))),
        ];
        let composed = compose_patient(&model, "s", &events, &mapper).unwrap();
        assert_eq!(composed.known_events, 1);
        assert_eq!(composed.unknown_events, 2);

        let cold = vec![lab("never-seen")];
        assert!(matches!(
            compose_patient(&model, "s", &cold, &mapper),
            Err(PredictError::ColdPatient { .. })
        ));
    }

    #[test]
    fn ranking_is_ordered_and_breaks_ties_by_row() {
        let (graph, mut model) = fixture();
        let d = |code: &str| {
            graph
                .node_id(NodeType::Event(EventType::Diagnosis), code)
                .unwrap()
        };
        model.vector_mut(d("0010")).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        model.vector_mut(d("0020")).copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        model.vector_mut(d("0030")).copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        let ranked = rank_diagnoses(&model, &[1.0, 0.0, 0.0, 0.0], None).unwrap();
        let names: Vec<&str> = ranked.iter().map(|(n, _)| n.as_str()).collect();
        // 0020 and 0030 tie at 2.0; 0020 interned first
        assert_eq!(names, ["0020", "0030", "0010"]);
        assert_eq!(ranked[0].1, 2.0);
        let top1 = rank_diagnoses(&model, &[1.0, 0.0, 0.0, 0.0], Some(1)).unwrap();
        assert_eq!(top1.len(), 1);
    }

    #[test]
    fn evaluation_scores_only_usable_stays() {
        let (graph, mut model) = fixture();
        let mapper = EventMapper::new(MapOptions::default());
        let d = |code: &str| {
            graph
                .node_id(NodeType::Event(EventType::Diagnosis), code)
                .unwrap()
        };
        let a = graph
            .node_id(NodeType::Event(EventType::Laboratory), "A:abnormal")
            .unwrap();
        // patient composed purely of lab A ranks 0010 first, 0020 second
        for (id, row) in [
            (d("0010"), [4.0, 0.0, 0.0, 0.0]),
            (d("0020"), [2.0, 0.0, 0.0, 0.0]),
            (d("0030"), [-1.0, 0.0, 0.0, 0.0]),
        ] {
            model.vector_mut(id).copy_from_slice(&row);
        }
        model.vector_mut(a).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        for t in DIAGNOSTIC_TYPES {
            model.set_type_weight(t, if t == EventType::Laboratory { 1.0 } else { 0.0 });
        }
        let stays = vec![
            PatientStay {
                stay_id: "t1".into(),
                events: vec![lab("A"), ev(EventType::Diagnosis, "0020")],
            },
            PatientStay {
                stay_id: "t2".into(),
                // prescription present in the stay is ignored, not leaked
                events: vec![
                    lab("A"),
                    ev(EventType::Prescription, "aspirin"),
                    ev(EventType::Diagnosis, "0030"),
                ],
            },
            PatientStay {
                stay_id: "cold".into(),
                events: vec![lab("unseen"), ev(EventType::Diagnosis, "0010")],
            },
            PatientStay {
                stay_id: "no-truth".into(),
                events: vec![lab("A"), ev(EventType::Diagnosis, "9999")],
            },
        ];
        let report = evaluate(
            &model,
            &stays,
            &mapper,
            &[1, 3],
            ApDenominator::HitsInTopK,
        )
        .unwrap();
        assert_eq!(report.evaluated, 2);
        assert_eq!(report.skipped_cold, 1);
        assert_eq!(report.skipped_no_truth, 1);
        assert_eq!(report.unknown_truth_codes, 1);
        assert_eq!(report.stay_ids, ["t1", "t2"]);
        // t1: truth 0020 at rank 2 -> AP@3 = 1/2; t2: truth 0030 at rank 3
        // -> AP@3 = 1/3
        assert!((report.map_at[&3] - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(report.map_at[&1], 0.0);
        assert_eq!(report.per_patient[&3].len(), 2);
    }

    #[test]
    fn per_diagnosis_discrimination_handles_single_class() {
        let (graph, mut model) = fixture();
        let mapper = EventMapper::new(MapOptions::default());
        let d = |code: &str| {
            graph
                .node_id(NodeType::Event(EventType::Diagnosis), code)
                .unwrap()
        };
        let a = graph
            .node_id(NodeType::Event(EventType::Laboratory), "A:abnormal")
            .unwrap();
        let c = graph
            .node_id(NodeType::Event(EventType::Laboratory), "C:abnormal")
            .unwrap();
        model.vector_mut(d("0010")).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        model.vector_mut(d("0020")).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        model.vector_mut(d("0030")).copy_from_slice(&[0.0, 0.0, 0.0, 0.0]);
        model.vector_mut(a).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        model.vector_mut(c).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        for t in DIAGNOSTIC_TYPES {
            model.set_type_weight(t, if t == EventType::Laboratory { 1.0 } else { 0.0 });
        }
        let stays = vec![
            PatientStay {
                stay_id: "t1".into(),
                events: vec![lab("A"), ev(EventType::Diagnosis, "0010")],
            },
            PatientStay {
                stay_id: "t2".into(),
                events: vec![lab("C"), ev(EventType::Diagnosis, "0020")],
            },
        ];
        let report = diagnosis_aurocs(&model, &stays, &mapper).unwrap();
        // 0010: t1 scores 1, t2 scores 0, t1 positive -> perfect
        assert_eq!(report.auroc["0010"], Some(1.0));
        assert_eq!(report.auroc["0020"], Some(1.0));
        // 0030 is positive for nobody
        assert_eq!(report.auroc["0030"], None);
        assert_eq!(report.macro_auroc, Some(1.0));
    }
}
