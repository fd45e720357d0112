//! Clinical event model: the nine event types, their split into
//! diagnostic evidence vs. treatment decisions, and the normalization
//! that turns a raw event into a graph node identity.
//!
//! Treatment events (prescriptions, procedures, diagnoses) may appear in
//! training graphs but are forbidden as prediction input; the category on
//! [`EventType`] is what the leakage guards check.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventType {
    Laboratory,
    Symptom,
    Age,
    Gender,
    Ethnicity,
    Microbiology,
    Prescription,
    Procedure,
    Diagnosis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeCategory {
    Diagnostic,
    Treatment,
}

/// Event types usable as prediction input, in canonical order.
pub const DIAGNOSTIC_TYPES: [EventType; 6] = [
    EventType::Laboratory,
    EventType::Symptom,
    EventType::Age,
    EventType::Gender,
    EventType::Ethnicity,
    EventType::Microbiology,
];

pub const TREATMENT_TYPES: [EventType; 3] = [
    EventType::Prescription,
    EventType::Procedure,
    EventType::Diagnosis,
];

pub const ALL_EVENT_TYPES: [EventType; 9] = [
    EventType::Laboratory,
    EventType::Symptom,
    EventType::Age,
    EventType::Gender,
    EventType::Ethnicity,
    EventType::Microbiology,
    EventType::Prescription,
    EventType::Procedure,
    EventType::Diagnosis,
];

impl EventType {
    pub fn category(self) -> TypeCategory {
        match self {
            EventType::Prescription | EventType::Procedure | EventType::Diagnosis => {
                TypeCategory::Treatment
            }
            _ => TypeCategory::Diagnostic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventType::Laboratory => "laboratory",
            EventType::Symptom => "symptom",
            EventType::Age => "age",
            EventType::Gender => "gender",
            EventType::Ethnicity => "ethnicity",
            EventType::Microbiology => "microbiology",
            EventType::Prescription => "prescription",
            EventType::Procedure => "procedure",
            EventType::Diagnosis => "diagnosis",
        }
    }

    /// Short tag used in graph dumps, stay files and path-schema labels.
    pub fn abbrev(self) -> &'static str {
        match self {
            EventType::Laboratory => "lab",
            EventType::Symptom => "symp",
            EventType::Age => "age",
            EventType::Gender => "gen",
            EventType::Ethnicity => "eth",
            EventType::Microbiology => "micro",
            EventType::Prescription => "pres",
            EventType::Procedure => "proc",
            EventType::Diagnosis => "diag",
        }
    }

    /// Accepts either the full name or the short tag.
    pub fn parse(text: &str) -> Option<EventType> {
        let t = text.trim();
        ALL_EVENT_TYPES
            .into_iter()
            .find(|ty| ty.name() == t || ty.abbrev() == t)
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw value column payload. Labs carry an optional flag, microbiology an
/// interpretation, age a number of years; other types carry nothing.
#[derive(Debug, Clone, PartialEq)]
pub enum EventValue {
    Text(String),
    Number(f64),
}

/// One event row tied to a stay, before graph mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalEvent {
    pub event_type: EventType,
    pub name: String,
    pub value: Option<EventValue>,
}

impl ClinicalEvent {
    pub fn new(
        event_type: EventType,
        name: impl Into<String>,
        value: Option<EventValue>,
    ) -> Self {
        ClinicalEvent {
            event_type,
            name: name.into(),
            value,
        }
    }
}

/// Normalized graph node identity for an event.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeKey {
    pub event_type: EventType,
    pub identity: String,
}

impl NodeKey {
    pub fn new(event_type: EventType, identity: impl Into<String>) -> Self {
        NodeKey {
            event_type,
            identity: identity.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabFlag {
    Normal,
    Abnormal,
}

impl LabFlag {
    pub fn parse(text: &str) -> Option<LabFlag> {
        match text.trim().to_lowercase().as_str() {
            "normal" => Some(LabFlag::Normal),
            "abnormal" => Some(LabFlag::Abnormal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabFlag::Normal => "normal",
            LabFlag::Abnormal => "abnormal",
        }
    }
}

/// Knobs for event-to-node mapping that are policy, not data.
#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    /// Flag assumed when a laboratory row has an empty flag column.
    pub missing_lab_flag: LabFlag,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            missing_lab_flag: LabFlag::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapError {
    #[error("{event_type} event with empty name")]
    EmptyName { event_type: EventType },
    #[error("laboratory flag {flag:?} is not `normal` or `abnormal`")]
    BadLabFlag { flag: String },
    #[error("microbiology interpretation {value:?} is not sensitive/resistant/intermediate")]
    BadInterpretation { value: String },
    #[error("{event_type} event is missing its value column")]
    MissingValue { event_type: EventType },
    #[error("{event_type} event carries a value of the wrong kind")]
    WrongValueKind { event_type: EventType },
    #[error("age {years} is below the study minimum of 15")]
    UnderAge { years: f64 },
    #[error("age {years} is not a usable number")]
    BadAge { years: f64 },
    #[error("{event_type} code {code:?} fails ICD-9 shape rules")]
    BadCode { event_type: EventType, code: String },
    #[error("diagnosis code {code:?} falls outside every cohort range")]
    CohortUnmapped { code: String },
}

/// `name:flag`, defaulting a missing flag to `normal`.
pub fn map_lab_event(name: &str, flag: Option<&str>) -> Result<NodeKey, MapError> {
    map_lab_event_with_default(name, flag, LabFlag::Normal)
}

pub fn map_lab_event_with_default(
    name: &str,
    flag: Option<&str>,
    missing: LabFlag,
) -> Result<NodeKey, MapError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(MapError::EmptyName {
            event_type: EventType::Laboratory,
        });
    }
    let flag = match flag.map(str::trim) {
        None | Some("") => missing,
        Some(text) => LabFlag::parse(text).ok_or_else(|| MapError::BadLabFlag {
            flag: text.to_string(),
        })?,
    };
    Ok(NodeKey::new(
        EventType::Laboratory,
        format!("{name}:{}", flag.as_str()),
    ))
}

/// `organism:interpretation`; the interpretation is mandatory.
pub fn map_micro_event(name: &str, interpretation: &str) -> Result<NodeKey, MapError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(MapError::EmptyName {
            event_type: EventType::Microbiology,
        });
    }
    let interp = match interpretation.trim().to_lowercase().as_str() {
        "sensitive" => "sensitive",
        "resistant" => "resistant",
        "intermediate" => "intermediate",
        other => {
            return Err(MapError::BadInterpretation {
                value: other.to_string(),
            })
        }
    };
    Ok(NodeKey::new(
        EventType::Microbiology,
        format!("{name}:{interp}"),
    ))
}

/// Buckets years into `age:15-30`, `age:30-64` or `age:64+`. Ages below 15
/// are an excluded-sample error, not a bucket.
pub fn map_age(years: f64) -> Result<NodeKey, MapError> {
    if !years.is_finite() {
        return Err(MapError::BadAge { years });
    }
    if years < 15.0 {
        return Err(MapError::UnderAge { years });
    }
    let bucket = if years < 30.0 {
        "age:15-30"
    } else if years <= 64.0 {
        "age:30-64"
    } else {
        "age:64+"
    };
    Ok(NodeKey::new(EventType::Age, bucket))
}

pub fn validate_icd9(code: &str) -> bool {
    let code = code.trim();
    if code.len() < 3 || code.len() > 5 {
        return false;
    }
    let mut chars = code.chars();
    let first = chars.next().unwrap();
    if !(first.is_ascii_digit() || first == 'E' || first == 'V') {
        return false;
    }
    chars.all(|c| c.is_ascii_digit())
}

/// Uppercased, trimmed ICD-9 code for procedures and diagnoses.
pub fn map_coded_event(event_type: EventType, code: &str) -> Result<NodeKey, MapError> {
    let code = code.trim().to_uppercase();
    if code.is_empty() {
        return Err(MapError::EmptyName { event_type });
    }
    if !validate_icd9(&code) {
        return Err(MapError::BadCode { event_type, code });
    }
    Ok(NodeKey::new(event_type, code))
}

/// Case-folded, trimmed name for symptom, gender, ethnicity and
/// prescription events.
pub fn map_categorical(event_type: EventType, name: &str) -> Result<NodeKey, MapError> {
    let folded = name.trim().to_lowercase();
    if folded.is_empty() {
        return Err(MapError::EmptyName { event_type });
    }
    Ok(NodeKey::new(event_type, folded))
}

/// Dispatches an event to the mapping rule for its type.
pub fn map_event(event: &ClinicalEvent, options: &MapOptions) -> Result<NodeKey, MapError> {
    let ty = event.event_type;
    match ty {
        EventType::Laboratory => {
            let flag = match &event.value {
                None => None,
                Some(EventValue::Text(t)) => Some(t.as_str()),
                Some(EventValue::Number(_)) => {
                    return Err(MapError::WrongValueKind { event_type: ty })
                }
            };
            map_lab_event_with_default(&event.name, flag, options.missing_lab_flag)
        }
        EventType::Microbiology => match &event.value {
            Some(EventValue::Text(t)) => map_micro_event(&event.name, t),
            Some(EventValue::Number(_)) => Err(MapError::WrongValueKind { event_type: ty }),
            None => Err(MapError::MissingValue { event_type: ty }),
        },
        EventType::Age => match &event.value {
            Some(EventValue::Number(years)) => map_age(*years),
            Some(EventValue::Text(_)) => Err(MapError::WrongValueKind { event_type: ty }),
            None => Err(MapError::MissingValue { event_type: ty }),
        },
        EventType::Procedure | EventType::Diagnosis => map_coded_event(ty, &event.name),
        EventType::Symptom | EventType::Gender | EventType::Ethnicity | EventType::Prescription => {
            map_categorical(ty, &event.name)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn categories_partition_the_event_types() {
        assert_eq!(DIAGNOSTIC_TYPES.len() + TREATMENT_TYPES.len(), 9);
        for ty in DIAGNOSTIC_TYPES {
            assert_eq!(ty.category(), TypeCategory::Diagnostic);
        }
        for ty in TREATMENT_TYPES {
            assert_eq!(ty.category(), TypeCategory::Treatment);
        }
    }

    #[test]
    fn event_type_parse_round_trips() {
        for ty in ALL_EVENT_TYPES {
            assert_eq!(EventType::parse(ty.name()), Some(ty));
            assert_eq!(EventType::parse(ty.abbrev()), Some(ty));
        }
        assert_eq!(EventType::parse("drug"), None);
    }

    #[test]
    fn lab_mapping_normalizes_flags() {
        let key = map_lab_event("Glucose", Some("abnormal")).unwrap();
        assert_eq!(key.identity, "Glucose:abnormal");
        assert_eq!(
            map_lab_event("Glucose", None).unwrap().identity,
            "Glucose:normal"
        );
        assert_eq!(
            map_lab_event("Glucose", Some(" ABNORMAL ")).unwrap().identity,
            "Glucose:abnormal"
        );
        assert_eq!(
            map_lab_event_with_default("Glucose", None, LabFlag::Abnormal)
                .unwrap()
                .identity,
            "Glucose:abnormal"
        );
        assert!(matches!(
            map_lab_event("Glucose", Some("delta")),
            Err(MapError::BadLabFlag { .. })
        ));
        assert!(matches!(
            map_lab_event("  ", None),
            Err(MapError::EmptyName { .. })
        ));
    }

    #[test]
    fn micro_mapping_requires_known_interpretation() {
        let key = map_micro_event("E. coli", "Sensitive").unwrap();
        assert_eq!(key.identity, "E. coli:sensitive");
        assert!(matches!(
            map_micro_event("E. coli", "unknown"),
            Err(MapError::BadInterpretation { .. })
        ));
    }

    #[test]
    fn age_buckets_have_the_documented_edges() {
        assert_eq!(map_age(15.0).unwrap().identity, "age:15-30");
        assert_eq!(map_age(29.999).unwrap().identity, "age:15-30");
        assert_eq!(map_age(30.0).unwrap().identity, "age:30-64");
        assert_eq!(map_age(64.0).unwrap().identity, "age:30-64");
        assert_eq!(map_age(64.01).unwrap().identity, "age:64+");
        assert_eq!(map_age(91.0).unwrap().identity, "age:64+");
        assert!(matches!(map_age(14.9), Err(MapError::UnderAge { .. })));
        assert!(matches!(map_age(f64::NAN), Err(MapError::BadAge { .. })));
    }

    #[test]
    fn coded_events_enforce_icd9_shape() {
        assert_eq!(
            map_coded_event(EventType::Diagnosis, "4280").unwrap().identity,
            "4280"
        );
        assert_eq!(
            map_coded_event(EventType::Diagnosis, " v4511 ").unwrap().identity,
            "V4511"
        );
        assert_eq!(
            map_coded_event(EventType::Procedure, "e888").unwrap().identity,
            "E888"
        );
        for bad in ["42", "428000", "heart failure", "4x80", "W123", ""] {
            assert!(
                map_coded_event(EventType::Diagnosis, bad).is_err(),
                "{bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn categorical_mapping_case_folds() {
        let a = map_categorical(EventType::Symptom, " Fever ").unwrap();
        let b = map_categorical(EventType::Symptom, "fever").unwrap();
        assert_eq!(a, b);
        assert!(map_categorical(EventType::Gender, "\t").is_err());
    }

    #[test]
    fn map_event_checks_value_kinds() {
        let ev = ClinicalEvent::new(
            EventType::Age,
            "age",
            Some(EventValue::Text("old".into())),
        );
        assert!(matches!(
            map_event(&ev, &MapOptions::default()),
            Err(MapError::WrongValueKind { .. })
        ));
        let ev = ClinicalEvent::new(EventType::Microbiology, "E. coli", None);
        assert!(matches!(
            map_event(&ev, &MapOptions::default()),
            Err(MapError::MissingValue { .. })
        ));
        let ev = ClinicalEvent::new(EventType::Symptom, "Fever", None);
        assert_eq!(
            map_event(&ev, &MapOptions::default()).unwrap().identity,
            "fever"
        );
    }

    proptest! {
        #[test]
        fn categorical_mapping_is_idempotent(name in "[A-Za-z][A-Za-z ]{0,20}") {
            let once = map_categorical(EventType::Symptom, &name).unwrap();
            let twice = map_categorical(EventType::Symptom, &once.identity).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn valid_icd9_codes_are_accepted(
            first in prop::sample::select(vec!["0", "5", "9", "E", "V"]),
            rest in "[0-9]{2,4}",
        ) {
            let code = format!("{first}{rest}");
            prop_assert_eq!(validate_icd9(&code), code.len() <= 5);
        }

        #[test]
        fn age_mapping_never_panics(years in prop::num::f64::ANY) {
            let _ = map_age(years);
        }
    }
}
