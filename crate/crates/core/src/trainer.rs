//! Joint training: each batch flips a Bernoulli(omega) coin between the
//! skip-gram objective over path-schema pairs and a supervised hinge
//! ranking objective that pushes a patient's true diagnoses above drawn
//! negatives.
//!
//! The supervised score composes the patient from graph neighbors:
//! per diagnostic type the mean of the neighbor vectors, mixed by the
//! learned type weights, dotted with the diagnosis vector. The patient
//! node's own row never enters this score; treatment-typed neighbors
//! never enter the composition.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ehr::{EventType, TypeCategory, DIAGNOSTIC_TYPES, TREATMENT_TYPES};
use crate::embedding::{dot, unsup_step_with_decay, EmbeddingModel};
use crate::hin::{HeteroGraph, NodeId, NodeType, PathSchema};
use crate::kv;
use crate::sampling::{SamplerSet, SamplingError, SchemaWeighting};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {msg}")]
    Config { msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("patient {stay_id} has no diagnostic-category neighbors to compose from")]
    PatientUndefined { stay_id: String },
    #[error("no training patient has both diagnosis labels and diagnostic evidence")]
    NoEligiblePatients,
}

fn config_err(msg: impl Into<String>) -> TrainError {
    TrainError::Config { msg: msg.into() }
}

/// Which treatment event types participate in the unsupervised schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreatmentSubset {
    pub prescription: bool,
    pub procedure: bool,
    pub diagnosis: bool,
}

impl TreatmentSubset {
    pub fn all() -> TreatmentSubset {
        TreatmentSubset {
            prescription: true,
            procedure: true,
            diagnosis: true,
        }
    }

    pub fn none() -> TreatmentSubset {
        TreatmentSubset {
            prescription: false,
            procedure: false,
            diagnosis: false,
        }
    }

    /// Accepts `all`, `none`, or a comma list of treatment type names.
    pub fn parse(text: &str) -> Result<TreatmentSubset, TrainError> {
        match text.trim() {
            "all" => return Ok(TreatmentSubset::all()),
            "none" => return Ok(TreatmentSubset::none()),
            _ => {}
        }
        let mut subset = TreatmentSubset::none();
        for part in text.split(',') {
            match EventType::parse(part) {
                Some(EventType::Prescription) => subset.prescription = true,
                Some(EventType::Procedure) => subset.procedure = true,
                Some(EventType::Diagnosis) => subset.diagnosis = true,
                _ => {
                    return Err(config_err(format!(
                        "treatment subset entry {part:?} is not a treatment type"
                    )))
                }
            }
        }
        Ok(subset)
    }

    /// Diagnostic types are always in; treatment types by flag.
    pub fn includes(&self, t: EventType) -> bool {
        match t {
            EventType::Prescription => self.prescription,
            EventType::Procedure => self.procedure,
            EventType::Diagnosis => self.diagnosis,
            _ => true,
        }
    }

    pub fn label(&self) -> String {
        if *self == TreatmentSubset::all() {
            return "all".into();
        }
        if *self == TreatmentSubset::none() {
            return "none".into();
        }
        let mut parts = Vec::new();
        for t in TREATMENT_TYPES {
            if self.includes(t) {
                parts.push(t.abbrev());
            }
        }
        parts.join(",")
    }
}

/// Simple schemas for every included type plus the requested metapaths.
/// Restating a schema is harmless; a metapath touching an excluded
/// treatment type is a config error.
pub fn active_schemas(
    treatment: TreatmentSubset,
    metapaths: &[PathSchema],
) -> Result<Vec<PathSchema>, TrainError> {
    let mut schemas: Vec<PathSchema> = DIAGNOSTIC_TYPES
        .into_iter()
        .chain(TREATMENT_TYPES.into_iter().filter(|&t| treatment.includes(t)))
        .map(PathSchema::simple)
        .collect();
    for schema in metapaths {
        let endpoints = match schema {
            PathSchema::Simple(t) => vec![*t],
            PathSchema::Meta(a, b) => vec![*a, *b],
        };
        for t in endpoints {
            if !treatment.includes(t) {
                return Err(config_err(format!(
                    "schema {} needs excluded treatment type {}",
                    schema.label(),
                    t
                )));
            }
        }
        if !schemas.contains(schema) {
            schemas.push(schema.clone());
        }
    }
    Ok(schemas)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub omega: f64,
    pub margin: f64,
    pub lambda: f64,
    pub sup_negatives: usize,
    pub unsup_negatives: usize,
    pub negative_exponent: f64,
    pub schema_weighting: SchemaWeighting,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            dim: 128,
            epochs: 20,
            batch: 500,
            lr0: 0.025,
            omega: 0.8,
            margin: 1.0,
            lambda: 1e-4,
            sup_negatives: 100,
            unsup_negatives: 5,
            negative_exponent: 1.0,
            schema_weighting: SchemaWeighting::Uniform,
            seed: 1,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = TrainConfig::default();
        let pairs = kv::parse(&text).map_err(|e| config_err(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for (key, value) in pairs {
            if !seen.insert(key.clone()) {
                return Err(config_err(format!("duplicate key {key:?}")));
            }
            config.apply_kv(&key, &value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |what: &str| config_err(format!("{key}: bad {what} {value:?}"));
        match key {
            "dim" => self.dim = value.parse().map_err(|_| bad("integer"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("integer"))?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad("number"))?,
            "omega" => self.omega = value.parse().map_err(|_| bad("number"))?,
            "margin" => self.margin = value.parse().map_err(|_| bad("number"))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad("number"))?,
            "sup_negatives" => {
                self.sup_negatives = value.parse().map_err(|_| bad("integer"))?
            }
            "unsup_negatives" => {
                self.unsup_negatives = value.parse().map_err(|_| bad("integer"))?
            }
            "negative_exponent" => {
                self.negative_exponent = value.parse().map_err(|_| bad("number"))?
            }
            "schema_weighting" => {
                self.schema_weighting = match value {
                    "uniform" => SchemaWeighting::Uniform,
                    "counts" => SchemaWeighting::InstanceCounts,
                    _ => return Err(bad("weighting (uniform|counts)")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "log_every" => self.log_every = value.parse().map_err(|_| bad("integer"))?,
            _ => return Err(config_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dim == 0 {
            return Err(config_err("dim must be at least 1"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(config_err("epochs and batch must be at least 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(config_err("lr0 must be a positive number"));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(config_err("omega must lie in [0, 1]"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(config_err("margin must be non-negative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(config_err("lambda must be non-negative"));
        }
        if self.sup_negatives == 0 || self.unsup_negatives == 0 {
            return Err(config_err("negative counts must be at least 1"));
        }
        if !(self.negative_exponent.is_finite() && self.negative_exponent >= 0.0) {
            return Err(config_err("negative_exponent must be non-negative"));
        }
        Ok(())
    }

    /// Snapshot for run manifests, in a fixed key order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let weighting = match self.schema_weighting {
            SchemaWeighting::Uniform => "uniform",
            SchemaWeighting::InstanceCounts => "counts",
        };
        [
            ("dim", self.dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr0", self.lr0.to_string()),
            ("omega", self.omega.to_string()),
            ("margin", self.margin.to_string()),
            ("lambda", self.lambda.to_string()),
            ("sup_negatives", self.sup_negatives.to_string()),
            ("unsup_negatives", self.unsup_negatives.to_string()),
            ("negative_exponent", self.negative_exponent.to_string()),
            ("schema_weighting", weighting.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Mean neighbor vector per diagnostic type with at least one neighbor,
/// in canonical type order.
pub fn patient_type_averages(
    model: &EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
) -> Vec<(EventType, usize, Vec<f64>)> {
    let dim = model.dim();
    let mut out = Vec::new();
    for t in DIAGNOSTIC_TYPES {
        let ns = graph.neighbors(p, NodeType::Event(t));
        if ns.is_empty() {
            continue;
        }
        let mut avg = vec![0.0; dim];
        for &n in ns {
            for (a, &x) in avg.iter_mut().zip(model.vector(n)) {
                *a += x;
            }
        }
        let inv = 1.0 / ns.len() as f64;
        for a in &mut avg {
            *a *= inv;
        }
        out.push((t, ns.len(), avg));
    }
    out
}

/// Type-weighted mix of the per-type averages; None when the patient has
/// no diagnostic-category neighbors at all.
pub fn compose_patient_vector(
    model: &EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
) -> Option<Vec<f64>> {
    let averages = patient_type_averages(model, graph, p);
    if averages.is_empty() {
        return None;
    }
    let mut fp = vec![0.0; model.dim()];
    for (t, _, avg) in &averages {
        let w = model.type_weight(*t);
        for (f, &a) in fp.iter_mut().zip(avg) {
            *f += w * a;
        }
    }
    Some(fp)
}

/// Relevance of diagnosis node `d` to patient `p`, from graph evidence.
pub fn sup_score(
    model: &EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
    d: NodeId,
) -> Result<f64, TrainError> {
    let fp = compose_patient_vector(model, graph, p).ok_or_else(|| TrainError::PatientUndefined {
        stay_id: graph.node(p).identity.clone(),
    })?;
    Ok(dot(model.vector(d), &fp))
}

pub fn hinge_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

/// Summed hinge over the drawn negatives.
pub fn sup_loss(
    model: &EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
    d_pos: NodeId,
    d_negs: &[NodeId],
    margin: f64,
) -> Result<f64, TrainError> {
    let fp = compose_patient_vector(model, graph, p).ok_or_else(|| TrainError::PatientUndefined {
        stay_id: graph.node(p).identity.clone(),
    })?;
    let s_pos = dot(model.vector(d_pos), &fp);
    Ok(d_negs
        .iter()
        .map(|&d| hinge_loss(s_pos, dot(model.vector(d), &fp), margin))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupOutcome {
    pub loss: f64,
    pub violations: usize,
}

/// One ranking step without regularization. Returns the pre-update loss.
pub fn sup_step(
    model: &mut EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
    d_pos: NodeId,
    d_negs: &[NodeId],
    lr: f64,
    margin: f64,
) -> Result<SupOutcome, TrainError> {
    sup_step_with_decay(model, graph, p, d_pos, d_negs, lr, margin, 0.0)
}

/// One ranking step. When every constraint is satisfied the model is left
/// bitwise unchanged; otherwise the positive, the violated negatives, the
/// composing neighbors and the type weights move. All gradients are taken
/// at pre-update values; vectors also decay by `1 - lr*lambda`.
#[allow(clippy::too_many_arguments)]
pub fn sup_step_with_decay(
    model: &mut EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
    d_pos: NodeId,
    d_negs: &[NodeId],
    lr: f64,
    margin: f64,
    lambda: f64,
) -> Result<SupOutcome, TrainError> {
    let dim = model.dim();
    let averages = patient_type_averages(model, graph, p);
    if averages.is_empty() {
        return Err(TrainError::PatientUndefined {
            stay_id: graph.node(p).identity.clone(),
        });
    }
    let mut fp = vec![0.0; dim];
    for (t, _, avg) in &averages {
        let w = model.type_weight(*t);
        for (f, &a) in fp.iter_mut().zip(avg) {
            *f += w * a;
        }
    }

    let s_pos = dot(model.vector(d_pos), &fp);
    let mut loss = 0.0;
    let mut violations = 0usize;
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    // sum over violated negatives of f(neg) - f(d_pos), pre-update
    let mut diff = vec![0.0; dim];
    for &d in d_negs {
        let viol = dot(model.vector(d), &fp) - s_pos + margin;
        if viol > 0.0 {
            loss += viol;
            violations += 1;
            let slot = grads.entry(d).or_insert_with(|| vec![0.0; dim]);
            for ((g, f), (df, x)) in slot
                .iter_mut()
                .zip(&fp)
                .zip(diff.iter_mut().zip(model.vector(d)))
            {
                *g += *f;
                *df += *x;
            }
        }
    }
    if violations == 0 {
        return Ok(SupOutcome {
            loss: 0.0,
            violations: 0,
        });
    }
    let v = violations as f64;
    for (df, &x) in diff.iter_mut().zip(model.vector(d_pos)) {
        *df -= v * x;
    }
    {
        let slot = grads.entry(d_pos).or_insert_with(|| vec![0.0; dim]);
        for (g, &f) in slot.iter_mut().zip(&fp) {
            *g -= v * f;
        }
    }
    // neighbors feel the composed gradient through their type's share
    let mut weight_grads: Vec<(EventType, f64)> = Vec::with_capacity(averages.len());
    for (t, count, avg) in &averages {
        weight_grads.push((*t, dot(avg, &diff)));
        let coeff = model.type_weight(*t) / *count as f64;
        for &n in graph.neighbors(p, NodeType::Event(*t)) {
            let slot = grads.entry(n).or_insert_with(|| vec![0.0; dim]);
            for (g, &df) in slot.iter_mut().zip(&diff) {
                *g += coeff * df;
            }
        }
    }

    crate::embedding::apply_updates(model, &grads, lr, lambda);
    for (t, gw) in weight_grads {
        let w = model.type_weight(t);
        model.set_type_weight(t, w - lr * gw);
    }
    Ok(SupOutcome { loss, violations })
}

/// Sequential ranking pass over one patient's drawn negatives: each
/// triple (p, d_pos, neg) is scored against the then-current model and,
/// when violated, applies its own gradient step before the next triple
/// is looked at. Negatives already ranked below the positive by more
/// than the margin leave the model untouched.
#[allow(clippy::too_many_arguments)]
pub fn sup_pass(
    model: &mut EmbeddingModel,
    graph: &HeteroGraph,
    p: NodeId,
    d_pos: NodeId,
    d_negs: &[NodeId],
    lr: f64,
    margin: f64,
    lambda: f64,
) -> Result<SupOutcome, TrainError> {
    let mut total = SupOutcome {
        loss: 0.0,
        violations: 0,
    };
    for &d in d_negs {
        let out = sup_step_with_decay(
            model,
            graph,
            p,
            d_pos,
            std::slice::from_ref(&d),
            lr,
            margin,
            lambda,
        )?;
        total.loss += out.loss;
        total.violations += out.violations;
    }
    Ok(total)
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub total_batches: u64,
    pub unsup_batches: u64,
    pub sup_batches: u64,
    pub unsup_items: u64,
    pub sup_items: u64,
    /// Positive pair draws made by the unsupervised branch.
    pub positive_draws: u64,
    pub violations: u64,
    pub unsup_loss_sum: f64,
    pub sup_loss_sum: f64,
    pub dropped_schemas: Vec<String>,
}

impl TrainStats {
    pub fn mean_unsup_loss(&self) -> f64 {
        if self.unsup_items == 0 {
            0.0
        } else {
            self.unsup_loss_sum / self.unsup_items as f64
        }
    }

    pub fn mean_sup_loss(&self) -> f64 {
        if self.sup_items == 0 {
            0.0
        } else {
            self.sup_loss_sum / self.sup_items as f64
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub stats: TrainStats,
}

/// Learning rate for a batch index: linear from lr0 down to lr0/100.
fn learning_rate(config: &TrainConfig, step: u64, total: u64) -> f64 {
    let end = config.lr0 / 100.0;
    if total <= 1 {
        return config.lr0;
    }
    let t = step as f64 / (total - 1) as f64;
    config.lr0 + (end - config.lr0) * t
}

/// Trains embeddings over the graph. One batch per step, chosen by a
/// Bernoulli(omega) draw: either `batch` unsupervised pair updates or
/// `batch` patients each ranked against their drawn negatives triple by
/// triple.
pub fn train(
    graph: &HeteroGraph,
    schemas: &[PathSchema],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = EmbeddingModel::for_graph(graph, config.dim, config.seed);
    // separate stream from the init draw
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut stats = TrainStats::default();

    let mut samplers = SamplerSet::build(
        graph,
        schemas,
        config.negative_exponent,
        config.schema_weighting,
    )?;
    for dropped in &samplers.dropped {
        log::warn!("schema {} has no instances; deactivated", dropped.label());
        stats.dropped_schemas.push(dropped.label());
    }
    if config.omega > 0.0 && samplers.paths().is_empty() {
        return Err(config_err(
            "the unsupervised branch needs at least one path schema with instances",
        ));
    }

    let diag_type = NodeType::Event(EventType::Diagnosis);
    let mut eligible: Vec<NodeId> = Vec::new();
    if config.omega < 1.0 {
        samplers.ensure_negative(graph, diag_type, config.negative_exponent)?;
        let diag_total = graph.nodes_of_type(diag_type).len();
        for &p in graph.nodes_of_type(NodeType::Patient) {
            let labels = graph.neighbors(p, diag_type);
            if labels.is_empty() || labels.len() >= diag_total {
                continue;
            }
            let has_evidence = DIAGNOSTIC_TYPES
                .into_iter()
                .any(|t| !graph.neighbors(p, NodeType::Event(t)).is_empty());
            if has_evidence {
                eligible.push(p);
            }
        }
        if eligible.is_empty() {
            return Err(TrainError::NoEligiblePatients);
        }
    }

    let patients = graph.nodes_of_type(NodeType::Patient).len();
    let steps_per_epoch = (patients / config.batch).max(1) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;

    for step in 0..total_steps {
        let lr = learning_rate(config, step, total_steps);
        let unsupervised = rng.random_bool(config.omega);
        stats.total_batches += 1;
        if unsupervised {
            stats.unsup_batches += 1;
            for _ in 0..config.batch {
                let idx = samplers.sample_schema_index(&mut rng);
                let path = &samplers.paths()[idx];
                let (v, c) = path.sample_pair(graph, &mut rng);
                stats.positive_draws += 1;
                let (_, dest) = path.schema().endpoints();
                let negatives = samplers
                    .negative(dest)
                    .expect("negative sampler exists for every active dest type")
                    .sample_excluding(&mut rng, config.unsup_negatives, |u| u == c)?;
                let loss =
                    unsup_step_with_decay(&mut model, v, c, &negatives, lr, config.lambda);
                stats.unsup_items += 1;
                stats.unsup_loss_sum += loss;
            }
        } else {
            stats.sup_batches += 1;
            let diag_sampler = samplers
                .negative(diag_type)
                .expect("diagnosis negative sampler built for supervised branch");
            for _ in 0..config.batch {
                let p = eligible[rng.random_range(0..eligible.len())];
                let labels = graph.neighbors(p, diag_type);
                let d_pos = labels[rng.random_range(0..labels.len())];
                let negatives = diag_sampler.sample_excluding(
                    &mut rng,
                    config.sup_negatives,
                    |u| labels.binary_search(&u).is_ok(),
                )?;
                let outcome = sup_pass(
                    &mut model,
                    graph,
                    p,
                    d_pos,
                    &negatives,
                    lr,
                    config.margin,
                    config.lambda,
                )?;
                stats.sup_items += 1;
                stats.sup_loss_sum += outcome.loss;
                stats.violations += outcome.violations as u64;
            }
        }
        if config.log_every > 0 && (step as usize + 1).is_multiple_of(config.log_every) {
            log::info!(
                "step {}/{total_steps}: lr {lr:.6}, mean losses unsup {:.4} sup {:.4}",
                step + 1,
                stats.mean_unsup_loss(),
                stats.mean_sup_loss(),
            );
        }
    }

    Ok(TrainOutcome { model, stats })
}

/// True when an event type may appear in prediction input.
pub fn allowed_in_prediction(t: EventType) -> bool {
    t.category() == TypeCategory::Diagnostic
}
