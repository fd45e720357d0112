//! Draws for the stochastic objectives: positive endpoint pairs uniform
//! over a schema's path instances, and negatives proportional to
//! degree^alpha within the destination type.
//!
//! Positive pairs are drawn in two stages: pick the middle patient with
//! probability proportional to its instance count, then endpoints
//! uniformly among its neighbors. That equals drawing a path instance
//! uniformly at random, which the enumeration oracle in the tests checks.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use rand::Rng;

use crate::hin::{count_path_instances, HeteroGraph, NodeId, NodeType, PathSchema};

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("alias table needs at least one weight")]
    EmptyWeights,
    #[error("weight {value} at index {index} is not a finite non-negative number")]
    BadWeight { index: usize, value: f64 },
    #[error("all weights are zero")]
    ZeroMass,
    #[error("path schema {label} has no instances in this graph")]
    NoInstances { label: String },
    #[error("negative sampling over {node_type} needs at least 2 nodes, found {available}")]
    TooFewNodes {
        node_type: NodeType,
        available: usize,
    },
    #[error("could not draw a non-excluded {node_type} node")]
    ExclusionExhausted { node_type: NodeType },
    #[error("no active path schema has instances")]
    NoActiveSchemas,
}

/// Vose alias table: O(n) build, O(1) draws, deterministic layout.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<AliasTable, SamplingError> {
        if weights.is_empty() {
            return Err(SamplingError::EmptyWeights);
        }
        let mut sum = 0.0;
        for (index, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(SamplingError::BadWeight { index, value: w });
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(SamplingError::ZeroMass);
        }
        let n = weights.len();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / sum).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0usize; n];
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for &i in small.iter().chain(large.iter()) {
            prob[i] = 1.0;
            alias[i] = i;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Uniform sampler over one schema's path instances.
#[derive(Debug, Clone)]
pub struct PathSampler {
    schema: PathSchema,
    patients: Vec<NodeId>,
    patient_alias: AliasTable,
    instances: u64,
}

fn patient_instance_count(graph: &HeteroGraph, schema: &PathSchema, p: NodeId) -> u64 {
    match schema {
        PathSchema::Simple(t) => graph.neighbors(p, NodeType::Event(*t)).len() as u64,
        PathSchema::Meta(a, b) if a == b => {
            let n = graph.neighbors(p, NodeType::Event(*a)).len() as u64;
            n * n.saturating_sub(1) / 2
        }
        PathSchema::Meta(a, b) => {
            graph.neighbors(p, NodeType::Event(*a)).len() as u64
                * graph.neighbors(p, NodeType::Event(*b)).len() as u64
        }
    }
}

impl PathSampler {
    pub fn new(graph: &HeteroGraph, schema: PathSchema) -> Result<PathSampler, SamplingError> {
        let mut patients = Vec::new();
        let mut weights = Vec::new();
        for &p in graph.nodes_of_type(NodeType::Patient) {
            let count = patient_instance_count(graph, &schema, p);
            if count > 0 {
                patients.push(p);
                weights.push(count as f64);
            }
        }
        if patients.is_empty() {
            return Err(SamplingError::NoInstances {
                label: schema.label(),
            });
        }
        let instances = count_path_instances(graph, &schema);
        let patient_alias = AliasTable::new(&weights)?;
        Ok(PathSampler {
            schema,
            patients,
            patient_alias,
            instances,
        })
    }

    pub fn schema(&self) -> &PathSchema {
        &self.schema
    }

    pub fn instances(&self) -> u64 {
        self.instances
    }

    /// One endpoint pair, uniform over instances. For a simple schema the
    /// pair is (patient, event); for a metapath it is the two outer
    /// events, distinct when the endpoint types coincide.
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        graph: &HeteroGraph,
        rng: &mut R,
    ) -> (NodeId, NodeId) {
        let p = self.patients[self.patient_alias.sample(rng)];
        match &self.schema {
            PathSchema::Simple(t) => {
                let ns = graph.neighbors(p, NodeType::Event(*t));
                (p, ns[rng.random_range(0..ns.len())])
            }
            PathSchema::Meta(a, b) if a == b => {
                let ns = graph.neighbors(p, NodeType::Event(*a));
                let i = rng.random_range(0..ns.len());
                let mut j = rng.random_range(0..ns.len() - 1);
                if j >= i {
                    j += 1;
                }
                (ns[i], ns[j])
            }
            PathSchema::Meta(a, b) => {
                let xs = graph.neighbors(p, NodeType::Event(*a));
                let ys = graph.neighbors(p, NodeType::Event(*b));
                (
                    xs[rng.random_range(0..xs.len())],
                    ys[rng.random_range(0..ys.len())],
                )
            }
        }
    }
}

/// Draws nodes of one type with probability proportional to degree^alpha.
/// Alpha 0 is uniform (isolated nodes included), alpha 1 matches the
/// empirical neighbor frequency.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    node_type: NodeType,
    nodes: Vec<NodeId>,
    alias: AliasTable,
}

impl NegativeSampler {
    pub fn new(
        graph: &HeteroGraph,
        node_type: NodeType,
        alpha: f64,
    ) -> Result<NegativeSampler, SamplingError> {
        let nodes: Vec<NodeId> = graph.nodes_of_type(node_type).to_vec();
        if nodes.len() < 2 {
            return Err(SamplingError::TooFewNodes {
                node_type,
                available: nodes.len(),
            });
        }
        let weights: Vec<f64> = nodes
            .iter()
            .map(|&u| (graph.degree(u) as f64).powf(alpha))
            .collect();
        let alias = AliasTable::new(&weights)?;
        Ok(NegativeSampler {
            node_type,
            nodes,
            alias,
        })
    }

    pub fn node_type(&self) -> NodeType {
        self.node_type
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> NodeId {
        self.nodes[self.alias.sample(rng)]
    }

    /// `m` independent draws, rejecting excluded nodes. Duplicates among
    /// the draws are allowed; exclusion that starves the sampler errors
    /// instead of spinning forever.
    pub fn sample_excluding<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        m: usize,
        excluded: impl Fn(NodeId) -> bool,
    ) -> Result<Vec<NodeId>, SamplingError> {
        const MAX_REJECTS: usize = 10_000;
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            let mut rejects = 0;
            loop {
                let u = self.sample_one(rng);
                if !excluded(u) {
                    out.push(u);
                    break;
                }
                rejects += 1;
                if rejects >= MAX_REJECTS {
                    return Err(SamplingError::ExclusionExhausted {
                        node_type: self.node_type,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaWeighting {
    Uniform,
    InstanceCounts,
}

/// All samplers a training run needs: one path sampler per active schema
/// with instances, a schema chooser, and per-type negative samplers for
/// every destination endpoint.
pub struct SamplerSet {
    paths: Vec<PathSampler>,
    schema_alias: Option<AliasTable>,
    negatives: BTreeMap<NodeType, NegativeSampler>,
    /// Requested schemas that had no instances and were deactivated.
    pub dropped: Vec<PathSchema>,
}

impl SamplerSet {
    pub fn build(
        graph: &HeteroGraph,
        schemas: &[PathSchema],
        alpha: f64,
        weighting: SchemaWeighting,
    ) -> Result<SamplerSet, SamplingError> {
        let mut paths = Vec::new();
        let mut dropped = Vec::new();
        for schema in schemas {
            match PathSampler::new(graph, schema.clone()) {
                Ok(sampler) => paths.push(sampler),
                Err(SamplingError::NoInstances { .. }) => dropped.push(schema.clone()),
                Err(other) => return Err(other),
            }
        }
        if paths.is_empty() && !schemas.is_empty() {
            return Err(SamplingError::NoActiveSchemas);
        }
        let schema_alias = match weighting {
            SchemaWeighting::Uniform => None,
            SchemaWeighting::InstanceCounts => {
                let weights: Vec<f64> = paths.iter().map(|p| p.instances() as f64).collect();
                if weights.is_empty() {
                    None
                } else {
                    Some(AliasTable::new(&weights)?)
                }
            }
        };
        let mut negatives = BTreeMap::new();
        for path in &paths {
            let (_, dest) = path.schema().endpoints();
            if let Entry::Vacant(slot) = negatives.entry(dest) {
                slot.insert(NegativeSampler::new(graph, dest, alpha)?);
            }
        }
        Ok(SamplerSet {
            paths,
            schema_alias,
            negatives,
            dropped,
        })
    }

    /// Adds a negative sampler for a type no active schema targets
    /// (the supervised branch needs diagnosis negatives regardless).
    pub fn ensure_negative(
        &mut self,
        graph: &HeteroGraph,
        node_type: NodeType,
        alpha: f64,
    ) -> Result<(), SamplingError> {
        if let Entry::Vacant(slot) = self.negatives.entry(node_type) {
            slot.insert(NegativeSampler::new(graph, node_type, alpha)?);
        }
        Ok(())
    }

    pub fn paths(&self) -> &[PathSampler] {
        &self.paths
    }

    pub fn negative(&self, node_type: NodeType) -> Option<&NegativeSampler> {
        self.negatives.get(&node_type)
    }

    pub fn sample_schema_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.schema_alias {
            Some(alias) => alias.sample(rng),
            None => rng.random_range(0..self.paths.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{ClinicalEvent, EventType, EventValue, MapOptions};
    use crate::hin::{build_graph, enumerate_path_pairs, EventMapper, NetworkSchema};
    use crate::ingest::PatientStay;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn total_variation(observed: &BTreeMap<usize, u64>, expected: &BTreeMap<usize, f64>, draws: u64) -> f64 {
        let mut tv = 0.0;
        for (key, &p) in expected {
            let obs = *observed.get(key).unwrap_or(&0) as f64 / draws as f64;
            tv += (obs - p).abs();
        }
        for (key, &count) in observed {
            if !expected.contains_key(key) {
                tv += count as f64 / draws as f64;
            }
        }
        tv / 2.0
    }

    #[test]
    fn alias_table_validates_weights() {
        assert!(matches!(
            AliasTable::new(&[]),
            Err(SamplingError::EmptyWeights)
        ));
        assert!(matches!(
            AliasTable::new(&[1.0, -0.5]),
            Err(SamplingError::BadWeight { index: 1, .. })
        ));
        assert!(matches!(
            AliasTable::new(&[f64::NAN]),
            Err(SamplingError::BadWeight { .. })
        ));
        assert!(matches!(
            AliasTable::new(&[0.0, 0.0]),
            Err(SamplingError::ZeroMass)
        ));
    }

    #[test]
    fn alias_table_matches_weights_statistically() {
        let weights = [1.0, 2.0, 3.0, 4.0, 0.0];
        let table = AliasTable::new(&weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000u64;
        let mut observed: BTreeMap<usize, u64> = BTreeMap::new();
        for _ in 0..draws {
            *observed.entry(table.sample(&mut rng)).or_default() += 1;
        }
        assert_eq!(observed.get(&4), None);
        let expected: BTreeMap<usize, f64> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, w / 10.0))
            .collect();
        assert!(total_variation(&observed, &expected, draws) < 0.01);
    }

    #[test]
    fn alias_table_draws_are_deterministic() {
        let table = AliasTable::new(&[0.3, 0.5, 0.2]).unwrap();
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| table.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
        assert_ne!(seq(5), seq(6));
    }

    fn lab(name: &str) -> ClinicalEvent {
        ClinicalEvent::new(
            EventType::Laboratory,
            name,
            Some(EventValue::Text("normal".into())),
        )
    }

    fn diag(code: &str) -> ClinicalEvent {
        ClinicalEvent::new(EventType::Diagnosis, code, None)
    }

    fn sample_graph() -> crate::hin::HeteroGraph {
        let stays = vec![
            PatientStay {
                stay_id: "p1".into(),
                events: vec![lab("A"), lab("B"), lab("C"), diag("0010"), diag("0020")],
            },
            PatientStay {
                stay_id: "p2".into(),
                events: vec![lab("B"), diag("0020"), diag("0030"), diag("0040")],
            },
            PatientStay {
                stay_id: "p3".into(),
                events: vec![lab("C"), lab("D")],
            },
        ];
        build_graph(
            &stays,
            &NetworkSchema::patient_centric(),
            &EventMapper::new(MapOptions::default()),
        )
        .unwrap()
        .graph
    }

    fn pair_distribution(
        graph: &crate::hin::HeteroGraph,
        schema: &PathSchema,
    ) -> BTreeMap<(NodeId, NodeId), f64> {
        let pairs = enumerate_path_pairs(graph, schema);
        let total: u64 = pairs.values().sum();
        pairs
            .into_iter()
            .map(|(k, v)| (k, v as f64 / total as f64))
            .collect()
    }

    #[test]
    fn path_sampler_matches_instance_enumeration() {
        let graph = sample_graph();
        for schema in [
            PathSchema::simple(EventType::Laboratory),
            PathSchema::metapath(EventType::Laboratory, EventType::Diagnosis),
            PathSchema::metapath(EventType::Laboratory, EventType::Laboratory),
        ] {
            let sampler = PathSampler::new(&graph, schema.clone()).unwrap();
            let expected = pair_distribution(&graph, &schema);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let draws = 100_000u64;
            let mut observed: BTreeMap<(NodeId, NodeId), u64> = BTreeMap::new();
            for _ in 0..draws {
                let (x, y) = sampler.sample_pair(&graph, &mut rng);
                let key = if matches!(schema, PathSchema::Meta(a, b) if a == b) {
                    (x.min(y), x.max(y))
                } else {
                    (x, y)
                };
                *observed.entry(key).or_default() += 1;
            }
            let mut tv = 0.0;
            for (key, &p) in &expected {
                let obs = *observed.get(key).unwrap_or(&0) as f64 / draws as f64;
                tv += (obs - p).abs();
            }
            for (key, &c) in &observed {
                assert!(expected.contains_key(key), "impossible pair {key:?}");
                let _ = c;
            }
            tv /= 2.0;
            assert!(tv < 0.02, "{}: tv {tv}", schema.label());
        }
    }

    #[test]
    fn repeated_endpoint_pairs_are_distinct() {
        let graph = sample_graph();
        let schema = PathSchema::metapath(EventType::Laboratory, EventType::Laboratory);
        let sampler = PathSampler::new(&graph, schema).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2_000 {
            let (x, y) = sampler.sample_pair(&graph, &mut rng);
            assert_ne!(x, y);
        }
    }

    #[test]
    fn path_sampler_requires_instances() {
        let graph = sample_graph();
        let schema = PathSchema::metapath(EventType::Symptom, EventType::Diagnosis);
        assert!(matches!(
            PathSampler::new(&graph, schema),
            Err(SamplingError::NoInstances { .. })
        ));
    }

    #[test]
    fn negative_sampler_follows_degree_power() {
        let graph = sample_graph();
        let ty = NodeType::Event(EventType::Diagnosis);
        for alpha in [1.0, 0.75, 0.0] {
            let sampler = NegativeSampler::new(&graph, ty, alpha).unwrap();
            let ids = graph.nodes_of_type(ty);
            let weights: BTreeMap<usize, f64> = ids
                .iter()
                .map(|&u| (u, (graph.degree(u) as f64).powf(alpha)))
                .collect();
            let mass: f64 = weights.values().sum();
            let expected: BTreeMap<usize, f64> =
                weights.iter().map(|(&u, &w)| (u, w / mass)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let draws = 100_000u64;
            let mut observed: BTreeMap<usize, u64> = BTreeMap::new();
            for _ in 0..draws {
                *observed.entry(sampler.sample_one(&mut rng)).or_default() += 1;
            }
            assert!(
                total_variation(&observed, &expected, draws) < 0.01,
                "alpha {alpha}"
            );
        }
    }

    #[test]
    fn negative_sampler_exclusion_renormalizes() {
        let graph = sample_graph();
        let ty = NodeType::Event(EventType::Diagnosis);
        let sampler = NegativeSampler::new(&graph, ty, 1.0).unwrap();
        let ids = graph.nodes_of_type(ty);
        let banned = ids[0];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 50_000usize;
        let out = sampler
            .sample_excluding(&mut rng, draws, |u| u == banned)
            .unwrap();
        assert!(out.iter().all(|&u| u != banned));
        let mut observed: BTreeMap<usize, u64> = BTreeMap::new();
        for u in out {
            *observed.entry(u).or_default() += 1;
        }
        let weights: BTreeMap<usize, f64> = ids
            .iter()
            .filter(|&&u| u != banned)
            .map(|&u| (u, graph.degree(u) as f64))
            .collect();
        let mass: f64 = weights.values().sum();
        let expected: BTreeMap<usize, f64> =
            weights.iter().map(|(&u, &w)| (u, w / mass)).collect();
        assert!(total_variation(&observed, &expected, draws as u64) < 0.015);
    }

    #[test]
    fn exclusion_of_everything_errors() {
        let graph = sample_graph();
        let ty = NodeType::Event(EventType::Diagnosis);
        let sampler = NegativeSampler::new(&graph, ty, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sampler.sample_excluding(&mut rng, 1, |_| true),
            Err(SamplingError::ExclusionExhausted { .. })
        ));
    }

    #[test]
    fn sampler_set_drops_empty_schemas() {
        let graph = sample_graph();
        let schemas = vec![
            PathSchema::simple(EventType::Laboratory),
            PathSchema::metapath(EventType::Symptom, EventType::Diagnosis),
        ];
        let set = SamplerSet::build(&graph, &schemas, 1.0, SchemaWeighting::Uniform).unwrap();
        assert_eq!(set.paths().len(), 1);
        assert_eq!(set.dropped.len(), 1);

        let none = vec![PathSchema::metapath(EventType::Symptom, EventType::Diagnosis)];
        assert!(matches!(
            SamplerSet::build(&graph, &none, 1.0, SchemaWeighting::Uniform),
            Err(SamplingError::NoActiveSchemas)
        ));
    }

    #[test]
    fn schema_choice_respects_weighting() {
        let graph = sample_graph();
        let schemas = vec![
            PathSchema::simple(EventType::Laboratory),
            PathSchema::simple(EventType::Diagnosis),
        ];
        let uniform =
            SamplerSet::build(&graph, &schemas, 1.0, SchemaWeighting::Uniform).unwrap();
        let counted =
            SamplerSet::build(&graph, &schemas, 1.0, SchemaWeighting::InstanceCounts).unwrap();
        let freq = |set: &SamplerSet, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws = 100_000;
            let mut hits = 0u64;
            for _ in 0..draws {
                if set.sample_schema_index(&mut rng) == 0 {
                    hits += 1;
                }
            }
            hits as f64 / draws as f64
        };
        assert!((freq(&uniform, 2) - 0.5).abs() < 0.01);
        // 6 lab edges vs 5 diagnosis edges
        let lab_share = 6.0 / 11.0;
        assert!((freq(&counted, 2) - lab_share).abs() < 0.01);
    }
}
