//! The typed clinical graph: one patient node per stay, one event node
//! per normalized event identity, binary undirected edges between them.
//! Path schemas describe the length-2 and length-3 patient-centric walks
//! that drive positive sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::ehr::{
    map_event, ClinicalEvent, EventType, MapError, MapOptions, NodeKey, ALL_EVENT_TYPES,
};
use crate::ingest::{CohortTable, PatientStay};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    Patient,
    Event(EventType),
}

impl NodeType {
    pub fn abbrev(self) -> &'static str {
        match self {
            NodeType::Patient => "pati",
            NodeType::Event(t) => t.abbrev(),
        }
    }

    pub fn parse(text: &str) -> Option<NodeType> {
        let t = text.trim();
        if t == "pati" || t == "patient" {
            return Some(NodeType::Patient);
        }
        EventType::parse(t).map(NodeType::Event)
    }

    pub fn all() -> impl Iterator<Item = NodeType> {
        std::iter::once(NodeType::Patient).chain(ALL_EVENT_TYPES.into_iter().map(NodeType::Event))
    }
}

impl std::fmt::Display for NodeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeType::Patient => f.write_str("patient"),
            NodeType::Event(t) => f.write_str(t.name()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HinError {
    #[error("event type {0} is outside the network schema")]
    TypeOutsideSchema(EventType),
    #[error("path label {0:?} is not `pati-<type>` or `<type>-<type>`")]
    BadPathLabel(String),
    #[error("path {0:?} uses a link the network schema does not allow")]
    PathOutsideSchema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

/// The allowed link pairs. The patient-centric schema links patients to
/// each of the nine event types and nothing else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSchema {
    pairs: Vec<(NodeType, NodeType)>,
}

fn canonical_pair(a: NodeType, b: NodeType) -> (NodeType, NodeType) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl NetworkSchema {
    pub fn patient_centric() -> NetworkSchema {
        NetworkSchema {
            pairs: ALL_EVENT_TYPES
                .into_iter()
                .map(|t| (NodeType::Patient, NodeType::Event(t)))
                .collect(),
        }
    }

    pub fn allows(&self, a: NodeType, b: NodeType) -> bool {
        self.pairs.contains(&canonical_pair(a, b))
    }

    pub fn pairs(&self) -> &[(NodeType, NodeType)] {
        &self.pairs
    }
}

/// Applies the per-type mapping rules, then optionally collapses
/// diagnosis codes into cohort labels.
#[derive(Debug, Clone, Copy)]
pub struct EventMapper<'a> {
    pub options: MapOptions,
    pub diag_cohorts: Option<&'a CohortTable>,
}

impl EventMapper<'static> {
    pub fn new(options: MapOptions) -> EventMapper<'static> {
        EventMapper {
            options,
            diag_cohorts: None,
        }
    }
}

impl<'a> EventMapper<'a> {
    pub fn with_cohorts(options: MapOptions, table: &'a CohortTable) -> EventMapper<'a> {
        EventMapper {
            options,
            diag_cohorts: Some(table),
        }
    }

    pub fn node_key(&self, event: &ClinicalEvent) -> Result<NodeKey, MapError> {
        let key = map_event(event, &self.options)?;
        match (key.event_type, self.diag_cohorts) {
            (EventType::Diagnosis, Some(table)) => match table.map_code(&key.identity) {
                Some(label) => Ok(NodeKey::new(EventType::Diagnosis, label)),
                None => Err(MapError::CohortUnmapped { code: key.identity }),
            },
            _ => Ok(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_type: NodeType,
    pub identity: String,
}

/// Undirected typed graph with per-type sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    nodes: Vec<NodeRecord>,
    index: HashMap<(NodeType, String), NodeId>,
    adj: Vec<BTreeMap<NodeType, Vec<NodeId>>>,
    by_type: BTreeMap<NodeType, Vec<NodeId>>,
    edge_count: u64,
}

impl HeteroGraph {
    fn empty() -> HeteroGraph {
        HeteroGraph {
            nodes: Vec::new(),
            index: HashMap::new(),
            adj: Vec::new(),
            by_type: BTreeMap::new(),
            edge_count: 0,
        }
    }

    fn intern(&mut self, node_type: NodeType, identity: &str) -> NodeId {
        if let Some(&id) = self.index.get(&(node_type, identity.to_string())) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(NodeRecord {
            node_type,
            identity: identity.to_string(),
        });
        self.index.insert((node_type, identity.to_string()), id);
        self.adj.push(BTreeMap::new());
        self.by_type.entry(node_type).or_default().push(id);
        id
    }

    fn push_edge(&mut self, a: NodeId, b: NodeId) {
        let tb = self.nodes[b].node_type;
        let ta = self.nodes[a].node_type;
        self.adj[a].entry(tb).or_default().push(b);
        self.adj[b].entry(ta).or_default().push(a);
    }

    /// Sorts and dedups adjacency; multiple identical edges collapse.
    fn finalize(&mut self) {
        let mut half_edges = 0u64;
        for lists in &mut self.adj {
            for list in lists.values_mut() {
                list.sort_unstable();
                list.dedup();
                half_edges += list.len() as u64;
            }
        }
        debug_assert_eq!(half_edges % 2, 0);
        self.edge_count = half_edges / 2;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> u64 {
        self.edge_count
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node_id(&self, node_type: NodeType, identity: &str) -> Option<NodeId> {
        self.index.get(&(node_type, identity.to_string())).copied()
    }

    pub fn nodes_of_type(&self, node_type: NodeType) -> &[NodeId] {
        self.by_type.get(&node_type).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Neighbors of `id` having the given type, ascending by node id.
    pub fn neighbors(&self, id: NodeId, node_type: NodeType) -> &[NodeId] {
        self.adj[id]
            .get(&node_type)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adj[id].values().map(Vec::len).sum()
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "hingraph 1")?;
        writeln!(out, "nodes {}", self.nodes.len())?;
        for node in &self.nodes {
            writeln!(out, "{}\t{}", node.node_type.abbrev(), node.identity)?;
        }
        let mut edges: Vec<(NodeId, NodeId)> = Vec::with_capacity(self.edge_count as usize);
        for (a, lists) in self.adj.iter().enumerate() {
            for list in lists.values() {
                for &b in list {
                    if a < b {
                        edges.push((a, b));
                    }
                }
            }
        }
        edges.sort_unstable();
        writeln!(out, "edges {}", edges.len())?;
        for (a, b) in edges {
            writeln!(out, "{a}\t{b}")?;
        }
        Ok(())
    }

    pub fn dump(&self, path: &Path) -> Result<(), HinError> {
        let file = fs::File::create(path).map_err(|source| HinError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write(std::io::BufWriter::new(file))
            .map_err(|source| HinError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load(path: &Path) -> Result<HeteroGraph, HinError> {
        let file = fs::File::open(path).map_err(|source| HinError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut next = || -> Result<(usize, String), HinError> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(source))) => Err(HinError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: source.to_string(),
                }),
                None => Err(HinError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: "unexpected end of file".into(),
                }),
            }
        };
        let parse_err = |line: usize, msg: String| HinError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let (line_no, header) = next()?;
        if header.trim() != "hingraph 1" {
            return Err(parse_err(line_no, format!("bad header {header:?}")));
        }
        let (line_no, nodes_line) = next()?;
        let node_count: usize = nodes_line
            .strip_prefix("nodes ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| parse_err(line_no, format!("bad node count line {nodes_line:?}")))?;

        let mut graph = HeteroGraph::empty();
        for _ in 0..node_count {
            let (line_no, line) = next()?;
            let Some((ty, identity)) = line.split_once('\t') else {
                return Err(parse_err(line_no, format!("bad node line {line:?}")));
            };
            let node_type = NodeType::parse(ty)
                .ok_or_else(|| parse_err(line_no, format!("unknown node type {ty:?}")))?;
            if identity.is_empty() {
                return Err(parse_err(line_no, "empty node identity".into()));
            }
            if graph.index.contains_key(&(node_type, identity.to_string())) {
                return Err(parse_err(line_no, format!("duplicate node {ty} {identity:?}")));
            }
            graph.intern(node_type, identity);
        }

        let (line_no, edges_line) = next()?;
        let edge_count: usize = edges_line
            .strip_prefix("edges ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| parse_err(line_no, format!("bad edge count line {edges_line:?}")))?;
        for _ in 0..edge_count {
            let (line_no, line) = next()?;
            let parts: Vec<&str> = line.split('\t').collect();
            let (Some(a), Some(b)) = (
                parts.first().and_then(|p| p.parse::<usize>().ok()),
                parts.get(1).and_then(|p| p.parse::<usize>().ok()),
            ) else {
                return Err(parse_err(line_no, format!("bad edge line {line:?}")));
            };
            if parts.len() != 2 || a >= node_count || b >= node_count || a == b {
                return Err(parse_err(line_no, format!("bad edge line {line:?}")));
            }
            let (ta, tb) = (graph.nodes[a].node_type, graph.nodes[b].node_type);
            let patient_ends =
                (ta == NodeType::Patient) as u8 + (tb == NodeType::Patient) as u8;
            if patient_ends != 1 {
                return Err(parse_err(
                    line_no,
                    format!("edge {a}-{b} does not join a patient to an event"),
                ));
            }
            graph.push_edge(a, b);
        }
        graph.finalize();
        Ok(graph)
    }
}

/// Outcome of a graph build. Events whose node key cannot be formed
/// (cohort-collapsed codes outside every range, malformed values) are
/// skipped and counted, never silently dropped.
#[derive(Debug)]
pub struct GraphBuild {
    pub graph: HeteroGraph,
    pub skipped_events: u64,
}

pub fn build_graph(
    stays: &[PatientStay],
    schema: &NetworkSchema,
    mapper: &EventMapper,
) -> Result<GraphBuild, HinError> {
    for stay in stays {
        for event in &stay.events {
            let ty = event.event_type;
            if !schema.allows(NodeType::Patient, NodeType::Event(ty)) {
                return Err(HinError::TypeOutsideSchema(ty));
            }
        }
    }
    let mut graph = HeteroGraph::empty();
    let mut skipped = 0u64;
    for stay in stays {
        let patient = graph.intern(NodeType::Patient, &stay.stay_id);
        for event in &stay.events {
            match mapper.node_key(event) {
                Ok(key) => {
                    let node = graph.intern(NodeType::Event(key.event_type), &key.identity);
                    graph.push_edge(patient, node);
                }
                Err(err) => {
                    skipped += 1;
                    log::debug!("stay {}: skipped event: {err}", stay.stay_id);
                }
            }
        }
    }
    graph.finalize();
    Ok(GraphBuild {
        graph,
        skipped_events: skipped,
    })
}

/// A length-2 (`pati-lab`) or length-3 (`lab-diag`, meaning
/// lab ← patient → diag) walk shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathSchema {
    Simple(EventType),
    Meta(EventType, EventType),
}

impl PathSchema {
    pub fn simple(t: EventType) -> PathSchema {
        PathSchema::Simple(t)
    }

    pub fn metapath(a: EventType, b: EventType) -> PathSchema {
        PathSchema::Meta(a, b)
    }

    pub fn label(&self) -> String {
        match self {
            PathSchema::Simple(t) => format!("pati-{}", t.abbrev()),
            PathSchema::Meta(a, b) => format!("{}-{}", a.abbrev(), b.abbrev()),
        }
    }

    pub fn parse(label: &str) -> Result<PathSchema, HinError> {
        let bad = || HinError::BadPathLabel(label.to_string());
        let parts: Vec<&str> = label.trim().split('-').collect();
        if parts.len() != 2 {
            return Err(bad());
        }
        if parts[0] == "pati" {
            return EventType::parse(parts[1]).map(PathSchema::Simple).ok_or_else(bad);
        }
        match (EventType::parse(parts[0]), EventType::parse(parts[1])) {
            (Some(a), Some(b)) => Ok(PathSchema::Meta(a, b)),
            _ => Err(bad()),
        }
    }

    /// Node types along the walk, patient included.
    pub fn node_types(&self) -> Vec<NodeType> {
        match self {
            PathSchema::Simple(t) => vec![NodeType::Patient, NodeType::Event(*t)],
            PathSchema::Meta(a, b) => {
                vec![NodeType::Event(*a), NodeType::Patient, NodeType::Event(*b)]
            }
        }
    }

    /// Embedded endpoint types: the pair a positive sample is drawn for.
    pub fn endpoints(&self) -> (NodeType, NodeType) {
        match self {
            PathSchema::Simple(t) => (NodeType::Patient, NodeType::Event(*t)),
            PathSchema::Meta(a, b) => (NodeType::Event(*a), NodeType::Event(*b)),
        }
    }

    pub fn validate(&self, schema: &NetworkSchema) -> Result<(), HinError> {
        let types = self.node_types();
        for pair in types.windows(2) {
            if !schema.allows(pair[0], pair[1]) {
                return Err(HinError::PathOutsideSchema(self.label()));
            }
        }
        Ok(())
    }

    /// The length-3 schemas worth drawing from, strongest signal first.
    pub fn metapath_menu() -> Vec<PathSchema> {
        use EventType::*;
        [
            (Laboratory, Diagnosis),
            (Symptom, Diagnosis),
            (Laboratory, Symptom),
            (Microbiology, Diagnosis),
            (Prescription, Diagnosis),
            (Laboratory, Prescription),
            (Age, Diagnosis),
            (Gender, Diagnosis),
            (Ethnicity, Diagnosis),
        ]
        .into_iter()
        .map(|(a, b)| PathSchema::Meta(a, b))
        .collect()
    }

    /// The four metapaths active by default.
    pub fn default_metapaths() -> Vec<PathSchema> {
        use EventType::*;
        vec![
            PathSchema::Meta(Laboratory, Diagnosis),
            PathSchema::Meta(Symptom, Diagnosis),
            PathSchema::Meta(Laboratory, Symptom),
            PathSchema::Meta(Laboratory, Prescription),
        ]
    }
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Number of distinct path instances of the schema in the graph. For a
/// repeated endpoint type the two endpoints are an unordered distinct
/// pair, so a patient with n such neighbors contributes n choose 2.
pub fn count_path_instances(graph: &HeteroGraph, schema: &PathSchema) -> u64 {
    match schema {
        PathSchema::Simple(t) => graph
            .nodes_of_type(NodeType::Patient)
            .iter()
            .map(|&p| graph.neighbors(p, NodeType::Event(*t)).len() as u64)
            .sum(),
        PathSchema::Meta(a, b) if a == b => graph
            .nodes_of_type(NodeType::Patient)
            .iter()
            .map(|&p| choose2(graph.neighbors(p, NodeType::Event(*a)).len() as u64))
            .sum(),
        PathSchema::Meta(a, b) => graph
            .nodes_of_type(NodeType::Patient)
            .iter()
            .map(|&p| {
                graph.neighbors(p, NodeType::Event(*a)).len() as u64
                    * graph.neighbors(p, NodeType::Event(*b)).len() as u64
            })
            .sum(),
    }
}

/// Endpoint pairs with instance multiplicities, keyed in ascending order.
/// For metapaths the multiplicity of (x, y) is the number of shared
/// patients; repeated-endpoint schemas key unordered pairs with x < y.
pub fn enumerate_path_pairs(
    graph: &HeteroGraph,
    schema: &PathSchema,
) -> BTreeMap<(NodeId, NodeId), u64> {
    let mut pairs: BTreeMap<(NodeId, NodeId), u64> = BTreeMap::new();
    match schema {
        PathSchema::Simple(t) => {
            for &p in graph.nodes_of_type(NodeType::Patient) {
                for &e in graph.neighbors(p, NodeType::Event(*t)) {
                    *pairs.entry((p, e)).or_default() += 1;
                }
            }
        }
        PathSchema::Meta(a, b) if a == b => {
            for &p in graph.nodes_of_type(NodeType::Patient) {
                let ns = graph.neighbors(p, NodeType::Event(*a));
                for (i, &x) in ns.iter().enumerate() {
                    for &y in &ns[i + 1..] {
                        *pairs.entry((x, y)).or_default() += 1;
                    }
                }
            }
        }
        PathSchema::Meta(a, b) => {
            for &p in graph.nodes_of_type(NodeType::Patient) {
                for &x in graph.neighbors(p, NodeType::Event(*a)) {
                    for &y in graph.neighbors(p, NodeType::Event(*b)) {
                        *pairs.entry((x, y)).or_default() += 1;
                    }
                }
            }
        }
    }
    pairs
}
