//! Network and measurement model for DC state estimation observability.
//!
//! A network is a connected graph of buses and branches; measurements are
//! active power flows (on a branch, with an orientation) and active power
//! injections (at a bus), plus pseudo injections used as restoration
//! candidates. All branch susceptances are taken as one per unit, so the
//! decoupled measurement Jacobian has small integer entries and rank
//! questions can be settled in exact arithmetic.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::islands::IslandPartition;
use crate::util::UnionFind;

// ============================================================================
// Errors
// ============================================================================

/// Input rejection reasons for case and measurement files.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("network has no buses")]
    EmptyNetwork,
    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),
    #[error("duplicate branch id {0}")]
    DuplicateBranch(i64),
    #[error("branch {branch} references unknown bus {bus}")]
    UnknownBus { branch: i64, bus: i64 },
    #[error("branch {0} is a self-loop")]
    SelfLoop(i64),
    #[error("slack bus {0} does not exist")]
    UnknownSlack(i64),
    #[error("network is not connected; components: {0}")]
    Disconnected(String),
    #[error("duplicate measurement id {0}")]
    DuplicateMeasurement(i64),
    #[error("measurement {id}: unknown branch {branch}")]
    UnknownBranchRef { id: i64, branch: i64 },
    #[error("measurement {id}: unknown bus {bus}")]
    UnknownBusRef { id: i64, bus: i64 },
    #[error("measurement {id}: flow orientation bus {from} is not an endpoint of branch {branch}")]
    BadOrientation { id: i64, from: i64, branch: i64 },
    #[error("measurement {id}: missing field `{field}` for kind {kind}")]
    MissingField {
        id: i64,
        field: &'static str,
        kind: &'static str,
    },
    #[error("measurement {id}: field `{field}` not allowed for kind {kind}")]
    ForbiddenField {
        id: i64,
        field: &'static str,
        kind: &'static str,
    },
    #[error("measurement {id}: variance must be positive and finite, got {variance}")]
    BadVariance { id: i64, variance: f64 },
    #[error(
        "requested {requested} measurements but the candidate pool has only {available} entries"
    )]
    PoolExhausted { requested: usize, available: usize },
    #[error("redundancy must be finite and non-negative, got {0}")]
    BadRedundancy(f64),
}

// ============================================================================
// Network
// ============================================================================

/// A branch between two buses, endpoints stored as dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub id: i64,
    pub from: usize,
    pub to: usize,
}

/// A connected bus/branch graph. Bus ids from the input are remapped to the
/// dense range `0..n_buses()`; all public indices are dense.
#[derive(Clone, Debug)]
pub struct PowerNetwork {
    bus_ids: Vec<i64>,
    branches: Vec<Branch>,
    slack: Option<usize>,
    index_of: HashMap<i64, usize>,
    adjacency: Vec<Vec<(usize, usize)>>, // (neighbor bus, branch index)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    buses: Vec<CaseBus>,
    branches: Vec<CaseBranch>,
    #[serde(default)]
    slack_bus: Option<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseBus {
    id: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseBranch {
    id: i64,
    from: i64,
    to: i64,
}

impl PowerNetwork {
    /// Parses a case from its JSON text. Rejects duplicate ids, dangling
    /// branch endpoints, self-loops, and disconnected graphs.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let case: CaseFile = serde_json::from_str(text)?;
        Self::build(case)
    }

    /// Builds a network from dense edge endpoints: bus ids become `1..=n`
    /// and branch ids `1..=edges.len()`. Validation matches the JSON path.
    pub fn from_edges(n_buses: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        Self::build(CaseFile {
            buses: (1..=n_buses as i64).map(|id| CaseBus { id }).collect(),
            branches: edges
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| CaseBranch {
                    id: i as i64 + 1,
                    from: a as i64 + 1,
                    to: b as i64 + 1,
                })
                .collect(),
            slack_bus: None,
        })
    }

    /// Reads and parses a case file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    fn build(case: CaseFile) -> Result<Self, ModelError> {
        if case.buses.is_empty() {
            return Err(ModelError::EmptyNetwork);
        }
        let mut index_of = HashMap::with_capacity(case.buses.len());
        let mut bus_ids = Vec::with_capacity(case.buses.len());
        for bus in &case.buses {
            if index_of.insert(bus.id, bus_ids.len()).is_some() {
                return Err(ModelError::DuplicateBus(bus.id));
            }
            bus_ids.push(bus.id);
        }
        let mut branch_ids = std::collections::HashSet::with_capacity(case.branches.len());
        let mut branches = Vec::with_capacity(case.branches.len());
        let mut adjacency = vec![Vec::new(); bus_ids.len()];
        for br in &case.branches {
            if !branch_ids.insert(br.id) {
                return Err(ModelError::DuplicateBranch(br.id));
            }
            let from = *index_of.get(&br.from).ok_or(ModelError::UnknownBus {
                branch: br.id,
                bus: br.from,
            })?;
            let to = *index_of.get(&br.to).ok_or(ModelError::UnknownBus {
                branch: br.id,
                bus: br.to,
            })?;
            if from == to {
                return Err(ModelError::SelfLoop(br.id));
            }
            let bidx = branches.len();
            adjacency[from].push((to, bidx));
            adjacency[to].push((from, bidx));
            branches.push(Branch { id: br.id, from, to });
        }
        let slack = match case.slack_bus {
            Some(id) => Some(*index_of.get(&id).ok_or(ModelError::UnknownSlack(id))?),
            None => None,
        };
        let net = Self {
            bus_ids,
            branches,
            slack,
            index_of,
            adjacency,
        };
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), ModelError> {
        let mut uf = UnionFind::new(self.n_buses());
        for br in &self.branches {
            uf.union(br.from, br.to);
        }
        let groups = uf.groups();
        if groups.len() > 1 {
            let mut desc = String::new();
            for (i, g) in groups.iter().enumerate() {
                if i > 0 {
                    desc.push_str(" | ");
                }
                let shown: Vec<String> = g
                    .iter()
                    .take(8)
                    .map(|&b| self.bus_ids[b].to_string())
                    .collect();
                let _ = write!(desc, "{{{}", shown.join(","));
                if g.len() > 8 {
                    let _ = write!(desc, ",… ({} buses)", g.len());
                }
                desc.push('}');
            }
            return Err(ModelError::Disconnected(desc));
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// External id of a dense bus index.
    pub fn bus_id(&self, index: usize) -> i64 {
        self.bus_ids[index]
    }

    /// Dense index of an external bus id.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn slack(&self) -> Option<usize> {
        self.slack
    }

    /// Incident `(neighbor, branch index)` pairs of a bus.
    pub fn adjacent(&self, bus: usize) -> &[(usize, usize)] {
        &self.adjacency[bus]
    }

    /// Number of incident branches (parallel branches each count).
    pub fn degree(&self, bus: usize) -> usize {
        self.adjacency[bus].len()
    }
}

// ============================================================================
// Measurements
// ============================================================================

/// What a measurement observes. Branch and bus references are dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasurementKind {
    /// Active power flow on `branch`, oriented away away from `from`.
    Flow { branch: usize, from: usize },
    /// Net active power injection at `bus`.
    Injection { bus: usize },
    /// A candidate injection at `bus`, available but not yet telemetered.
    PseudoInjection { bus: usize },
}

/// One measurement row. `variance` and `value` ride along for estimation
/// front ends; observability analysis never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub id: i64,
    pub kind: MeasurementKind,
    pub variance: Option<f64>,
    pub value: Option<f64>,
}

impl Measurement {
    /// Human-readable label used in reports: `M_P<bus>` for injections and
    /// pseudo injections, `M_P<from>_<to>` for flows.
    pub fn label(&self, net: &PowerNetwork) -> String {
        match self.kind {
            MeasurementKind::Flow { branch, from } => {
                let br = net.branches()[branch];
                let other = if br.from == from { br.to } else { br.from };
                format!("M_P{}_{}", net.bus_id(from), net.bus_id(other))
            }
            MeasurementKind::Injection { bus } | MeasurementKind::PseudoInjection { bus } => {
                format!("M_P{}", net.bus_id(bus))
            }
        }
    }
}

/// An ordered collection of measurements with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementSet {
    measurements: Vec<Measurement>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasEntry {
    id: i64,
    kind: MeasKind,
    #[serde(default)]
    branch: Option<i64>,
    #[serde(default)]
    from: Option<i64>,
    #[serde(default)]
    bus: Option<i64>,
    #[serde(default)]
    variance: Option<f64>,
    #[serde(default)]
    value: Option<f64>,
}

#[derive(Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum MeasKind {
    Flow,
    Injection,
    PseudoInjection,
}

impl MeasKind {
    fn name(self) -> &'static str {
        match self {
            MeasKind::Flow => "flow",
            MeasKind::Injection => "injection",
            MeasKind::PseudoInjection => "pseudo_injection",
        }
    }
}

impl MeasurementSet {
    pub fn new(measurements: Vec<Measurement>) -> Self {
        Self { measurements }
    }

    /// Parses a measurement array from JSON text, validating every reference
    /// against `net`. Unknown fields and kind/field mismatches are rejected.
    pub fn from_json_str(text: &str, net: &PowerNetwork) -> Result<Self, ModelError> {
        let entries: Vec<MeasEntry> = serde_json::from_str(text)?;
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        let mut branch_index: HashMap<i64, usize> = HashMap::with_capacity(net.n_branches());
        for (i, br) in net.branches().iter().enumerate() {
            branch_index.insert(br.id, i);
        }
        let mut measurements = Vec::with_capacity(entries.len());
        for e in entries {
            if !seen.insert(e.id) {
                return Err(ModelError::DuplicateMeasurement(e.id));
            }
            let kind_name = e.kind.name();
            let require = |field: &'static str, v: Option<i64>| {
                v.ok_or(ModelError::MissingField {
                    id: e.id,
                    field,
                    kind: kind_name,
                })
            };
            let forbid = |field: &'static str, v: Option<i64>| {
                if v.is_some() {
                    Err(ModelError::ForbiddenField {
                        id: e.id,
                        field,
                        kind: kind_name,
                    })
                } else {
                    Ok(())
                }
            };
            let kind = match e.kind {
                MeasKind::Flow => {
                    forbid("bus", e.bus)?;
                    let branch_id = require("branch", e.branch)?;
                    let from_id = require("from", e.from)?;
                    let branch =
                        *branch_index
                            .get(&branch_id)
                            .ok_or(ModelError::UnknownBranchRef {
                                id: e.id,
                                branch: branch_id,
                            })?;
                    let from = net.bus_index(from_id).ok_or(ModelError::UnknownBusRef {
                        id: e.id,
                        bus: from_id,
                    })?;
                    let br = net.branches()[branch];
                    if br.from != from && br.to != from {
                        return Err(ModelError::BadOrientation {
                            id: e.id,
                            from: from_id,
                            branch: branch_id,
                        });
                    }
                    MeasurementKind::Flow { branch, from }
                }
                MeasKind::Injection | MeasKind::PseudoInjection => {
                    forbid("branch", e.branch)?;
                    forbid("from", e.from)?;
                    let bus_id = require("bus", e.bus)?;
                    let bus = net.bus_index(bus_id).ok_or(ModelError::UnknownBusRef {
                        id: e.id,
                        bus: bus_id,
                    })?;
                    if e.kind == MeasKind::Injection {
                        MeasurementKind::Injection { bus }
                    } else {
                        MeasurementKind::PseudoInjection { bus }
                    }
                }
            };
            if let Some(v) = e.variance {
                if !(v.is_finite() && v > 0.0) {
                    return Err(ModelError::BadVariance {
                        id: e.id,
                        variance: v,
                    });
                }
            }
            measurements.push(Measurement {
                id: e.id,
                kind,
                variance: e.variance,
                value: e.value,
            });
        }
        Ok(Self { measurements })
    }

    /// Reads and parses a measurement file.
    pub fn from_json_file(path: impl AsRef<Path>, net: &PowerNetwork) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, net)
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn get(&self, index: usize) -> &Measurement {
        &self.measurements[index]
    }
}

// ============================================================================
// Jacobian
// ============================================================================

/// One measurement row of the decoupled Jacobian: sorted `(column, coefficient)`
/// pairs over bus angle columns. With unit susceptances every coefficient is a
/// small integer and every row sums to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JacobianRow {
    /// Index of the originating measurement within its `MeasurementSet`.
    pub meas: usize,
    pub entries: Vec<(usize, i64)>,
}

/// Sparse measurement Jacobian over `n_cols` bus angle columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseJacobian {
    pub n_cols: usize,
    pub rows: Vec<JacobianRow>,
}

impl SparseJacobian {
    /// Total number of structural nonzeros.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.entries.len()).sum()
    }
}

/// Builds the measurement Jacobian for unit branch susceptances. A flow
/// oriented `i -> j` contributes `+1` at `i` and `-1` at `j`; an injection at
/// `i` contributes `+degree(i)` at `i` and `-1` per incident branch at the far
/// endpoint. Pseudo injections produce the same row shape as injections.
pub fn build_jacobian(net: &PowerNetwork, ms: &MeasurementSet) -> SparseJacobian {
    let rows = ms
        .measurements()
        .iter()
        .enumerate()
        .map(|(meas, m)| JacobianRow {
            meas,
            entries: row_entries(net, m.kind),
        })
        .collect();
    SparseJacobian {
        n_cols: net.n_buses(),
        rows,
    }
}

/// Jacobian entries for a single measurement, sorted by column.
pub fn row_entries(net: &PowerNetwork, kind: MeasurementKind) -> Vec<(usize, i64)> {
    match kind {
        MeasurementKind::Flow { branch, from } => {
            let br = net.branches()[branch];
            let to = if br.from == from { br.to } else { br.from };
            let mut entries = vec![(from, 1), (to, -1)];
            entries.sort_unstable_by_key(|&(c, _)| c);
            entries
        }
        MeasurementKind::Injection { bus } | MeasurementKind::PseudoInjection { bus } => {
            let mut coef: HashMap<usize, i64> = HashMap::new();
            coef.insert(bus, net.degree(bus) as i64);
            for &(nb, _) in net.adjacent(bus) {
                *coef.entry(nb).or_insert(0) -= 1;
            }
            let mut entries: Vec<(usize, i64)> =
                coef.into_iter().filter(|&(_, v)| v != 0).collect();
            entries.sort_unstable_by_key(|&(c, _)| c);
            entries
        }
    }
}

// ============================================================================
// Configuration generation
// ============================================================================

/// Draws a measurement configuration of `ceil(redundancy * (n - 1))` rows
/// uniformly without replacement from the candidate pool of both flow
/// orientations per branch plus one injection per bus. Deterministic in
/// `(net, redundancy, seed)`; ids are assigned `1..` in pool order.
pub fn generate_measurement_config(
    net: &PowerNetwork,
    redundancy: f64,
    seed: u64,
) -> Result<MeasurementSet, ModelError> {
    if !redundancy.is_finite() || redundancy < 0.0 {
        return Err(ModelError::BadRedundancy(redundancy));
    }
    let mut pool = Vec::with_capacity(2 * net.n_branches() + net.n_buses());
    for (bidx, br) in net.branches().iter().enumerate() {
        pool.push(MeasurementKind::Flow {
            branch: bidx,
            from: br.from,
        });
        pool.push(MeasurementKind::Flow {
            branch: bidx,
            from: br.to,
        });
    }
    for bus in 0..net.n_buses() {
        pool.push(MeasurementKind::Injection { bus });
    }
    let target = (redundancy * (net.n_buses() as f64 - 1.0)).ceil() as usize;
    if target > pool.len() {
        return Err(ModelError::PoolExhausted {
            requested: target,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), target).into_vec();
    picked.sort_unstable();
    let measurements = picked
        .into_iter()
        .enumerate()
        .map(|(i, pool_idx)| Measurement {
            id: i as i64 + 1,
            kind: pool[pool_idx],
            variance: None,
            value: None,
        })
        .collect();
    Ok(MeasurementSet::new(measurements))
}

// ============================================================================
// Restoration candidates
// ============================================================================

/// Pseudo injection candidates at boundary buses: every bus with at least one
/// branch crossing into another island, in ascending bus id order. Ids are
/// assigned `1..` within the returned set.
pub fn boundary_pseudo_candidates(net: &PowerNetwork, partition: &IslandPartition) -> MeasurementSet {
    let island_of = partition.island_of(net.n_buses());
    let mut boundary: Vec<usize> = (0..net.n_buses())
        .filter(|&bus| {
            net.adjacent(bus)
                .iter()
                .any(|&(nb, _)| island_of[nb] != island_of[bus])
        })
        .collect();
    boundary.sort_by_key(|&bus| net.bus_id(bus));
    let measurements = boundary
        .into_iter()
        .enumerate()
        .map(|(i, bus)| Measurement {
            id: i as i64 + 1,
            kind: MeasurementKind::PseudoInjection { bus },
            variance: None,
            value: None,
        })
        .collect();
    MeasurementSet::new(measurements)
}

// ============================================================================
// Tests
// ============================================================================
