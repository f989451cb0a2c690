//! Observability restoration over the reduced island graph.
//!
//! Detection leaves k islands whose interiors are already solved, so full
//! observability needs exactly k - 1 independent island-level equations.
//! Every measurement row collapses to island resolution by summing its
//! coefficients per island: rows inside one island vanish, rows straddling
//! islands survive as factors over island variables. The rejected and
//! peeled rows of a detection run merge into the candidate set F_c (real
//! equations that already tie islands together, q of them after reduction
//! to an independent subset), and a caller-supplied pseudo-measurement pool
//! merges into F_p. Restoration walks F_p and selects the remaining
//! w = k - q - 1 equations one at a time: a candidate is activated with a
//! finite own variance, one of its islands is pinned as the pass slack, and
//! the variance its variables would report back to the candidate's residual
//! is read off. A diverging residual means no active equation set already
//! determines the candidate's combination of islands, so the candidate is
//! independent and stays active; a finite residual means the equation is
//! redundant and the candidate is deactivated again.
//!
//! The walk pairs that residual test with the same exact merged-column
//! elimination that reduced F_c, continued across acceptances. The variance
//! algebra reads tags, not coefficients, so a candidate whose verdict hinges
//! on coefficient cancellation is invisible to it: a dependent row whose
//! dependence needs rational row combinations can sit next to islands that
//! sweep as undetermined, and an independent row can surface only as an
//! additive drift too slow to clear the divergence band within the sweep
//! budget. Both shapes occur in random configurations. The elimination is
//! therefore authoritative for acceptance, which also guarantees the final
//! rank certificate; the sweep verdicts ride along and any disagreement is
//! reported per candidate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::exact::Echelon;
use crate::fg::{
    run_sweeps, serial_variance, ExtendedVariance, Factor, FactorGraph, SweepConfig, SweepError,
};
use crate::islands::DetectionResult;
use crate::islands::IslandPartition;
use crate::model::{build_jacobian, Measurement, MeasurementSet, PowerNetwork};

// ============================================================================
// Reduced island graph
// ============================================================================

/// How a reduced factor entered the problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorRole {
    /// Rejected or peeled measurement row; active from the start.
    Candidate,
    /// Pseudo-measurement; idle (infinite own variance) until accepted.
    Pseudo,
}

/// One island-merged measurement row.
#[derive(Clone, Debug)]
pub struct ReducedFactor {
    /// Index of the source measurement in its originating set.
    pub meas: usize,
    /// Source measurement id.
    pub id: i64,
    /// Report label of the source measurement.
    pub label: String,
    /// Merged coefficients, ascending island, zero sums dropped.
    pub entries: Vec<(usize, i64)>,
    /// Own variance when active.
    pub own: f64,
    pub role: FactorRole,
}

/// Factor graph over one variable per island. Candidate factors carry
/// finite own variances, pseudo factors idle at infinite own variance, and
/// island virtual factors stay infinite except for the per-test slack pin.
pub struct ReducedGraph {
    /// Island count.
    pub k: usize,
    /// F_c followed by F_p; index i is factor i of `graph`.
    pub factors: Vec<ReducedFactor>,
    graph: FactorGraph,
    /// Exact row space of the active equations (F_c, then each acceptance).
    basis: Echelon,
}

impl ReducedGraph {
    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    /// Indices of the pseudo factors in pool order.
    pub fn pseudo_factors(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| self.factors[i].role == FactorRole::Pseudo)
            .collect()
    }

    /// Indices of the candidate factors F_c.
    pub fn candidate_factors(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| self.factors[i].role == FactorRole::Candidate)
            .collect()
    }
}

/// Restoration counts fixed by the reduced graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RestorationProblem {
    /// Island count.
    pub k: usize,
    /// Accepted-for-free equations |F_c|.
    pub q: usize,
    /// Pool size |F_p|.
    pub b: usize,
    /// Required additions, k - q - 1.
    pub w: usize,
    /// Interior states already solved by detection, n - k.
    pub h: usize,
}

#[derive(Debug, Error)]
pub enum RestoreError {
    /// Merged F_c rank exceeded k - 1. Merged rows sum to zero, so their
    /// rank is at most k - 1; reaching this means corrupted inputs.
    #[error("candidate set over-determines the islands: q = {q} with k = {k}")]
    NegativeW { k: usize, q: usize },
    /// The pool ended while additions were still required.
    #[error("candidate pool exhausted with {remaining} additions still required")]
    CandidatesExhausted {
        remaining: usize,
        /// Factor indices accepted before the pool ran out.
        accepted: Vec<usize>,
        /// Factor indices rejected as dependent.
        rejected_dependent: Vec<usize>,
    },
    #[error("independence test: {0}")]
    Sweep(#[from] SweepError),
}

/// Sums `entries` per island; zero sums are dropped. Ascending island.
fn merge_by_island(entries: &[(usize, i64)], island_of: &[usize]) -> Vec<(usize, i64)> {
    let mut sums: BTreeMap<usize, i64> = BTreeMap::new();
    for &(col, coef) in entries {
        *sums.entry(island_of[col]).or_insert(0) += coef;
    }
    sums.into_iter().filter(|&(_, s)| s != 0).collect()
}

/// The candidate pool of a detection run: its rejected and peeled
/// measurement rows, in measurement order.
pub fn candidate_pool(ms: &MeasurementSet, det: &DetectionResult) -> MeasurementSet {
    let mut idx: Vec<usize> = det
        .rejected_rows
        .iter()
        .chain(det.dropped_factors.iter())
        .copied()
        .collect();
    idx.sort_unstable();
    idx.dedup();
    MeasurementSet::new(idx.into_iter().map(|i| ms.get(i).clone()).collect())
}

/// Builds the reduced island graph from a detection partition, the candidate
/// pool, and the pseudo-measurement pool.
///
/// Each row is column-merged by island; rows left with fewer than two
/// islands are discarded (they cannot tie anything together). F_c is the
/// greedy maximal independent subset of the merged candidate rows in pool
/// order, which fixes q regardless of which redundant writing of an
/// equation survives. Pseudo rows are kept unreduced: deciding their
/// independence is the restoration algorithm itself.
pub fn partition_candidates(
    net: &PowerNetwork,
    partition: &IslandPartition,
    candidates: &MeasurementSet,
    pseudo: &MeasurementSet,
) -> Result<(ReducedGraph, RestorationProblem), RestoreError> {
    let n = net.n_buses();
    let k = partition.n_islands();
    let island_of = partition.canonical_island_of(n);
    let mut factors = Vec::new();

    let mut basis = Echelon::new(k);
    let cand_jac = build_jacobian(net, candidates);
    for (i, m) in candidates.measurements().iter().enumerate() {
        let entries = merge_by_island(&cand_jac.rows[i].entries, &island_of);
        if entries.len() < 2 || !basis.add_row(&entries) {
            continue;
        }
        factors.push(reduced_factor(net, m, i, entries, FactorRole::Candidate));
    }
    let q = factors.len();
    debug_assert_eq!(q, basis.rank());
    if q + 1 > k {
        return Err(RestoreError::NegativeW { k, q });
    }

    let pseudo_jac = build_jacobian(net, pseudo);
    for (i, m) in pseudo.measurements().iter().enumerate() {
        let entries = merge_by_island(&pseudo_jac.rows[i].entries, &island_of);
        if entries.len() < 2 {
            continue;
        }
        factors.push(reduced_factor(net, m, i, entries, FactorRole::Pseudo));
    }
    let b = factors.len() - q;

    let graph_factors = factors
        .iter()
        .enumerate()
        .map(|(i, f)| Factor {
            meas: i,
            vars: f.entries.iter().map(|&(s, _)| s).collect(),
            own: Some(match f.role {
                FactorRole::Candidate => ExtendedVariance::Finite(f.own),
                FactorRole::Pseudo => ExtendedVariance::Infinite,
            }),
        })
        .collect();
    let rg = ReducedGraph {
        k,
        factors,
        graph: FactorGraph::new(k, (0..k).collect(), graph_factors),
        basis,
    };
    let prob = RestorationProblem {
        k,
        q,
        b,
        w: k - 1 - q,
        h: n - k,
    };
    Ok((rg, prob))
}

fn reduced_factor(
    net: &PowerNetwork,
    m: &Measurement,
    meas: usize,
    entries: Vec<(usize, i64)>,
    role: FactorRole,
) -> ReducedFactor {
    ReducedFactor {
        meas,
        id: m.id,
        label: m.label(net),
        entries,
        own: m.variance.unwrap_or(1.0),
        role,
    }
}

// ============================================================================
// Independence test
// ============================================================================

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Independence {
    Independent,
    Dependent,
}

/// One residual-variance test outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndependenceTest {
    pub verdict: Independence,
    /// Variance the candidate's variables report back to its residual.
    pub residual: ExtendedVariance,
}

/// Tests whether pseudo factor `candidate` is independent of the currently
/// active equations (F_c plus previously accepted candidates).
///
/// The candidate is activated with its finite own variance and its
/// lowest-id incident island is pinned to zero as the pass slack. After the
/// sweeps settle, the residual variance is the serial combination of the
/// final variable-to-factor messages into the candidate, own variance
/// excluded: it diverges exactly when the active equations do not already
/// determine the candidate's combination of islands. Divergence is read
/// through the same band as detection marginals (infinite, or finite at or
/// beyond `v_high`), because growth stops being tracked once it clears the
/// band. The slack pin is always removed afterwards; a dependent candidate
/// is deactivated again, an independent one stays active. Previously
/// accepted candidates are never touched.
pub fn test_independence(
    rg: &mut ReducedGraph,
    candidate: usize,
    cfg: &SweepConfig,
) -> Result<IndependenceTest, RestoreError> {
    let f = &rg.factors[candidate];
    debug_assert_eq!(f.role, FactorRole::Pseudo);
    let slack = f.entries[0].0;
    rg.graph
        .set_factor_own(candidate, Some(ExtendedVariance::Finite(f.own)));
    rg.graph.set_virtual(slack, ExtendedVariance::Zero);
    let run = run_sweeps(&rg.graph, cfg);
    rg.graph.set_virtual(slack, ExtendedVariance::Infinite);
    let run = match run {
        Ok(run) => run,
        Err(source) => {
            rg.graph
                .set_factor_own(candidate, Some(ExtendedVariance::Infinite));
            return Err(source.into());
        }
    };

    let incoming: Vec<ExtendedVariance> = rg.graph.factors()[candidate]
        .vars
        .iter()
        .map(|&s| run.state.v2f(&rg.graph, candidate, s))
        .collect();
    let residual = serial_variance(&incoming, None);
    let verdict = match residual {
        ExtendedVariance::Infinite => Independence::Independent,
        ExtendedVariance::Finite(x) if x >= cfg.v_high => Independence::Independent,
        _ => Independence::Dependent,
    };
    if verdict == Independence::Dependent {
        rg.graph
            .set_factor_own(candidate, Some(ExtendedVariance::Infinite));
    }
    Ok(IndependenceTest { verdict, residual })
}

// ============================================================================
// Restoration walk
// ============================================================================

/// Decision sequence of one restoration run, as factor indices into the
/// reduced graph.
#[derive(Clone, Debug, Default)]
pub struct Restoration {
    /// Accepted factors in acceptance order; their own variances stay finite.
    pub accepted: Vec<usize>,
    /// Factors found dependent, in test order.
    pub rejected_dependent: Vec<usize>,
    /// Every (factor, verdict) in test order.
    pub decisions: Vec<(usize, Independence)>,
    /// Factors whose sweep verdict disagreed with the exact elimination.
    pub sweep_conflicts: Vec<usize>,
    /// Additions still required; zero on success.
    pub final_w: usize,
}

/// Walks the pseudo pool in order, testing each candidate until w
/// acceptances are collected. Accepted candidates keep their finite own
/// variance and so participate in every later test.
///
/// Acceptance follows the exact elimination continued from F_c; the sweep
/// verdict of each test is recorded and conflicts are listed in the result.
/// A candidate blocked by coefficient cancellation would otherwise poison
/// every later test through a wrong active set.
pub fn restore_observability(
    rg: &mut ReducedGraph,
    prob: &RestorationProblem,
    cfg: &SweepConfig,
) -> Result<Restoration, RestoreError> {
    let mut out = Restoration {
        final_w: prob.w,
        ..Restoration::default()
    };
    for candidate in rg.pseudo_factors() {
        if out.final_w == 0 {
            break;
        }
        let test = test_independence(rg, candidate, cfg)?;
        let entries = rg.factors[candidate].entries.clone();
        let verdict = if rg.basis.add_row(&entries) {
            Independence::Independent
        } else {
            Independence::Dependent
        };
        if verdict != test.verdict {
            out.sweep_conflicts.push(candidate);
        }
        // The sweep already left the own variance matching its own verdict;
        // realign it with the decision that counts.
        let own = match verdict {
            Independence::Independent => ExtendedVariance::Finite(rg.factors[candidate].own),
            Independence::Dependent => ExtendedVariance::Infinite,
        };
        rg.graph.set_factor_own(candidate, Some(own));
        out.decisions.push((candidate, verdict));
        match verdict {
            Independence::Independent => {
                out.accepted.push(candidate);
                out.final_w -= 1;
            }
            Independence::Dependent => out.rejected_dependent.push(candidate),
        }
    }
    if out.final_w > 0 {
        return Err(RestoreError::CandidatesExhausted {
            remaining: out.final_w,
            accepted: out.accepted,
            rejected_dependent: out.rejected_dependent,
        });
    }
    Ok(out)
}

/// Exact full-system check: the stacked rows reach rank n - 1.
pub fn verify_full_observability<'a, I>(n_buses: usize, rows: I) -> bool
where
    I: IntoIterator<Item = &'a [(usize, i64)]>,
{
    let mut basis = Echelon::new(n_buses);
    for row in rows {
        basis.add_row(row);
    }
    basis.rank() + 1 == n_buses
}

// ============================================================================
// End-to-end driver
// ============================================================================

/// Final restoration report.
#[derive(Clone, Debug)]
pub struct RestorationResult {
    pub problem: RestorationProblem,
    /// Labels of F_c in pool order.
    pub candidates: Vec<String>,
    /// Labels of accepted pseudo-measurements in acceptance order.
    pub accepted: Vec<String>,
    /// Labels of pseudo-measurements rejected as dependent, in test order.
    pub rejected_dependent: Vec<String>,
    /// Labels whose sweep verdict disagreed with the exact elimination.
    pub sweep_conflicts: Vec<String>,
    /// Additions still required; zero on success.
    pub final_w: usize,
    /// Exact rank certificate over kept rows, F_c, and accepted rows.
    pub certificate: bool,
}

/// Runs restoration end to end on a finished detection: builds the pools,
/// reduces, walks the candidates, and certifies the restored system by
/// exact rank over the kept detection rows, F_c, and the accepted
/// pseudo-measurement rows.
pub fn run_restoration(
    net: &PowerNetwork,
    ms: &MeasurementSet,
    det: &DetectionResult,
    pseudo: &MeasurementSet,
    cfg: &SweepConfig,
) -> Result<RestorationResult, RestoreError> {
    let pool = candidate_pool(ms, det);
    let (mut rg, prob) = partition_candidates(net, &det.partition, &pool, pseudo)?;
    let walk = restore_observability(&mut rg, &prob, cfg)?;

    let jac = build_jacobian(net, ms);
    let (kept, _) = crate::exact::independent_row_subset(&jac);
    let pool_jac = build_jacobian(net, &pool);
    let pseudo_jac = build_jacobian(net, pseudo);
    let mut rows: Vec<&[(usize, i64)]> = kept
        .iter()
        .map(|&r| jac.rows[r].entries.as_slice())
        .collect();
    for i in rg.candidate_factors() {
        rows.push(&pool_jac.rows[rg.factors[i].meas].entries);
    }
    for &i in &walk.accepted {
        rows.push(&pseudo_jac.rows[rg.factors[i].meas].entries);
    }
    let certificate = verify_full_observability(net.n_buses(), rows);

    let label = |i: &usize| rg.factors[*i].label.clone();
    Ok(RestorationResult {
        problem: prob,
        candidates: rg.candidate_factors().iter().map(label).collect(),
        accepted: walk.accepted.iter().map(label).collect(),
        rejected_dependent: walk.rejected_dependent.iter().map(label).collect(),
        sweep_conflicts: walk.sweep_conflicts.iter().map(label).collect(),
        final_w: walk.final_w,
        certificate,
    })
}

// ============================================================================
// Tests
// ============================================================================
