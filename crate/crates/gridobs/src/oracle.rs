//! Ground-truth island analysis and the topological merging baseline.
//!
//! The oracle works in exact rational arithmetic: a branch is observable iff
//! the angle difference across it vanishes on every null direction of the
//! measurement Jacobian, and observable islands are the connected components
//! of the network over observable branches. Injections at boundary buses
//! (buses with an unobservable incident branch) are discarded and the test
//! repeats until none remain: such an injection couples states across island
//! borders, and the constraint it adds is unusable for solving any single
//! island. The topological method is the classical merging heuristic; it
//! never splits an oracle island apart but can fail to merge islands whose
//! coupling is visible only algebraically.
//!
//! Both baselines first apply the same independent-row screen as island
//! detection, so all three methods analyze one retained equation set. A
//! dependent row can tie blocks together only through rows that straddle
//! island borders, information no per-island solve can use, and the screen
//! decides once which of the redundant writings of a constraint counts.

use thiserror::Error;

use crate::exact::{independent_row_subset, null_space_basis};
use crate::model::{
    build_jacobian, MeasurementKind, MeasurementSet, PowerNetwork, SparseJacobian,
};
use crate::util::UnionFind;

/// Oracle output with the bookkeeping the reports need alongside the
/// partition itself.
#[derive(Clone, Debug)]
pub struct OracleRun {
    /// Canonical partition of dense bus indices.
    pub islands: Vec<Vec<usize>>,
    /// Measurement indices rejected by the independent-row screen.
    pub rejected_rows: Vec<usize>,
    /// Measurement indices of boundary injections discarded while iterating,
    /// in discard order.
    pub discarded_injections: Vec<usize>,
    /// Null-space recomputations until the discard set stabilized.
    pub rounds: usize,
}

/// Exact observable islands: canonical partition of dense bus indices
/// (members ascending, islands ordered by smallest member).
pub fn oracle_islands(net: &PowerNetwork, ms: &MeasurementSet) -> Vec<Vec<usize>> {
    oracle_islands_run(net, ms).islands
}

/// As `oracle_islands`, also reporting screened rows, discarded boundary
/// injections, and the number of fixpoint rounds.
pub fn oracle_islands_run(net: &PowerNetwork, ms: &MeasurementSet) -> OracleRun {
    let jac = build_jacobian(net, ms);
    let (kept, rejected_rows) = independent_row_subset(&jac);
    let rows: Vec<_> = kept.iter().map(|&r| jac.rows[r].clone()).collect();
    let mut active = vec![true; rows.len()];
    let mut discarded_injections = Vec::new();
    let mut rounds = 0usize;
    let observable = loop {
        rounds += 1;
        let sub = SparseJacobian {
            n_cols: jac.n_cols,
            rows: rows
                .iter()
                .zip(&active)
                .filter(|(_, &a)| a)
                .map(|(r, _)| r.clone())
                .collect(),
        };
        let basis = null_space_basis(&sub);
        let observable: Vec<bool> = net
            .branches()
            .iter()
            .map(|br| basis.iter().all(|b| b[br.from] == b[br.to]))
            .collect();
        let mut boundary = vec![false; net.n_buses()];
        for (br, &obs) in net.branches().iter().zip(&observable) {
            if !obs {
                boundary[br.from] = true;
                boundary[br.to] = true;
            }
        }
        let mut changed = false;
        for (row, a) in rows.iter().zip(active.iter_mut()) {
            if !*a {
                continue;
            }
            let kind = ms.measurements()[row.meas].kind;
            if let MeasurementKind::Injection { bus } | MeasurementKind::PseudoInjection { bus } =
                kind
            {
                if boundary[bus] {
                    *a = false;
                    discarded_injections.push(row.meas);
                    changed = true;
                }
            }
        }
        if !changed {
            break observable;
        }
    };
    let mut uf = UnionFind::new(net.n_buses());
    for (br, &obs) in net.branches().iter().zip(&observable) {
        if obs {
            uf.union(br.from, br.to);
        }
    }
    OracleRun {
        islands: uf.groups(),
        rejected_rows,
        discarded_injections,
        rounds,
    }
}

/// Topological observable islands, same canonical form as `oracle_islands`.
///
/// Measured flows merge their endpoints. Then, to a fixed point, any
/// unconsumed injection whose bus and neighbors span at most two islands is
/// consumed, merging those islands; an injection spread over three or more
/// islands cannot be attributed and stays pending.
pub fn topological_islands(net: &PowerNetwork, ms: &MeasurementSet) -> Vec<Vec<usize>> {
    let jac = build_jacobian(net, ms);
    let (kept, _) = independent_row_subset(&jac);
    let mut uf = UnionFind::new(net.n_buses());
    let mut pending = Vec::new();
    for &r in &kept {
        match ms.measurements()[jac.rows[r].meas].kind {
            MeasurementKind::Flow { branch, .. } => {
                let br = &net.branches()[branch];
                uf.union(br.from, br.to);
            }
            MeasurementKind::Injection { bus } | MeasurementKind::PseudoInjection { bus } => {
                pending.push(bus);
            }
        }
    }
    let mut consumed = vec![false; pending.len()];
    loop {
        let mut changed = false;
        for (k, &bus) in pending.iter().enumerate() {
            if consumed[k] {
                continue;
            }
            let mut roots = vec![uf.find(bus)];
            for &(nb, _) in net.adjacent(bus) {
                let r = uf.find(nb);
                if !roots.contains(&r) {
                    roots.push(r);
                }
            }
            match roots.len() {
                1 => consumed[k] = true,
                2 => {
                    uf.union(roots[0], roots[1]);
                    consumed[k] = true;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }
    uf.groups()
}

// ============================================================================
// Partition comparison
// ============================================================================

/// Two partitions cover different bus sets and cannot be compared.
#[derive(Debug, Error)]
#[error("partitions cover different bus universes")]
pub struct UniverseMismatch;

/// Set-of-sets equality over two partitions of the same bus universe,
/// insensitive to island order and member order within an island.
pub fn partitions_equal(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<bool, UniverseMismatch> {
    let canon = |p: &[Vec<usize>]| {
        let mut islands: Vec<Vec<usize>> = p
            .iter()
            .map(|island| {
                let mut s = island.clone();
                s.sort_unstable();
                s
            })
            .collect();
        islands.sort();
        islands
    };
    let ca = canon(a);
    let cb = canon(b);
    let universe = |p: &[Vec<usize>]| {
        let mut u: Vec<usize> = p.iter().flatten().copied().collect();
        u.sort_unstable();
        u
    };
    if universe(&ca) != universe(&cb) {
        return Err(UniverseMismatch);
    }
    Ok(ca == cb)
}

// ============================================================================
// Tests
// ============================================================================
