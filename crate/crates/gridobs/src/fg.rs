//! Variance-only Gaussian belief propagation on measurement factor graphs.
//!
//! Messages carry a single extended variance: exactly zero, a positive
//! finite value, or infinite. A probe variable is pinned through its virtual
//! factor; synchronous sweeps then propagate certainty (zero) through the
//! measured structure while unconstrained directions diverge. Classifying
//! each posterior variance as collapsed or diverged separates observable
//! from unobservable variables without ever forming a gain matrix.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SparseJacobian;

// ============================================================================
// Extended variances
// ============================================================================

/// A variance in `[0, +inf]` with the endpoints as explicit tags. `Finite`
/// values are strictly positive; arithmetic that overflows or underflows the
/// float range lands on the matching tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedVariance {
    Zero,
    Finite(f64),
    Infinite,
}

use ExtendedVariance::{Finite, Infinite, Zero};

impl ExtendedVariance {
    pub fn is_zero(self) -> bool {
        self == Zero
    }

    pub fn is_infinite(self) -> bool {
        self == Infinite
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Finite(x) => Some(x),
            _ => None,
        }
    }
}

/// Sum of two variances: the series rule. Infinite absorbs, zero is the
/// identity.
pub fn serial_pair(a: ExtendedVariance, b: ExtendedVariance) -> ExtendedVariance {
    match (a, b) {
        (Infinite, _) | (_, Infinite) => Infinite,
        (Zero, x) | (x, Zero) => x,
        (Finite(x), Finite(y)) => {
            let s = x + y;
            if s.is_finite() {
                Finite(s)
            } else {
                Infinite
            }
        }
    }
}

/// Harmonic combination of two variances: the parallel rule. Zero absorbs,
/// infinite is the identity.
pub fn parallel_pair(a: ExtendedVariance, b: ExtendedVariance) -> ExtendedVariance {
    match (a, b) {
        (Zero, _) | (_, Zero) => Zero,
        (Infinite, x) | (x, Infinite) => x,
        (Finite(x), Finite(y)) => {
            let p = (x * y) / (x + y);
            if p == 0.0 {
                Zero
            } else if p.is_finite() {
                Finite(p)
            } else {
                Infinite
            }
        }
    }
}

/// Series combination of `incoming` plus an optional own variance. The empty
/// sum is zero: a factor with no other neighbors and no own variance pins its
/// variable exactly.
pub fn serial_variance(
    incoming: &[ExtendedVariance],
    own: Option<ExtendedVariance>,
) -> ExtendedVariance {
    let base = own.unwrap_or(Zero);
    incoming.iter().fold(base, |acc, &m| serial_pair(acc, m))
}

/// Parallel combination of `incoming`. The empty combination is infinite:
/// no incident information means zero total precision.
pub fn parallel_variance(incoming: &[ExtendedVariance]) -> ExtendedVariance {
    incoming
        .iter()
        .fold(Infinite, |acc, &m| parallel_pair(acc, m))
}

// ============================================================================
// Sweep configuration
// ============================================================================

/// Thresholds governing normalization, stopping, and classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Initial variable-to-factor variance.
    pub v_init: f64,
    /// Finite values at or below this collapse to the zero tag.
    pub v_zero: f64,
    /// Posterior variances at or below this classify as observable.
    pub v_low: f64,
    /// Posterior variances at or above this, when growing, classify as
    /// unobservable.
    pub v_high: f64,
    /// Finite values at or above this saturate to the infinite tag.
    pub v_inf: f64,
    /// Per-sweep relative change at or below which a finite message counts
    /// as converged.
    pub rel_tol: f64,
    /// Sweep budget per pass.
    pub tau_max: u32,
    /// Consecutive strictly-increasing sweeps that count as sustained growth.
    pub growth_window: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            v_init: 1.0,
            v_zero: 1e-12,
            v_low: 1e-4,
            v_high: 1e8,
            v_inf: 1e12,
            rel_tol: 1e-9,
            tau_max: 500,
            growth_window: 5,
        }
    }
}

impl SweepConfig {
    /// Clamps a computed variance into the tag bands.
    pub fn normalize(&self, v: ExtendedVariance) -> ExtendedVariance {
        match v {
            Finite(x) if !(x > self.v_zero) => Zero,
            Finite(x) if x >= self.v_inf => Infinite,
            other => other,
        }
    }
}

/// Classification of one variable after a settled pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observability {
    Observable,
    Unobservable,
}

/// Sweep failure: a posterior variance that neither collapsed, diverged,
/// nor converged within the sweep budget.
#[derive(Debug, Error)]
pub enum SweepError {
    #[error(
        "ambiguous convergence after {sweeps} sweeps: variable {var} has posterior variance \
         {value} with no settled trend"
    )]
    AmbiguousConvergence { var: usize, value: f64, sweeps: u32 },
}

// ============================================================================
// Factor graph
// ============================================================================

/// One measurement factor: the variables its row touches, and an own variance
/// (present on restoration graphs, absent on detection graphs where rows are
/// treated as exact constraints).
#[derive(Clone, Debug)]
pub struct Factor {
    /// Measurement index this factor represents.
    pub meas: usize,
    /// Incident variables, strictly increasing.
    pub vars: Vec<usize>,
    pub own: Option<ExtendedVariance>,
}

/// A bipartite factor/variable graph with one virtual factor per variable.
/// Mutable while being set up (virtual overrides, probe pinning); sweeps
/// never change it.
#[derive(Clone, Debug)]
pub struct FactorGraph {
    n_vars: usize,
    active: Vec<usize>,
    is_active: Vec<bool>,
    factors: Vec<Factor>,
    virtuals: Vec<ExtendedVariance>,
    edge_var: Vec<u32>,
    factor_off: Vec<u32>,
    var_edges: Vec<Vec<u32>>,
}

impl FactorGraph {
    /// Builds a graph over `active` variables (sorted, deduplicated by the
    /// caller) and `factors` whose variables must all be active. Virtual
    /// factors start at infinite variance.
    pub fn new(n_vars: usize, active: Vec<usize>, factors: Vec<Factor>) -> Self {
        let mut is_active = vec![false; n_vars];
        for &v in &active {
            is_active[v] = true;
        }
        let mut edge_var = Vec::new();
        let mut factor_off = Vec::with_capacity(factors.len() + 1);
        let mut var_edges = vec![Vec::new(); n_vars];
        factor_off.push(0);
        for f in &factors {
            for &v in &f.vars {
                debug_assert!(is_active[v], "factor touches inactive variable {v}");
                var_edges[v].push(edge_var.len() as u32);
                edge_var.push(v as u32);
            }
            factor_off.push(edge_var.len() as u32);
        }
        Self {
            n_vars,
            active,
            is_active,
            factors,
            virtuals: vec![Infinite; n_vars],
            edge_var,
            factor_off,
            var_edges,
        }
    }

    /// Graph of one detection pass: one factor per selected Jacobian row,
    /// connected by row sparsity, with no own variances.
    pub fn from_jacobian_rows(jac: &SparseJacobian, rows: &[usize]) -> Self {
        let factors = rows
            .iter()
            .map(|&r| {
                let row = &jac.rows[r];
                Factor {
                    meas: row.meas,
                    vars: row.entries.iter().map(|&(c, _)| c).collect(),
                    own: None,
                }
            })
            .collect();
        Self::new(jac.n_cols, (0..jac.n_cols).collect(), factors)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Active variables, ascending.
    pub fn active_vars(&self) -> &[usize] {
        &self.active
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_edges(&self) -> usize {
        self.edge_var.len()
    }

    /// Overrides the virtual factor variance of `var` (zero pins a probe).
    pub fn set_virtual(&mut self, var: usize, v: ExtendedVariance) {
        debug_assert!(self.is_active[var]);
        self.virtuals[var] = v;
    }

    pub fn virtual_variance(&self, var: usize) -> ExtendedVariance {
        self.virtuals[var]
    }

    /// Replaces a factor's own variance in place. Restoration toggles
    /// candidate factors between infinite (idle) and finite (under test or
    /// accepted) without rebuilding the graph.
    pub fn set_factor_own(&mut self, factor: usize, own: Option<ExtendedVariance>) {
        self.factors[factor].own = own;
    }

    /// First factor representing measurement `meas`, if present.
    pub fn factor_of_meas(&self, meas: usize) -> Option<usize> {
        self.factors.iter().position(|f| f.meas == meas)
    }

    /// Edge index of the `(factor, var)` adjacency, if present.
    pub fn edge_index(&self, factor: usize, var: usize) -> Option<usize> {
        let lo = self.factor_off[factor] as usize;
        let hi = self.factor_off[factor + 1] as usize;
        (lo..hi).find(|&e| self.edge_var[e] as usize == var)
    }

    /// Removes `observed` variables: factors with any observed variable are
    /// dropped and their measurement indices reported in factor order;
    /// survivors keep their own variances while survivor virtuals reset to
    /// infinite.
    pub fn peel(&self, observed: &[usize]) -> (FactorGraph, Vec<usize>) {
        let mut gone = vec![false; self.n_vars];
        for &v in observed {
            gone[v] = true;
        }
        let active: Vec<usize> = self
            .active
            .iter()
            .copied()
            .filter(|&v| !gone[v])
            .collect();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for f in &self.factors {
            if f.vars.iter().any(|&v| gone[v]) {
                dropped.push(f.meas);
            } else {
                kept.push(f.clone());
            }
        }
        (FactorGraph::new(self.n_vars, active, kept), dropped)
    }
}

// ============================================================================
// Message state and sweeps
// ============================================================================

/// Double-buffered messages for one pass, plus the per-edge and per-variable
/// trend bookkeeping the stopping rule reads. One sweep = a factor half-sweep
/// over the previous variable buffer, a virtual refresh, then a variable
/// half-sweep over the fresh factor buffer, Jacobi-style within each half.
#[derive(Clone, Debug)]
pub struct MessageState {
    tau: u32,
    f2v: Vec<ExtendedVariance>,
    f2v_prev: Vec<ExtendedVariance>,
    f2v_prev2: Vec<ExtendedVariance>,
    v2f: Vec<ExtendedVariance>,
    v2f_prev: Vec<ExtendedVariance>,
    v2f_prev2: Vec<ExtendedVariance>,
    f2v_streak: Vec<u16>,
    v2f_streak: Vec<u16>,
    f2v_osc: Vec<u16>,
    v2f_osc: Vec<u16>,
    marginal: Vec<ExtendedVariance>,
    marginal_prev: Vec<ExtendedVariance>,
    marginal_prev2: Vec<ExtendedVariance>,
    marginal_streak: Vec<u16>,
    marginal_osc: Vec<u16>,
    marginal_converged: Vec<bool>,
    updates: u64,
    scratch: Vec<ExtendedVariance>,
}

/// Posterior variance of one variable with the trend flags classification
/// needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marginal {
    pub v: ExtendedVariance,
    /// Relative change at the final sweep was within tolerance (or the tag
    /// was stable).
    pub converged: bool,
    /// Strictly increased for at least the configured window of sweeps.
    pub growing: bool,
    /// Alternated between two exact values for at least the configured
    /// window of sweeps.
    pub alternating: bool,
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev
}

fn hash_variance(h: &mut impl Hasher, v: ExtendedVariance) {
    match v {
        Zero => 0u8.hash(h),
        Infinite => 1u8.hash(h),
        Finite(x) => {
            2u8.hash(h);
            x.to_bits().hash(h);
        }
    }
}

impl MessageState {
    pub fn new(graph: &FactorGraph, cfg: &SweepConfig) -> Self {
        let e = graph.n_edges();
        let n = graph.n_vars();
        let init = cfg.normalize(Finite(cfg.v_init));
        let max_deg = graph
            .factors
            .iter()
            .map(|f| f.vars.len())
            .chain(graph.var_edges.iter().map(|v| v.len() + 1))
            .max()
            .unwrap_or(1);
        Self {
            tau: 0,
            f2v: vec![Infinite; e],
            f2v_prev: vec![Infinite; e],
            f2v_prev2: vec![Infinite; e],
            v2f: vec![init; e],
            v2f_prev: vec![init; e],
            v2f_prev2: vec![init; e],
            f2v_streak: vec![0; e],
            v2f_streak: vec![0; e],
            f2v_osc: vec![0; e],
            v2f_osc: vec![0; e],
            marginal: vec![Infinite; n],
            marginal_prev: vec![Infinite; n],
            marginal_prev2: vec![Infinite; n],
            marginal_streak: vec![0; n],
            marginal_osc: vec![0; n],
            marginal_converged: vec![false; n],
            updates: 0,
            scratch: vec![Zero; 2 * (max_deg + 1)],
        }
    }

    pub fn tau(&self) -> u32 {
        self.tau
    }

    /// Total message updates so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Message updates per sweep: both directions of every edge plus one
    /// virtual refresh per active variable.
    pub fn updates_per_sweep(graph: &FactorGraph) -> u64 {
        2 * graph.n_edges() as u64 + graph.n_active() as u64
    }

    /// Factor-to-variable message on edge `(factor, var)`.
    pub fn f2v(&self, graph: &FactorGraph, factor: usize, var: usize) -> ExtendedVariance {
        self.f2v[graph.edge_index(factor, var).expect("edge exists")]
    }

    /// Variable-to-factor message on edge `(factor, var)`.
    pub fn v2f(&self, graph: &FactorGraph, factor: usize, var: usize) -> ExtendedVariance {
        self.v2f[graph.edge_index(factor, var).expect("edge exists")]
    }

    /// Posterior marginal of `var` with trend flags, judged against the
    /// growth window of `cfg`.
    pub fn marginal(&self, var: usize, cfg: &SweepConfig) -> Marginal {
        Marginal {
            v: self.marginal[var],
            converged: self.marginal_converged[var],
            growing: u32::from(self.marginal_streak[var]) >= cfg.growth_window,
            alternating: u32::from(self.marginal_osc[var]) >= cfg.growth_window,
        }
    }

    /// Runs one synchronous sweep.
    pub fn sweep(&mut self, graph: &FactorGraph, cfg: &SweepConfig) {
        self.tau += 1;
        std::mem::swap(&mut self.v2f_prev2, &mut self.v2f_prev);
        std::mem::swap(&mut self.v2f_prev, &mut self.v2f);
        std::mem::swap(&mut self.f2v_prev2, &mut self.f2v_prev);
        std::mem::swap(&mut self.f2v_prev, &mut self.f2v);

        // Factor half-sweep: exclude-one series over the previous variable
        // buffer, via prefix/suffix partials.
        let half = self.scratch.len() / 2;
        let (prefix, suffix) = self.scratch.split_at_mut(half);
        for (fi, f) in graph.factors.iter().enumerate() {
            let lo = graph.factor_off[fi] as usize;
            let hi = graph.factor_off[fi + 1] as usize;
            let k = hi - lo;
            prefix[0] = Zero;
            for i in 0..k {
                prefix[i + 1] = serial_pair(prefix[i], self.v2f_prev[lo + i]);
            }
            suffix[k] = f.own.unwrap_or(Zero);
            for i in (0..k).rev() {
                suffix[i] = serial_pair(self.v2f_prev[lo + i], suffix[i + 1]);
            }
            for i in 0..k {
                let out = serial_pair(prefix[i], suffix[i + 1]);
                self.f2v[lo + i] = cfg.normalize(out);
            }
        }
        self.updates += graph.n_edges() as u64;

        // Virtual refresh: constant messages, counted as updates.
        self.updates += graph.n_active() as u64;

        // Variable half-sweep and marginals: exclude-one parallel over the
        // fresh factor buffer plus the virtual message.
        std::mem::swap(&mut self.marginal_prev2, &mut self.marginal_prev);
        std::mem::swap(&mut self.marginal_prev, &mut self.marginal);
        for &x in &graph.active {
            let es = &graph.var_edges[x];
            let k = es.len();
            prefix[0] = Infinite;
            for i in 0..k {
                prefix[i + 1] = parallel_pair(prefix[i], self.f2v[es[i] as usize]);
            }
            suffix[k] = graph.virtuals[x];
            for i in (0..k).rev() {
                suffix[i] = parallel_pair(self.f2v[es[i] as usize], suffix[i + 1]);
            }
            for i in 0..k {
                let out = parallel_pair(prefix[i], suffix[i + 1]);
                self.v2f[es[i] as usize] = cfg.normalize(out);
            }
            self.marginal[x] = cfg.normalize(parallel_pair(prefix[k], graph.virtuals[x]));
        }
        self.updates += graph.n_edges() as u64;

        // Trend bookkeeping.
        for e in 0..graph.n_edges() {
            self.f2v_streak[e] = next_streak(self.f2v_streak[e], self.f2v_prev[e], self.f2v[e]);
            self.v2f_streak[e] = next_streak(self.v2f_streak[e], self.v2f_prev[e], self.v2f[e]);
            self.f2v_osc[e] =
                next_osc(self.f2v_osc[e], self.f2v_prev2[e], self.f2v_prev[e], self.f2v[e]);
            self.v2f_osc[e] =
                next_osc(self.v2f_osc[e], self.v2f_prev2[e], self.v2f_prev[e], self.v2f[e]);
        }
        for &x in &graph.active {
            self.marginal_streak[x] =
                next_streak(self.marginal_streak[x], self.marginal_prev[x], self.marginal[x]);
            self.marginal_osc[x] = next_osc(
                self.marginal_osc[x],
                self.marginal_prev2[x],
                self.marginal_prev[x],
                self.marginal[x],
            );
            self.marginal_converged[x] = match (self.marginal_prev[x], self.marginal[x]) {
                (Finite(p), Finite(c)) => rel_change(p, c) <= cfg.rel_tol,
                (p, c) => p == c,
            };
        }
    }

    /// Hash of the variable-to-factor buffer. The sweep map is deterministic
    /// and reads only this buffer across sweeps, so an exact hash repeat
    /// pins the whole run on a permanent cycle.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for &v in &self.v2f {
            hash_variance(&mut h, v);
        }
        h.finish()
    }

    /// Whether every directed message and every active marginal is settled:
    /// a stable tag, a finite value whose last relative change is within
    /// tolerance, a finite value in sustained growth beyond the divergence
    /// band, or a finite value in sustained exact alternation. A tag only
    /// counts once it stops moving: zero and infinite wavefronts travel one
    /// factor hop per sweep, and a changing tag means information is still
    /// in flight even when every other message looks locally stationary.
    /// Alternation arises in exactly determined loops where messages
    /// circulate unchanged; it is bounded, so it cannot mean divergence.
    /// Marginals are checked separately from edges because a marginal lags
    /// its diverging edges by a parallel-combination factor: stopping the
    /// moment the last edge clears the band would freeze marginals just
    /// short of it.
    pub fn all_settled(&self, graph: &FactorGraph, cfg: &SweepConfig) -> bool {
        let ok = |prev: ExtendedVariance, cur: ExtendedVariance, streak: u16, osc: u16| match cur {
            Zero | Infinite => prev == cur,
            Finite(x) => {
                let converged = matches!(prev, Finite(p) if rel_change(p, x) <= cfg.rel_tol);
                converged
                    || (u32::from(streak) >= cfg.growth_window && x >= cfg.v_high)
                    || u32::from(osc) >= cfg.growth_window
            }
        };
        (0..self.f2v.len())
            .all(|e| ok(self.f2v_prev[e], self.f2v[e], self.f2v_streak[e], self.f2v_osc[e]))
            && (0..self.v2f.len())
                .all(|e| ok(self.v2f_prev[e], self.v2f[e], self.v2f_streak[e], self.v2f_osc[e]))
            && graph.active_vars().iter().all(|&x| {
                let converged = self.marginal_converged[x];
                match self.marginal[x] {
                    Zero | Infinite => converged,
                    Finite(v) => {
                        converged
                            || (u32::from(self.marginal_streak[x]) >= cfg.growth_window
                                && v >= cfg.v_high)
                            || u32::from(self.marginal_osc[x]) >= cfg.growth_window
                    }
                }
            })
    }
}

fn next_streak(streak: u16, prev: ExtendedVariance, cur: ExtendedVariance) -> u16 {
    match (prev, cur) {
        (Finite(p), Finite(c)) if c > p => streak.saturating_add(1),
        _ => 0,
    }
}

/// Exact period-two alternation: the current value repeats the value from
/// two sweeps ago while differing from the last one.
fn next_osc(
    osc: u16,
    prev2: ExtendedVariance,
    prev: ExtendedVariance,
    cur: ExtendedVariance,
) -> u16 {
    if matches!(cur, Finite(_)) && cur == prev2 && cur != prev {
        osc.saturating_add(1)
    } else {
        0
    }
}

// ============================================================================
// Running a pass
// ============================================================================

/// Why a pass stopped sweeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Every message settled.
    Criterion,
    /// The exact message state recurred: the run is on a permanent cycle of
    /// this period.
    Cycle { period: u32 },
    /// Sweep budget exhausted; marginals were still classifiable.
    TauMax,
}

/// What one variable's marginal did across one full period of a detected
/// cycle.
#[derive(Clone, Copy, Debug, Default)]
struct PhaseEnvelope {
    saw_zero: bool,
    saw_finite: bool,
    max_finite: f64,
}

/// A finished pass: final message state plus counters.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub state: MessageState,
    pub sweeps: u32,
    pub updates: u64,
    pub stop: StopReason,
    /// Per-variable marginal envelope over one cycle period, present iff
    /// `stop` is `Cycle`.
    envelopes: Option<Vec<PhaseEnvelope>>,
}

impl SweepRun {
    /// Classifies one variable's posterior. On a cycle stop the judgment is
    /// the marginal's envelope over one full period: a marginal that ever
    /// collapses or stays bounded below the divergence band is observable,
    /// one that is infinite or parked high at every phase is not.
    pub fn classify(&self, var: usize, cfg: &SweepConfig) -> Result<Observability, SweepError> {
        if let Some(envelopes) = &self.envelopes {
            let e = envelopes[var];
            return if e.saw_zero || (e.saw_finite && e.max_finite < cfg.v_high) {
                Ok(Observability::Observable)
            } else {
                Ok(Observability::Unobservable)
            };
        }
        let m = self.state.marginal(var, cfg);
        classify_variance(&m, var, self.sweeps, cfg)
    }

    /// Marginal with trend flags, for reporting and tests.
    pub fn marginal(&self, var: usize, cfg: &SweepConfig) -> Marginal {
        self.state.marginal(var, cfg)
    }
}

/// Builds the detection factor graph for the selected Jacobian rows.
pub fn build_detection_graph(jac: &SparseJacobian, rows: &[usize]) -> FactorGraph {
    FactorGraph::from_jacobian_rows(jac, rows)
}

/// Sweeps `graph` until every message settles, the exact state recurs, or
/// the budget runs out. A state recurrence means identity-gain loops carry
/// the run on a permanent cycle; one further period is swept to record each
/// marginal's envelope for classification. At the budget boundary every
/// active marginal must still classify; otherwise the pass is ambiguous and
/// the error carries the offending variable.
pub fn run_sweeps(graph: &FactorGraph, cfg: &SweepConfig) -> Result<SweepRun, SweepError> {
    let mut state = MessageState::new(graph, cfg);
    let mut seen: HashMap<u64, u32> = HashMap::new();
    let stop = loop {
        state.sweep(graph, cfg);
        if state.all_settled(graph, cfg) {
            break StopReason::Criterion;
        }
        if let Some(since) = seen.insert(state.state_hash(), state.tau()) {
            // A repeat one sweep apart is a fixpoint still flushing through
            // the factor buffer; the settle check picks it up next sweep.
            let period = state.tau() - since;
            if period > 1 {
                break StopReason::Cycle { period };
            }
        }
        if state.tau >= cfg.tau_max {
            break StopReason::TauMax;
        }
    };
    let envelopes = if let StopReason::Cycle { period } = stop {
        // Sweep first so recorded marginals derive from in-cycle states, not
        // the transient the recurrence was detected on.
        let mut envelopes = vec![PhaseEnvelope::default(); graph.n_vars()];
        for _ in 0..period {
            state.sweep(graph, cfg);
            for &x in graph.active_vars() {
                let e = &mut envelopes[x];
                match state.marginal[x] {
                    Zero => e.saw_zero = true,
                    Finite(v) => {
                        e.saw_finite = true;
                        e.max_finite = e.max_finite.max(v);
                    }
                    Infinite => {}
                }
            }
        }
        Some(envelopes)
    } else {
        None
    };
    let run = SweepRun {
        sweeps: state.tau(),
        updates: state.updates(),
        state,
        stop,
        envelopes,
    };
    if run.stop == StopReason::TauMax {
        for &x in graph.active_vars() {
            run.classify(x, cfg)?;
        }
    }
    Ok(run)
}

/// Classifies a posterior variance. A variable is observable exactly when
/// its posterior stays finite: unconstrained directions accumulate variance
/// without bound, while measured directions hold it down, to zero through
/// tree structure or to a finite fixpoint through loops. Operationally a
/// zero tag or any finite value below the divergence band is observable; an
/// infinite tag or a value at or beyond `v_high` is unobservable. Genuine
/// divergence moves fast in this algebra (loop gains multiply variance every
/// lap), so a posterior that has not cleared `v_high` within the sweep
/// budget is held, not escaping.
pub fn classify_variance(
    m: &Marginal,
    var: usize,
    sweeps: u32,
    cfg: &SweepConfig,
) -> Result<Observability, SweepError> {
    let _ = (var, sweeps);
    match m.v {
        Zero => Ok(Observability::Observable),
        Infinite => Ok(Observability::Unobservable),
        Finite(x) => {
            if x >= cfg.v_high {
                Ok(Observability::Unobservable)
            } else {
                Ok(Observability::Observable)
            }
        }
    }
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_jacobian, MeasurementSet, PowerNetwork};

    const SIXBUS_CASE: &str = include_str!("../tests/data/sixbus_case.json");
    const SIXBUS_MEAS: &str = include_str!("../tests/data/sixbus_meas.json");

    fn detection_graph() -> FactorGraph {
        let net = PowerNetwork::from_json_str(SIXBUS_CASE).unwrap();
        let ms = MeasurementSet::from_json_str(SIXBUS_MEAS, &net).unwrap();
        let jac = build_jacobian(&net, &ms);
        let rows: Vec<usize> = (0..jac.rows.len()).collect();
        build_detection_graph(&jac, &rows)
    }

    #[test]
    fn serial_and_parallel_rules() {
        assert_eq!(serial_pair(Finite(1.0), Finite(2.0)), Finite(3.0));
        assert_eq!(serial_pair(Infinite, Finite(2.0)), Infinite);
        assert_eq!(serial_pair(Zero, Zero), Zero);
        assert_eq!(serial_variance(&[], None), Zero);
        assert_eq!(serial_variance(&[Finite(1.0)], Some(Finite(0.5))), Finite(1.5));
        assert_eq!(parallel_pair(Finite(2.0), Finite(2.0)), Finite(1.0));
        assert_eq!(parallel_pair(Zero, Infinite), Zero);
        assert_eq!(parallel_pair(Infinite, Infinite), Infinite);
        assert_eq!(parallel_variance(&[]), Infinite);
        assert_eq!(
            parallel_variance(&[Finite(3.0), Infinite, Finite(6.0)]),
            Finite(2.0)
        );
    }

    #[test]
    fn normalization_bands() {
        let cfg = SweepConfig::default();
        assert_eq!(cfg.normalize(Finite(1e-13)), Zero);
        assert_eq!(cfg.normalize(Finite(1e13)), Infinite);
        assert_eq!(cfg.normalize(Finite(2.0)), Finite(2.0));
        assert_eq!(cfg.normalize(Zero), Zero);
        assert_eq!(cfg.normalize(Infinite), Infinite);
    }

    /// First sweep of the six-bus pass with probe at variable 0: the
    /// injection factor at bus 3 relays the three unit init variances, and
    /// the probed variable's outgoing message collapses to zero.
    #[test]
    fn sixbus_first_sweep_messages() {
        let mut graph = detection_graph();
        graph.set_virtual(0, Zero);
        let cfg = SweepConfig::default();
        let mut state = MessageState::new(&graph, &cfg);
        state.sweep(&graph, &cfg);
        // Measurement 2 is the injection at bus 3 (factor over x1,x2,x3,x4).
        let f9 = graph.factor_of_meas(2).unwrap();
        assert_eq!(state.f2v(&graph, f9, 0), Finite(3.0));
        // Measurement 0 is the flow on branch 1-2 (factor over x1,x2).
        let f7 = graph.factor_of_meas(0).unwrap();
        assert_eq!(state.v2f(&graph, f7, 0), Zero);
    }

    /// Converged six-bus pass: every factor-to-variable message is infinite
    /// except the flow message into x2, which collapses; marginals split
    /// {x1,x2} from the rest.
    #[test]
    fn sixbus_pass_converges_to_tags() {
        let mut graph = detection_graph();
        graph.set_virtual(0, Zero);
        let cfg = SweepConfig::default();
        let run = run_sweeps(&graph, &cfg).unwrap();
        assert_eq!(run.stop, StopReason::Criterion);
        let f7 = graph.factor_of_meas(0).unwrap();
        for (fi, f) in graph.factors().iter().enumerate() {
            for &v in &f.vars {
                let msg = run.state.f2v(&graph, fi, v);
                if fi == f7 && v == 1 {
                    assert_eq!(msg, Zero, "flow message into x2");
                } else {
                    assert_eq!(msg, Infinite, "factor {fi} -> x{v}");
                }
            }
        }
        for v in 0..6 {
            let m = run.marginal(v, &cfg);
            if v < 2 {
                assert_eq!(m.v, Zero);
            } else {
                assert_eq!(m.v, Infinite);
            }
        }
        let obs: Vec<usize> = (0..6)
            .filter(|&v| run.classify(v, &cfg).unwrap() == Observability::Observable)
            .collect();
        assert_eq!(obs, vec![0, 1]);
    }

    /// A graph with no measurement factors: the probe observes itself and
    /// nothing else.
    #[test]
    fn empty_graph_isolates_probe() {
        let mut graph = FactorGraph::new(3, vec![0, 1, 2], vec![]);
        graph.set_virtual(1, Zero);
        let cfg = SweepConfig::default();
        let run = run_sweeps(&graph, &cfg).unwrap();
        // One sweep computes the marginals, a second confirms the tags held.
        assert_eq!(run.sweeps, 2);
        assert_eq!(run.classify(1, &cfg).unwrap(), Observability::Observable);
        assert_eq!(run.classify(0, &cfg).unwrap(), Observability::Unobservable);
        assert_eq!(run.classify(2, &cfg).unwrap(), Observability::Unobservable);
    }

    /// Probing the leaf of the injection at bus 5 feeds the flow/injection
    /// loop on x4,x5 only through zero-variance legs, so the loop messages
    /// circulate between two exact values forever. The pass must detect the
    /// recurring state and classify the bounded loop observable.
    #[test]
    fn exactly_determined_loop_settles_by_cycle() {
        let mut graph = detection_graph();
        graph.set_virtual(5, Zero);
        let cfg = SweepConfig::default();
        let run = run_sweeps(&graph, &cfg).unwrap();
        assert_eq!(run.stop, StopReason::Cycle { period: 2 });
        assert!(run.sweeps < 30, "the cycle must be caught quickly");
        for v in [3, 4, 5] {
            assert_eq!(run.classify(v, &cfg).unwrap(), Observability::Observable);
        }
        for v in [0, 1, 2] {
            assert_eq!(run.classify(v, &cfg).unwrap(), Observability::Unobservable);
        }
    }

    #[test]
    fn update_count_per_sweep_is_exact() {
        let mut graph = detection_graph();
        graph.set_virtual(0, Zero);
        let cfg = SweepConfig::default();
        let run = run_sweeps(&graph, &cfg).unwrap();
        let per_sweep = MessageState::updates_per_sweep(&graph);
        assert_eq!(per_sweep, 2 * 11 + 6);
        assert_eq!(run.updates, u64::from(run.sweeps) * per_sweep);
    }

    /// Factor order must not affect converged messages: one sweep's updates
    /// read only frozen buffers.
    #[test]
    fn sweep_is_order_independent() {
        let net = PowerNetwork::from_json_str(SIXBUS_CASE).unwrap();
        let ms = MeasurementSet::from_json_str(SIXBUS_MEAS, &net).unwrap();
        let jac = build_jacobian(&net, &ms);
        let forward = build_detection_graph(&jac, &[0, 1, 2, 3]);
        let backward = build_detection_graph(&jac, &[3, 2, 1, 0]);
        let cfg = SweepConfig::default();
        let mut a = forward.clone();
        a.set_virtual(0, Zero);
        let mut b = backward.clone();
        b.set_virtual(0, Zero);
        let ra = run_sweeps(&a, &cfg).unwrap();
        let rb = run_sweeps(&b, &cfg).unwrap();
        assert_eq!(ra.sweeps, rb.sweeps);
        for (fa, f) in a.factors().iter().enumerate() {
            let fb = b.factor_of_meas(f.meas).unwrap();
            for &v in &f.vars {
                assert_eq!(ra.state.f2v(&a, fa, v), rb.state.f2v(&b, fb, v));
                assert_eq!(ra.state.v2f(&a, fa, v), rb.state.v2f(&b, fb, v));
            }
        }
    }

    #[test]
    fn peel_drops_touching_factors_and_resets_virtuals() {
        let mut graph = detection_graph();
        graph.set_virtual(0, Zero);
        let (peeled, dropped) = graph.peel(&[0, 1]);
        // Flow 1-2 (meas 0) and injection at 3 (meas 2) touch the island.
        assert_eq!(dropped, vec![0, 2]);
        assert_eq!(peeled.active_vars(), &[2, 3, 4, 5]);
        assert_eq!(peeled.factors().len(), 2);
        let survivors: Vec<usize> = peeled.factors().iter().map(|f| f.meas).collect();
        assert_eq!(survivors, vec![1, 3]);
        for &v in peeled.active_vars() {
            assert_eq!(peeled.virtual_variance(v), Infinite);
        }
    }
}
