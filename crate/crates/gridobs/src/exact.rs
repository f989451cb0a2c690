//! Exact sparse linear algebra over the integers and rationals.
//!
//! Rank, greedy independent-row selection, and null-space computation for
//! measurement Jacobians. No floating point enters any decision: rows are
//! combined fraction-free with integer cross-multiples and a gcd reduction
//! after every step. Coefficients use machine integers while they fit and
//! escalate to arbitrary precision on overflow, so results are exact at any
//! size. Elimination pivots on the row's leading column under a least-degree
//! column ordering, which keeps fill-in low on network matrices.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::model::SparseJacobian;

// ============================================================================
// Sparse integer rows
// ============================================================================

/// A sparse row with entries sorted by column. `Small` rows hold machine
/// integers; any overflow during a combine promotes the result to `Big`.
#[derive(Clone, Debug, PartialEq, Eq)]
enum SparseRow {
    Small(Vec<(u32, i64)>),
    Big(Vec<(u32, BigInt)>),
}

impl SparseRow {
    fn is_empty(&self) -> bool {
        match self {
            SparseRow::Small(v) => v.is_empty(),
            SparseRow::Big(v) => v.is_empty(),
        }
    }

    fn coefficient(&self, col: u32) -> Option<BigInt> {
        match self {
            SparseRow::Small(v) => v
                .binary_search_by_key(&col, |e| e.0)
                .ok()
                .map(|i| BigInt::from(v[i].1)),
            SparseRow::Big(v) => v
                .binary_search_by_key(&col, |e| e.0)
                .ok()
                .map(|i| v[i].1.clone()),
        }
    }

    fn columns(&self) -> Vec<u32> {
        match self {
            SparseRow::Small(v) => v.iter().map(|e| e.0).collect(),
            SparseRow::Big(v) => v.iter().map(|e| e.0).collect(),
        }
    }

    fn to_big(&self) -> Vec<(u32, BigInt)> {
        match self {
            SparseRow::Small(v) => v.iter().map(|&(c, x)| (c, BigInt::from(x))).collect(),
            SparseRow::Big(v) => v.clone(),
        }
    }

    /// Divides by the gcd of all entries and fixes the sign of the first
    /// entry positive; demotes to machine integers when everything fits.
    fn normalize(self) -> SparseRow {
        match self {
            SparseRow::Small(mut v) => {
                if v.is_empty() {
                    return SparseRow::Small(v);
                }
                let mut g: i64 = 0;
                for &(_, x) in &v {
                    g = g.gcd(&x);
                }
                let sign = if v[0].1 < 0 { -1 } else { 1 };
                let d = g * sign;
                if d != 1 {
                    for e in &mut v {
                        e.1 /= d;
                    }
                }
                SparseRow::Small(v)
            }
            SparseRow::Big(mut v) => {
                if v.is_empty() {
                    return SparseRow::Big(v);
                }
                let mut g = BigInt::zero();
                for (_, x) in &v {
                    g = g.gcd(x);
                }
                if v[0].1.is_negative() {
                    g = -g;
                }
                if !g.is_one() {
                    for e in &mut v {
                        e.1 = &e.1 / &g;
                    }
                }
                if let Some(small) = try_demote(&v) {
                    SparseRow::Small(small)
                } else {
                    SparseRow::Big(v)
                }
            }
        }
    }
}

fn try_demote(v: &[(u32, BigInt)]) -> Option<Vec<(u32, i64)>> {
    let mut out = Vec::with_capacity(v.len());
    for (c, x) in v {
        out.push((*c, i64::try_from(x).ok()?));
    }
    Some(out)
}

/// `mr * r - mp * p` over machine integers; `None` on any overflow.
fn combine_small(
    r: &[(u32, i64)],
    p: &[(u32, i64)],
    mr: i64,
    mp: i64,
) -> Option<Vec<(u32, i64)>> {
    let mut out = Vec::with_capacity(r.len() + p.len());
    let (mut i, mut j) = (0, 0);
    while i < r.len() || j < p.len() {
        let (col, val) = if j >= p.len() || (i < r.len() && r[i].0 < p[j].0) {
            let v = mr.checked_mul(r[i].1)?;
            i += 1;
            (r[i - 1].0, v)
        } else if i >= r.len() || p[j].0 < r[i].0 {
            let v = mp.checked_mul(p[j].1)?.checked_neg()?;
            j += 1;
            (p[j - 1].0, v)
        } else {
            let a = mr.checked_mul(r[i].1)?;
            let b = mp.checked_mul(p[j].1)?;
            let v = a.checked_sub(b)?;
            let col = r[i].0;
            i += 1;
            j += 1;
            (col, v)
        };
        if val != 0 {
            out.push((col, val));
        }
    }
    Some(out)
}

fn combine_big(
    r: &[(u32, BigInt)],
    p: &[(u32, BigInt)],
    mr: &BigInt,
    mp: &BigInt,
) -> Vec<(u32, BigInt)> {
    let mut out = Vec::with_capacity(r.len() + p.len());
    let (mut i, mut j) = (0, 0);
    while i < r.len() || j < p.len() {
        let (col, val) = if j >= p.len() || (i < r.len() && r[i].0 < p[j].0) {
            let v = mr * &r[i].1;
            i += 1;
            (r[i - 1].0, v)
        } else if i >= r.len() || p[j].0 < r[i].0 {
            let v = -(mp * &p[j].1);
            j += 1;
            (p[j - 1].0, v)
        } else {
            let v = mr * &r[i].1 - mp * &p[j].1;
            let col = r[i].0;
            i += 1;
            j += 1;
            (col, v)
        };
        if !val.is_zero() {
            out.push((col, val));
        }
    }
    out
}

/// Eliminates `p`'s pivot column from `r`. `a` is the pivot coefficient of
/// `p` at that column, `b` is `r`'s coefficient there.
fn eliminate(r: &SparseRow, p: &SparseRow, a: &BigInt, b: &BigInt) -> SparseRow {
    let g = a.gcd(b);
    let mr = a / &g;
    let mp = b / &g;
    if let (SparseRow::Small(rs), SparseRow::Small(ps)) = (r, p) {
        if let (Ok(mr64), Ok(mp64)) = (i64::try_from(&mr), i64::try_from(&mp)) {
            if let Some(out) = combine_small(rs, ps, mr64, mp64) {
                return SparseRow::Small(out).normalize();
            }
        }
    }
    SparseRow::Big(combine_big(&r.to_big(), &p.to_big(), &mr, &mp)).normalize()
}

// ============================================================================
// Echelon form
// ============================================================================

/// Incremental echelon form: rows are reduced against the pivots collected so
/// far and either vanish (dependent) or contribute a new pivot. The pivot of
/// a row is its leading column under the configured column ordering.
pub struct Echelon {
    n_cols: usize,
    /// Sort key per column; leading column = minimal key.
    key: Vec<u32>,
    pivots: Vec<PivotRow>,
    pivot_at: Vec<Option<u32>>,
}

struct PivotRow {
    lead: u32,
    row: SparseRow,
}

impl Echelon {
    /// Identity column ordering.
    pub fn new(n_cols: usize) -> Self {
        Self::with_key((0..n_cols as u32).collect())
    }

    /// Orders columns by ascending degree in `jac` (ties by index). Pivoting
    /// on rarely-shared columns first keeps elimination fill-in low.
    pub fn for_jacobian(jac: &SparseJacobian) -> Self {
        let mut degree = vec![0u32; jac.n_cols];
        for row in &jac.rows {
            for &(c, _) in &row.entries {
                degree[c] += 1;
            }
        }
        let mut order: Vec<u32> = (0..jac.n_cols as u32).collect();
        order.sort_by_key(|&c| (degree[c as usize], c));
        let mut key = vec![0u32; jac.n_cols];
        for (rank, &c) in order.iter().enumerate() {
            key[c as usize] = rank as u32;
        }
        Self::with_key(key)
    }

    fn with_key(key: Vec<u32>) -> Self {
        let n_cols = key.len();
        Self {
            n_cols,
            key,
            pivots: Vec::new(),
            pivot_at: vec![None; n_cols],
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    fn lead_of(&self, row: &SparseRow) -> Option<u32> {
        row.columns()
            .into_iter()
            .min_by_key(|&c| self.key[c as usize])
    }

    /// Reduces `row` against the pivots; the remainder is zero exactly when
    /// `row` lies in the span of the rows added so far.
    fn reduce(&self, mut row: SparseRow) -> SparseRow {
        loop {
            let Some(lead) = self.lead_of(&row) else {
                return row;
            };
            let Some(pidx) = self.pivot_at[lead as usize] else {
                return row;
            };
            let pivot = &self.pivots[pidx as usize];
            let a = pivot.row.coefficient(lead).expect("pivot coefficient");
            let b = row.coefficient(lead).expect("reduced coefficient");
            row = eliminate(&row, &pivot.row, &a, &b);
        }
    }

    fn insert(&mut self, row: SparseRow) -> bool {
        let row = self.reduce(row);
        match self.lead_of(&row) {
            None => false,
            Some(lead) => {
                self.pivot_at[lead as usize] = Some(self.pivots.len() as u32);
                self.pivots.push(PivotRow { lead, row });
                true
            }
        }
    }

    /// Adds an integer row; returns true if it increased the rank.
    pub fn add_row(&mut self, entries: &[(usize, i64)]) -> bool {
        self.insert(small_row(entries))
    }

    /// Whether `entries` lies in the row space accumulated so far.
    pub fn spans(&self, entries: &[(usize, i64)]) -> bool {
        self.reduce(small_row(entries)).is_empty()
    }

    /// Pivot columns in insertion order.
    pub fn pivot_columns(&self) -> Vec<usize> {
        self.pivots.iter().map(|p| p.lead as usize).collect()
    }

    /// Solves `R x = 0` for one basis vector per non-pivot column: the free
    /// column is set to one, remaining free columns to zero, and pivot values
    /// are back-substituted in descending key order.
    pub fn null_space_basis(&self) -> Vec<Vec<BigRational>> {
        let mut order: Vec<usize> = (0..self.pivots.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.key[self.pivots[i].lead as usize]));
        let mut basis = Vec::with_capacity(self.n_cols - self.pivots.len());
        for free in 0..self.n_cols {
            if self.pivot_at[free].is_some() {
                continue;
            }
            let mut v = vec![BigRational::zero(); self.n_cols];
            v[free] = BigRational::one();
            for &i in &order {
                let pivot = &self.pivots[i];
                let mut acc = BigRational::zero();
                let mut diag = BigInt::zero();
                for (c, x) in pivot.row.to_big() {
                    if c == pivot.lead {
                        diag = x;
                    } else if !v[c as usize].is_zero() {
                        acc += BigRational::from_integer(x) * &v[c as usize];
                    }
                }
                v[pivot.lead as usize] = -acc / BigRational::from_integer(diag);
            }
            basis.push(v);
        }
        basis
    }
}

fn small_row(entries: &[(usize, i64)]) -> SparseRow {
    let mut v: Vec<(u32, i64)> = entries
        .iter()
        .filter(|&&(_, x)| x != 0)
        .map(|&(c, x)| (c as u32, x))
        .collect();
    v.sort_unstable_by_key(|e| e.0);
    SparseRow::Small(v).normalize()
}

// ============================================================================
// Jacobian-level operations
// ============================================================================

/// Exact row rank of a sparse integer matrix.
pub fn row_rank(jac: &SparseJacobian) -> usize {
    let mut ech = Echelon::for_jacobian(jac);
    for row in &jac.rows {
        ech.add_row(&row.entries);
    }
    ech.rank()
}

/// First-come greedy split of rows into an independent subset and the rest:
/// row `i` is kept exactly when it increases the rank of rows kept before it.
/// Deterministic in the row order.
pub fn independent_row_subset(jac: &SparseJacobian) -> (Vec<usize>, Vec<usize>) {
    let mut ech = Echelon::for_jacobian(jac);
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in jac.rows.iter().enumerate() {
        if ech.add_row(&row.entries) {
            kept.push(i);
        } else {
            rejected.push(i);
        }
    }
    (kept, rejected)
}

/// Exact basis of `{x : J x = 0}`, one vector per non-pivot column. The basis
/// has `n_cols - rank` vectors; an empty basis means full column rank.
pub fn null_space_basis(jac: &SparseJacobian) -> Vec<Vec<BigRational>> {
    let mut ech = Echelon::for_jacobian(jac);
    for row in &jac.rows {
        ech.add_row(&row.entries);
    }
    ech.null_space_basis()
}

// ============================================================================
// Rational matrices
// ============================================================================

/// A dense-by-row matrix of exact rationals.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalMatrix {
    pub n_cols: usize,
    pub rows: Vec<Vec<BigRational>>,
}

impl RationalMatrix {
    pub fn new(n_cols: usize, rows: Vec<Vec<BigRational>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == n_cols));
        Self { n_cols, rows }
    }

    pub fn from_integers(rows: &[Vec<i64>]) -> Self {
        let n_cols = rows.first().map_or(0, |r| r.len());
        Self::new(
            n_cols,
            rows.iter()
                .map(|r| r.iter().map(|&x| BigRational::from_integer(x.into())).collect())
                .collect(),
        )
    }

    /// Exact row rank; each row is scaled by its denominator lcm and fed to
    /// the integer echelon.
    pub fn row_rank(&self) -> usize {
        let mut ech = Echelon::new(self.n_cols);
        for row in &self.rows {
            let mut scale = BigInt::one();
            for x in row {
                scale = scale.lcm(x.denom());
            }
            let entries: Vec<(u32, BigInt)> = row
                .iter()
                .enumerate()
                .filter(|(_, x)| !x.is_zero())
                .map(|(c, x)| (c as u32, (x * BigRational::from_integer(scale.clone())).to_integer()))
                .collect();
            ech.insert(SparseRow::Big(entries).normalize());
        }
        ech.rank()
    }

    /// Matrix-vector product, exact.
    pub fn mul_vec(&self, v: &[BigRational]) -> Vec<BigRational> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JacobianRow, SparseJacobian};
    use proptest::prelude::*;

    fn jac_from_dense(rows: &[Vec<i64>]) -> SparseJacobian {
        let n_cols = rows.first().map_or(0, |r| r.len());
        SparseJacobian {
            n_cols,
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, r)| JacobianRow {
                    meas: i,
                    entries: r
                        .iter()
                        .enumerate()
                        .filter(|&(_, &x)| x != 0)
                        .map(|(c, &x)| (c, x))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Reference rank: dense Gauss-Jordan over `BigRational`, written
    /// independently of the sparse fraction-free path.
    fn dense_rational_rank(rows: &[Vec<i64>]) -> usize {
        let mut m: Vec<Vec<BigRational>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| BigRational::from_integer(x.into())).collect())
            .collect();
        let n_cols = m.first().map_or(0, |r| r.len());
        let mut rank = 0;
        for col in 0..n_cols {
            let Some(p) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
                continue;
            };
            m.swap(rank, p);
            let inv = m[rank][col].recip();
            for x in &mut m[rank] {
                *x *= &inv;
            }
            for r in 0..m.len() {
                if r != rank && !m[r][col].is_zero() {
                    let f = m[r][col].clone();
                    for c in 0..n_cols {
                        let t = &m[rank][c] * &f;
                        m[r][c] -= t;
                    }
                }
            }
            rank += 1;
            if rank == m.len() {
                break;
            }
        }
        rank
    }

    const SIXBUS_ROWS: [[i64; 6]; 4] = [
        [1, -1, 0, 0, 0, 0],
        [0, 0, 0, 1, -1, 0],
        [-1, -1, 3, -1, 0, 0],
        [0, 0, 0, -1, 2, -1],
    ];

    fn sixbus_jac() -> SparseJacobian {
        jac_from_dense(&SIXBUS_ROWS.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn sixbus_rank_is_four() {
        assert_eq!(row_rank(&sixbus_jac()), 4);
        assert_eq!(
            dense_rational_rank(&SIXBUS_ROWS.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
            4
        );
    }

    /// The six-bus null space is two-dimensional and pins the angle
    /// relations x1 = x2, x4 = x5 = x6, x3 = (2 x1 + x4) / 3.
    #[test]
    fn sixbus_null_space_relations() {
        let jac = sixbus_jac();
        let basis = null_space_basis(&jac);
        assert_eq!(basis.len(), 2);
        let m = RationalMatrix::from_integers(
            &SIXBUS_ROWS.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        );
        let two = BigRational::from_integer(2.into());
        let three = BigRational::from_integer(3.into());
        for b in &basis {
            assert!(m.mul_vec(b).iter().all(|x| x.is_zero()));
            assert_eq!(b[0], b[1]);
            assert_eq!(b[3], b[4]);
            assert_eq!(b[4], b[5]);
            assert_eq!(b[2], (&two * &b[0] + &b[3]) / &three);
        }
    }

    #[test]
    fn greedy_subset_keeps_first_of_duplicates() {
        let jac = jac_from_dense(&[
            vec![1, -1, 0],
            vec![1, -1, 0],
            vec![0, 1, -1],
            vec![1, 0, -1],
        ]);
        let (kept, rejected) = independent_row_subset(&jac);
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(rejected, vec![1, 3]);
    }

    #[test]
    fn rejects_scaled_and_combined_rows() {
        // [-1, 2, -1] = -([1,-1,0]) + [0,1,-1] is dependent; scaling too.
        let jac = jac_from_dense(&[vec![1, -1, 0], vec![0, 1, -1], vec![-1, 2, -1], vec![3, -3, 0]]);
        let (kept, rejected) = independent_row_subset(&jac);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(rejected, vec![2, 3]);
    }

    #[test]
    fn empty_and_zero_rows() {
        let jac = jac_from_dense(&[vec![0, 0, 0]]);
        assert_eq!(row_rank(&jac), 0);
        assert_eq!(null_space_basis(&jac).len(), 3);
        let empty = SparseJacobian {
            n_cols: 4,
            rows: vec![],
        };
        assert_eq!(row_rank(&empty), 0);
        assert_eq!(null_space_basis(&empty).len(), 4);
    }

    #[test]
    fn spans_detects_membership() {
        let jac = jac_from_dense(&[vec![1, -1, 0, 0], vec![0, 1, -1, 0]]);
        let mut ech = Echelon::for_jacobian(&jac);
        for row in &jac.rows {
            ech.add_row(&row.entries);
        }
        assert!(ech.spans(&[(0, 1), (2, -1)]));
        assert!(ech.spans(&[(0, 2), (1, -1), (2, -1)]));
        assert!(!ech.spans(&[(2, 1), (3, -1)]));
    }

    /// Entry growth past i64 must escalate, not wrap: build rows whose
    /// elimination multiplies coefficients up to ~2^80.
    #[test]
    fn big_integer_escalation_is_exact() {
        let a: i64 = (1 << 40) + 1;
        let b: i64 = (1 << 40) - 1;
        let rows = vec![
            vec![a, b, 0, 1],
            vec![b, a, 1, 0],
            vec![1, 1, a, b],
            vec![1, -1, b, a],
        ];
        let jac = jac_from_dense(&rows);
        assert_eq!(row_rank(&jac), dense_rational_rank(&rows));
        for v in null_space_basis(&jac) {
            let m = RationalMatrix::from_integers(&rows);
            assert!(m.mul_vec(&v).iter().all(|x| x.is_zero()));
        }
    }

    #[test]
    fn rational_matrix_rank_clears_denominators() {
        let half = BigRational::new(1.into(), 2.into());
        let third = BigRational::new(1.into(), 3.into());
        let m = RationalMatrix::new(
            2,
            vec![
                vec![half.clone(), third.clone()],
                vec![half * BigRational::from_integer(3.into()), third * BigRational::from_integer(3.into())],
            ],
        );
        assert_eq!(m.row_rank(), 1);
    }

    proptest! {
        

        /// Sparse fraction-free rank equals dense rational elimination on
        /// random small integer matrices.
        #[test]
        fn rank_matches_dense_oracle(
            rows in prop::collection::vec(
                prop::collection::vec(-4i64..=4, 5),
                0..8
            )
        ) {
            let jac = jac_from_dense(&rows);
            prop_assert_eq!(row_rank(&jac), dense_rational_rank(&rows));
        }

        /// rank + nullity = n_cols, and every basis vector is annihilated.
        #[test]
        fn rank_nullity_and_kernel(
            rows in prop::collection::vec(
                prop::collection::vec(-3i64..=3, 4),
                0..7
            )
        ) {
            let jac = jac_from_dense(&rows);
            let rank = row_rank(&jac);
            let basis = null_space_basis(&jac);
            prop_assert_eq!(rank + basis.len(), jac.n_cols);
            let m = RationalMatrix::from_integers(&rows);
            for v in &basis {
                prop_assert!(m.mul_vec(v).iter().all(|x| x.is_zero()));
            }
            // Basis vectors are independent: stack them as rows and check rank.
            let bm = RationalMatrix::new(jac.n_cols, basis.clone());
            prop_assert_eq!(bm.row_rank(), basis.len());
        }

        /// Kept rows reproduce the full rank and rejected rows lie in their span.
        #[test]
        fn greedy_subset_is_maximal(
            rows in prop::collection::vec(
                prop::collection::vec(-3i64..=3, 5),
                1..9
            )
        ) {
            let jac = jac_from_dense(&rows);
            let (kept, rejected) = independent_row_subset(&jac);
            prop_assert_eq!(kept.len() + rejected.len(), rows.len());
            prop_assert_eq!(kept.len(), row_rank(&jac));
            let mut ech = Echelon::for_jacobian(&jac);
            for &i in &kept {
                prop_assert!(ech.add_row(&jac.rows[i].entries));
            }
            for &i in &rejected {
                prop_assert!(ech.spans(&jac.rows[i].entries));
            }
        }
    }
}
