//! Profile (skyline) LDL^T factorization for symmetric quasi-definite
//! matrices, with RCM pre-ordering and dynamic regularization.
//!
//! Quasi-definite matrices factor as LDL^T under any symmetric permutation
//! with D carrying one sign per block, so no pivoting is needed. All fill-in
//! of the factor stays inside the row envelope, which the RCM ordering keeps
//! narrow for the chain-structured KKT systems built here.

use super::QpError;
use crate::qp::ordering::reverse_cuthill_mckee;

const REG_EPS: f64 = 1e-12;
const REG_DELTA: f64 = 1e-9;

/// Symbolic plan plus numeric factors of one KKT matrix.
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// First column of the envelope of each permuted row.
    first: Vec<usize>,
    /// Packed strictly-lower rows: row i occupies offsets[i]..offsets[i+1]
    /// covering columns first[i]..i.
    offsets: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    /// Expected sign of D per permuted index (+1 primal, -1 dual block).
    signs: Vec<i8>,
    /// Scratch for assembling permuted values before factorization.
    work: Vec<f64>,
    /// Number of dynamically regularized pivots in the last factorization.
    pub regularized: usize,
}

impl LdlFactor {
    /// Builds the symbolic structure from the upper-triangle pattern
    /// (row <= col pairs) and per-index signs, then factorizes `values`
    /// (parallel to `pattern`; duplicates are summed).
    pub fn new(
        n: usize,
        pattern: &[(usize, usize)],
        values: &[f64],
        signs_natural: &[i8],
    ) -> Result<Self, QpError> {
        assert_eq!(pattern.len(), values.len());
        assert_eq!(signs_natural.len(), n);

        let mut adjacency = vec![Vec::new(); n];
        for &(r, c) in pattern {
            debug_assert!(r <= c, "upper triangle expected");
            if r != c {
                adjacency[r].push(c);
                adjacency[c].push(r);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let perm = reverse_cuthill_mckee(&adjacency);
        let mut inv_perm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for &(r, c) in pattern {
            let (pr, pc) = (inv_perm[r], inv_perm[c]);
            let (hi, lo) = if pr >= pc { (pr, pc) } else { (pc, pr) };
            if lo < first[hi] {
                first[hi] = lo;
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + (i - first[i]);
        }
        let signs = perm.iter().map(|&old| signs_natural[old]).collect();

        let mut factor = Self {
            n,
            perm,
            inv_perm,
            first,
            vals: vec![0.0; offsets[n]],
            offsets,
            diag: vec![0.0; n],
            signs,
            work: Vec::new(),
            regularized: 0,
        };
        factor.refactor(pattern, values)?;
        Ok(factor)
    }

    /// Re-assembles and re-factorizes with new values on the same pattern.
    pub fn refactor(&mut self, pattern: &[(usize, usize)], values: &[f64]) -> Result<(), QpError> {
        for v in self.vals.iter_mut() {
            *v = 0.0;
        }
        for v in self.diag.iter_mut() {
            *v = 0.0;
        }
        for (&(r, c), &v) in pattern.iter().zip(values) {
            let (pr, pc) = (self.inv_perm[r], self.inv_perm[c]);
            if pr == pc {
                self.diag[pr] += v;
            } else {
                let (hi, lo) = if pr > pc { (pr, pc) } else { (pc, pr) };
                self.vals[self.offsets[hi] + (lo - self.first[hi])] += v;
            }
        }
        self.factorize()
    }

    fn factorize(&mut self) -> Result<(), QpError> {
        self.regularized = 0;
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let (done, row_i) = self.vals.split_at_mut(self.offsets[i]);
            let row_i = &mut row_i[..i - fi];
            for j in fi..i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let row_j = &done[self.offsets[j]..self.offsets[j + 1]];
                let mut sum = 0.0;
                for k in start..j {
                    sum += row_i[k - fi] * row_j[k - fj] * self.diag[k];
                }
                let lij = (row_i[j - fi] - sum) / self.diag[j];
                row_i[j - fi] = lij;
            }
            let mut dsum = 0.0;
            for k in fi..i {
                let l = row_i[k - fi];
                dsum += l * l * self.diag[k];
            }
            let mut d = self.diag[i] - dsum;
            if !d.is_finite() {
                return Err(QpError::FactorizationFailed { pivot: self.perm[i] });
            }
            let sign = f64::from(self.signs[i]);
            if d * sign < REG_EPS {
                d = sign * REG_DELTA;
                self.regularized += 1;
            }
            self.diag[i] = d;
        }
        Ok(())
    }

    /// Solves K x = b in place.
    pub fn solve_in_place(&mut self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        self.work.resize(n, 0.0);
        for i in 0..n {
            self.work[i] = b[self.perm[i]];
        }
        // Forward: L y = b (unit diagonal).
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.vals[self.offsets[i]..self.offsets[i + 1]];
            let mut acc = self.work[i];
            for k in fi..i {
                acc -= row[k - fi] * self.work[k];
            }
            self.work[i] = acc;
        }
        // Diagonal.
        for i in 0..n {
            self.work[i] /= self.diag[i];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.vals[self.offsets[i]..self.offsets[i + 1]];
            let xi = self.work[i];
            for k in fi..i {
                self.work[k] -= row[k - fi] * xi;
            }
        }
        for i in 0..n {
            b[self.perm[i]] = self.work[i];
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}
