//! Simplicial sparse Cholesky factorization for the symmetric positive
//! definite normal equations of a subgraph solve.
//!
//! Matrices use compressed sparse column storage of the lower triangle. The
//! factorization is up-looking with an elimination tree, natural ordering:
//! pose chains with a few loop closures produce a profile close to banded,
//! so no fill-reducing permutation is applied.

/// Symmetric matrix in CSC form; only the lower triangle (row >= col) is
/// stored.
#[derive(Clone, Debug)]
pub struct CscMatrix {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

/// Accumulates `(row, col, value)` triplets; duplicates sum.
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: Vec::new(),
        }
    }

    /// Adds to the lower triangle; upper-triangle coordinates are mirrored.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        if value == 0.0 {
            return;
        }
        let (r, c) = if row >= col { (row, col) } else { (col, row) };
        self.entries.push((r, c, value));
    }

    pub fn build(mut self) -> CscMatrix {
        self.entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("non-empty") += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..self.n {
            col_ptr[c + 1] += col_ptr[c];
        }
        CscMatrix {
            n: self.n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

impl CscMatrix {
    /// `y = S v` treating the stored lower triangle as a full symmetric
    /// matrix.
    pub fn mul_vec_sym(&self, v: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                let val = self.values[k];
                y[r] += val * v[c];
                if r != c {
                    y[c] += val * v[r];
                }
            }
        }
        y
    }

    /// Row-major view of the stored lower triangle: for each row, the
    /// `(col, value)` entries with `col <= row`, ascending.
    fn lower_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                rows[self.row_idx[k]].push((c, self.values[k]));
            }
        }
        rows
    }

    /// Sparse Cholesky `A = L L^T`. Returns `None` when the matrix is not
    /// positive definite.
    pub fn cholesky(&self) -> Option<CholeskyFactor> {
        let n = self.n;
        let rows = self.lower_rows();

        // Elimination tree: parent[j] = min { i > j : L[i][j] != 0 },
        // built with path compression through `ancestor`.
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut ancestor: Vec<Option<usize>> = vec![None; n];
        for k in 0..n {
            for &(j, _) in &rows[k] {
                let mut i = j;
                while i < k {
                    let next = ancestor[i];
                    ancestor[i] = Some(k);
                    match next {
                        None => {
                            parent[i] = Some(k);
                            break;
                        }
                        Some(nx) => i = nx,
                    }
                }
            }
        }

        // Up-looking numeric factorization, one row of L at a time. Columns
        // of L accumulate in `cols`; the diagonal is kept separately.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut diag = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut x = vec![0.0f64; n];

        for k in 0..n {
            // Row pattern: ancestors in the elimination tree of every
            // structural entry of row k, strictly below k.
            pattern.clear();
            let mut a_kk = 0.0;
            for &(j, v) in &rows[k] {
                if j == k {
                    a_kk = v;
                    continue;
                }
                x[j] = v;
                let mut t = j;
                while t < k && mark[t] != k {
                    pattern.push(t);
                    mark[t] = k;
                    match parent[t] {
                        Some(p) => t = p,
                        None => break,
                    }
                }
            }
            pattern.sort_unstable();

            // Forward-solve L[0..k, 0..k] y = A[k, 0..k] over the pattern.
            let mut sum_sq = 0.0;
            for &j in &pattern {
                let xj = x[j];
                x[j] = 0.0;
                let l_kj = xj / diag[j];
                sum_sq += l_kj * l_kj;
                // Every stored row index in column j is < k and lies in the
                // pattern (rows of column j are etree ancestors of j).
                for &(r, lv) in &cols[j] {
                    x[r] -= lv * l_kj;
                }
                cols[j].push((k, l_kj));
            }
            let d = a_kk - sum_sq;
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            diag[k] = d.sqrt();
        }

        // Assemble L in CSC with the diagonal entry first in each column.
        let nnz: usize = cols.iter().map(|c| c.len() + 1).sum();
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (j, col) in cols.iter().enumerate() {
            row_idx.push(j);
            values.push(diag[j]);
            for &(r, v) in col {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr[j + 1] = row_idx.len();
        }
        Some(CholeskyFactor {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }
}

/// Lower-triangular Cholesky factor, CSC by column, diagonal entry first.
pub struct CholeskyFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    /// Solves `A x = b` given the factor.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        // Forward: L y = b.
        for j in 0..self.n {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            x[j] /= self.values[start];
            let xj = x[j];
            for k in start + 1..end {
                x[self.row_idx[k]] -= self.values[k] * xj;
            }
        }
        // Backward: L^T x = y.
        for j in (0..self.n).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let mut acc = x[j];
            for k in start + 1..end {
                acc -= self.values[k] * x[self.row_idx[k]];
            }
            x[j] = acc / self.values[start];
        }
        x
    }
}
