//! Banded LU factorization with partial pivoting and a small sparse triplet store.
//!
//! KKT matrices of stage-wise problems become banded once unknowns are ordered
//! block by block, so a band solver replaces dense LU at a fraction of the cost.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is numerically singular (pivot {pivot:e} at step {step})")]
    Singular { step: usize, pivot: f64 },
    #[error("non-finite entry in matrix")]
    NonFinite,
}

/// Square matrix stored by rows within the band `i - kl ..= i + kl + ku`.
///
/// The extra `kl` super-diagonals leave room for fill-in from row interchanges.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let kl = kl.min(n.saturating_sub(1));
        let ku = ku.min(n.saturating_sub(1));
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + j + self.kl - i
    }

    /// Adds `v` at `(i, j)`. Panics when the entry lies outside the declared band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl >= i && j <= i + self.ku {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Factors in place after scaling every row to unit max-norm.
    ///
    /// Pivots below `n·ε` of the scaled matrix are reported as singular.
    pub fn factor(self) -> Result<BandLu, LinalgError> {
        let tiny = f64::EPSILON * (self.n.max(1) as f64);
        self.factor_with_threshold(tiny)
    }

    /// Like [`factor`](Self::factor) but only pivots with magnitude `<= tiny` are rejected.
    ///
    /// Interior-point Newton systems are ill-conditioned by design near the
    /// solution, so they factor with a zero threshold.
    pub fn factor_with_threshold(mut self, tiny: f64) -> Result<BandLu, LinalgError> {
        let n = self.n;
        let (kl, ku, w) = (self.kl, self.ku, self.width);
        let mut row_scale = vec![1.0; n];
        for (i, rs) in row_scale.iter_mut().enumerate() {
            let row = &mut self.data[i * w..(i + 1) * w];
            let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !m.is_finite() {
                return Err(LinalgError::NonFinite);
            }
            if m > 0.0 {
                *rs = 1.0 / m;
                row.iter_mut().for_each(|v| *v *= *rs);
            }
        }
        let mut piv = vec![0usize; n];
        let mut lmul = vec![0.0; n * kl];
        let a = &mut self.data;
        let at = |i: usize, j: usize| i * w + j + kl - i;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = a[at(k, k)].abs();
            for i in k + 1..=last {
                let v = a[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny {
                return Err(LinalgError::Singular { step: k, pivot: best });
            }
            piv[k] = p;
            let jmax = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    a.swap(at(k, j), at(p, j));
                }
            }
            let pivot = a[at(k, k)];
            let len = jmax - k;
            let (head, tail) = a.split_at_mut((k + 1) * w);
            let urow = &head[at(k, k + 1)..at(k, k + 1) + len];
            for i in k + 1..=last {
                let off = at(i, k) - (k + 1) * w;
                let m = tail[off] / pivot;
                lmul[k * kl + (i - k - 1)] = m;
                if m != 0.0 {
                    for (x, u) in tail[off + 1..off + 1 + len].iter_mut().zip(urow) {
                        *x -= m * u;
                    }
                }
            }
        }
        Ok(BandLu {
            band: self,
            piv,
            lmul,
            row_scale,
        })
    }
}

/// Factorization `P·D·A = L·U` of a [`BandMatrix`], reusable for many right-hand sides.
#[derive(Clone, Debug)]
pub struct BandLu {
    band: BandMatrix,
    piv: Vec<usize>,
    lmul: Vec<f64>,
    row_scale: Vec<f64>,
}

impl BandLu {
    pub fn n(&self) -> usize {
        self.band.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.band.n;
        let (kl, ku, w) = (self.band.kl, self.band.ku, self.band.width);
        assert_eq!(b.len(), n, "rhs length");
        for (v, s) in b.iter_mut().zip(&self.row_scale) {
            *v *= s;
        }
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                let last = (k + kl).min(n - 1);
                for i in k + 1..=last {
                    b[i] -= self.lmul[k * kl + (i - k - 1)] * bk;
                }
            }
        }
        let a = &self.band.data;
        for i in (0..n).rev() {
            let row = &a[i * w..(i + 1) * w];
            let jmax = (i + kl + ku).min(n - 1);
            let acc: f64 = row[kl + 1..kl + 1 + jmax - i]
                .iter()
                .zip(&b[i + 1..=jmax])
                .map(|(r, x)| r * x)
                .sum();
            b[i] = (b[i] - acc) / row[kl];
        }
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        for mut col in out.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        out
    }
}

/// Coordinate-format sparse matrix; duplicate entries are summed on use.
#[derive(Clone, Debug, Default)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// `y = A·x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    /// `y = Aᵀ·x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for &(i, j, v) in &self.entries {
            y[j] += v * x[i];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }
}

/// Half-bandwidth needed when every group of positions forms a dense clique.
pub fn clique_bandwidth<'a>(groups: impl IntoIterator<Item = &'a [usize]>) -> usize {
    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let lo = g.iter().min().unwrap();
            let hi = g.iter().max().unwrap();
            hi - lo
        })
        .max()
        .unwrap_or(0)
}
