//! Alignment kernels: classical DTW with backtracking, differentiable
//! soft-DTW (forward value and gradient with respect to the cost matrix),
//! Bresenham diagonal paths, and an exhaustive path enumerator used as a
//! test oracle.
//!
//! All kernels are pure and generic over the working scalar type; the
//! pipeline instantiates them at `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::scalar::{real, Scalar};

/// Pairwise cost grid between a melody embedding sequence (rows) and a
/// lyrics embedding sequence (columns). Entries are `1 - cosine` and lie in
/// `[0, 2]` when both sides are unit-norm.
pub type CostMatrix<T> = Matrix<T>;

/// Gradient of the soft-DTW value with respect to the cost matrix. Entries
/// lie in `[0, 1]` and converge to the optimal-path indicator as the
/// smoothing temperature goes to zero.
pub type SoftAlignment<T> = Matrix<T>;

/// Monotone alignment path over an `n×m` grid, stored as 1-based `(i, j)`
/// pairs from `(1, 1)` to `(n, m)`; each step advances `i`, `j`, or both by
/// exactly one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
}

impl AlignmentPath {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Structural validity over an `n×m` grid: endpoints and unit steps.
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        if self.pairs.first() != Some(&(1, 1)) || self.pairs.last() != Some(&(n, m)) {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let di = w[1].0 as isize - w[0].0 as isize;
            let dj = w[1].1 as isize - w[0].1 as isize;
            (di == 0 || di == 1) && (dj == 0 || dj == 1) && (di + dj > 0)
        })
    }

    /// Sum of cost entries along the path.
    pub fn cost_along<T: Scalar>(&self, cost: &CostMatrix<T>) -> T {
        self.pairs
            .iter()
            .map(|&(i, j)| cost.at(i - 1, j - 1))
            .sum()
    }
}

/// Soft minimum: exact `min` at `gamma = 0`, otherwise the smoothed
/// `-γ·log Σ exp(-aᵢ/γ)` computed with a max-shift for stability.
pub fn softmin<T: Scalar>(values: &[T], gamma: T) -> Result<T> {
    if values.is_empty() {
        return Err(CoreError::Numeric("softmin of empty set".into()));
    }
    if gamma < T::zero() {
        return Err(CoreError::Numeric("softmin gamma must be >= 0".into()));
    }
    let mn = values.iter().copied().fold(T::infinity(), T::min);
    if gamma == T::zero() || mn == T::infinity() {
        return Ok(mn);
    }
    let sum: T = values
        .iter()
        .map(|&v| ((mn - v) / gamma).exp())
        .sum();
    Ok(mn - gamma * sum.ln())
}

/// Classical DTW: minimal accumulated cost plus the optimal path recovered
/// by backtracking. Ties prefer the diagonal, then vertical `(i-1, j)`, then
/// horizontal `(i, j-1)` predecessor.
pub fn dtw<T: Scalar>(cost: &CostMatrix<T>) -> (T, AlignmentPath) {
    let (n, m) = (cost.rows(), cost.cols());
    assert!(n >= 1 && m >= 1, "dtw requires a nonempty cost matrix");
    let mut acc = Matrix::<T>::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let c = cost.at(i, j);
            let best = match (i, j) {
                (0, 0) => T::zero(),
                (0, _) => acc.at(0, j - 1),
                (_, 0) => acc.at(i - 1, 0),
                _ => acc
                    .at(i - 1, j - 1)
                    .min(acc.at(i - 1, j))
                    .min(acc.at(i, j - 1)),
            };
            *acc.at_mut(i, j) = c + best;
        }
    }

    let mut pairs = vec![(n, m)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let (pi, pj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc.at(i - 1, j - 1);
            let vert = acc.at(i - 1, j);
            let horiz = acc.at(i, j - 1);
            if diag <= vert && diag <= horiz {
                (i - 1, j - 1)
            } else if vert <= horiz {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        pairs.push((pi + 1, pj + 1));
        i = pi;
        j = pj;
    }
    pairs.reverse();
    (acc.at(n - 1, m - 1), AlignmentPath::new(pairs))
}

/// All monotone alignment paths over an `n×m` grid. Guarded to small grids;
/// this is a test oracle, not a production kernel.
pub fn enumerate_paths(n: usize, m: usize) -> Result<Vec<AlignmentPath>> {
    if n == 0 || m == 0 {
        return Err(CoreError::Shape("enumerate_paths needs n, m >= 1".into()));
    }
    if n * m > 36 {
        return Err(CoreError::Shape(format!(
            "enumerate_paths guard: n*m = {} exceeds 36",
            n * m
        )));
    }
    let mut out = Vec::new();
    let mut current = vec![(1usize, 1usize)];
    fn recurse(
        n: usize,
        m: usize,
        current: &mut Vec<(usize, usize)>,
        out: &mut Vec<AlignmentPath>,
    ) {
        let &(i, j) = current.last().unwrap();
        if i == n && j == m {
            out.push(AlignmentPath::new(current.clone()));
            return;
        }
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni <= n && nj <= m {
                current.push((ni, nj));
                recurse(n, m, current, out);
                current.pop();
            }
        }
    }
    recurse(n, m, &mut current, &mut out);
    Ok(out)
}

/// Forward DP table of a soft-DTW evaluation, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SdtwTable<T> {
    /// `(n+1)×(m+1)` accumulated table with the virtual origin at `(0,0)`.
    acc: Matrix<T>,
    gamma: T,
}

impl<T: Scalar> SdtwTable<T> {
    pub fn value(&self) -> T {
        self.acc.at(self.acc.rows() - 1, self.acc.cols() - 1)
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }
}

/// Soft-DTW forward pass: `R(i,j) = c(i,j) + softmin(R(i-1,j-1), R(i-1,j),
/// R(i,j-1))` with the table retained for the gradient recursion.
pub fn sdtw_forward<T: Scalar>(cost: &CostMatrix<T>, gamma: T) -> Result<(T, SdtwTable<T>)> {
    if gamma <= T::zero() {
        return Err(CoreError::Numeric("sdtw gamma must be > 0".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Err(CoreError::Shape("sdtw on empty cost matrix".into()));
    }
    let mut acc = Matrix::<T>::zeros(n + 1, m + 1);
    for j in 1..=m {
        *acc.at_mut(0, j) = T::infinity();
    }
    for i in 1..=n {
        *acc.at_mut(i, 0) = T::infinity();
    }
    for i in 1..=n {
        for j in 1..=m {
            let prev = [acc.at(i - 1, j - 1), acc.at(i - 1, j), acc.at(i, j - 1)];
            let sm = softmin(&prev, gamma)?;
            *acc.at_mut(i, j) = cost.at(i - 1, j - 1) + sm;
        }
    }
    let value = acc.at(n, m);
    Ok((value, SdtwTable { acc, gamma }))
}

/// Soft-DTW backward pass: the gradient `E(i,j) = ∂Dᵞ/∂c(i,j)` computed by
/// the reverse recursion over the forward table.
pub fn sdtw_backward<T: Scalar>(table: &SdtwTable<T>, cost: &CostMatrix<T>) -> SoftAlignment<T> {
    let (n, m) = (cost.rows(), cost.cols());
    assert_eq!(table.acc.rows(), n + 1, "table/cost shape mismatch");
    assert_eq!(table.acc.cols(), m + 1, "table/cost shape mismatch");
    let gamma = table.gamma;

    // Padded copies with a virtual terminal cell at (n+1, m+1).
    let mut r = Matrix::<T>::zeros(n + 2, m + 2);
    let mut d = Matrix::<T>::zeros(n + 2, m + 2);
    for i in 0..=n {
        for j in 0..=m {
            *r.at_mut(i, j) = table.acc.at(i, j);
        }
    }
    for j in 1..=m {
        *r.at_mut(n + 1, j) = T::neg_infinity();
    }
    for i in 1..=n {
        *r.at_mut(i, m + 1) = T::neg_infinity();
    }
    for i in 1..=n {
        for j in 1..=m {
            *d.at_mut(i, j) = cost.at(i - 1, j - 1);
        }
    }
    *r.at_mut(n + 1, m + 1) = table.acc.at(n, m);

    let mut e = Matrix::<T>::zeros(n + 2, m + 2);
    *e.at_mut(n + 1, m + 1) = T::one();

    for j in (1..=m).rev() {
        for i in (1..=n).rev() {
            let rij = r.at(i, j);
            let a = ((r.at(i + 1, j) - rij - d.at(i + 1, j)) / gamma).exp();
            let b = ((r.at(i, j + 1) - rij - d.at(i, j + 1)) / gamma).exp();
            let c = ((r.at(i + 1, j + 1) - rij - d.at(i + 1, j + 1)) / gamma).exp();
            *e.at_mut(i, j) =
                a * e.at(i + 1, j) + b * e.at(i, j + 1) + c * e.at(i + 1, j + 1);
        }
    }

    Matrix::from_fn(n, m, |i, j| e.at(i + 1, j + 1))
}

/// Value and soft alignment of one soft-DTW evaluation.
#[derive(Debug, Clone)]
pub struct SdtwResult<T> {
    pub value: T,
    pub alignment: SoftAlignment<T>,
}

/// Evaluate soft-DTW over a batch of heterogeneously shaped cost matrices.
/// Items are independent, so they run in parallel; outputs are order-stable
/// and bit-identical to sequential single-item calls.
pub fn sdtw_batch<T: Scalar>(costs: &[CostMatrix<T>], gamma: T) -> Result<Vec<SdtwResult<T>>> {
    costs
        .par_iter()
        .map(|cost| {
            let (value, table) = sdtw_forward(cost, gamma)?;
            let alignment = sdtw_backward(&table, cost);
            Ok(SdtwResult { value, alignment })
        })
        .collect()
}

/// Monotone path from `(1,1)` to `(n,m)` following the Bresenham-rasterized
/// line; the exact diagonal when `n = m`.
pub fn bresenham_path(n: usize, m: usize) -> AlignmentPath {
    assert!(n >= 1 && m >= 1, "bresenham_path needs n, m >= 1");
    let mut pairs = Vec::with_capacity(n.max(m));
    if n >= m {
        let d_long = (n - 1) as u64;
        let d_short = (m - 1) as u64;
        for i in 0..n as u64 {
            let j = if d_long == 0 {
                0
            } else {
                (i * d_short * 2 + d_long) / (2 * d_long)
            };
            pairs.push((i as usize + 1, j as usize + 1));
        }
    } else {
        let d_long = (m - 1) as u64;
        let d_short = (n - 1) as u64;
        for j in 0..m as u64 {
            let i = if d_long == 0 {
                0
            } else {
                (j * d_short * 2 + d_long) / (2 * d_long)
            };
            pairs.push((i as usize + 1, j as usize + 1));
        }
    }
    AlignmentPath::new(pairs)
}

/// Pairwise cost between two embedding sequences: `1 - ⟨xᵢ, yⱼ⟩`. Rows are
/// expected unit-norm (the encoder guarantees this), keeping entries in
/// `[0, 2]`.
pub fn cost_matrix<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<CostMatrix<T>> {
    if x.cols() != y.cols() {
        return Err(CoreError::Shape(format!(
            "embedding width mismatch: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let one: T = real(1.0);
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        let dot: T = x.row(i).iter().zip(y.row(j)).map(|(&a, &b)| a * b).sum();
        one - dot
    }))
}
