//! Small dense linear-algebra helpers shared by the solver modules.

use nalgebra::{DMatrix, DVector};

use crate::C64;

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Returns (A + Aᵀ)/2.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * vals[j]);
    &scaled * q.transpose()
}

/// Largest singular value by power iteration on AᵀA. Accurate to a few
/// digits, which is all the boundedness warnings need.
pub(crate) fn spectral_norm_estimate(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut v = DVector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..50 {
        let w = a.transpose() * (a * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = w / norm;
        if (next - sigma).abs() <= 1e-10 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Connected components of the graph on `0..n` whose edges are the pairs
/// reported by `neighbors`. Components are returned with sorted members and
/// ordered by their smallest member.
pub(crate) fn connected_components<I>(n: usize, edges: I) -> Vec<Vec<usize>>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, j) in edges {
        let ri = find(&mut parent, i);
        let rj = find(&mut parent, j);
        if ri != rj {
            let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
            parent[hi] = lo;
        }
    }
    let mut index_of_root = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if index_of_root[r] == usize::MAX {
            index_of_root[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[index_of_root[r]].push(i);
    }
    comps
}

/// Solves `m x = rhs` by partial-pivot LU; `None` when the factorization is
/// singular or produces non-finite entries.
pub(crate) fn solve_complex(m: DMatrix<C64>, rhs: &DMatrix<C64>) -> Option<DMatrix<C64>> {
    if m.nrows() == 1 {
        let d = m[(0, 0)];
        if d == C64::new(0.0, 0.0) {
            return None;
        }
        let out = rhs.map(|x| x / d);
        return out.iter().all(|x| x.re.is_finite() && x.im.is_finite()).then_some(out);
    }
    let out = m.lu().solve(rhs)?;
    out.iter()
        .all(|x| x.re.is_finite() && x.im.is_finite())
        .then_some(out)
}

/// Singular values in ascending order together with the right singular
/// vectors (columns, same order).
pub(crate) fn svd_ascending(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.ncols();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let vectors = DMatrix::from_fn(n, order.len(), |row, col| v_t[(order[col], row)]);
    (values, vectors)
}
