//! Independent reference implementations shared by the integration tests.
//! Plain `Vec<Vec<f64>>` arithmetic only; nothing here touches nalgebra's
//! decompositions.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = zeros(n, m);
    for i in 0..n {
        for p in 0..k {
            let v = a[i][p];
            for j in 0..m {
                out[i][j] += v * b[p][j];
            }
        }
    }
    out
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Mat = (0..n).map(|i| a[i].iter().chain(b[i].iter()).copied().collect()).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p != 0.0, "singular system");
        for row in col + 1..n {
            let f = aug[row][col] / p;
            if f != 0.0 {
                for k in col..n + m {
                    aug[row][k] -= f * aug[col][k];
                }
            }
        }
    }
    let mut x = zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for k in i + 1..n {
                s -= aug[i][k] * x[k][j];
            }
            x[i][j] = s / aug[i][i];
        }
    }
    x
}

/// Ridge weights from the normal equations `(ZᵀZ + εI) W = ZᵀP`, penalizing
/// every row (or all but the last with `free_bias`).
pub fn ridge_oracle(z: &Mat, p: &Mat, eps: f64, free_bias: bool) -> Mat {
    let zt = transpose(z);
    let mut a = matmul(&zt, z);
    let k = a.len();
    for (i, row) in a.iter_mut().enumerate() {
        if !(free_bias && i == k - 1) {
            row[i] += eps;
        }
    }
    gauss_solve(&a, &matmul(&zt, p))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub fn jacobi_eigen(sym: &Mat) -> (Vec<f64>, Mat) {
    let n = sym.len();
    let mut a = sym.clone();
    let mut v = zeros(n, n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&i| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Covariance `RᵀR / (N − 1)` of the rows of `r`, mean-removed if asked.
pub fn covariance(r: &Mat, center: bool) -> Mat {
    let n = r.len();
    let d = r[0].len();
    let mut rows = r.clone();
    if center {
        for j in 0..d {
            let mu = rows.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            for x in rows.iter_mut() {
                x[j] -= mu;
            }
        }
    }
    let mut c = matmul(&transpose(&rows), &rows);
    for row in c.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    c
}

/// One constant-velocity predict/update cycle written out with explicit loops.
/// Returns the posterior mean and covariance.
pub fn kalman_step_by_hand(
    mean: [f64; 4],
    cov: [[f64; 4]; 4],
    z: [f64; 2],
    q: f64,
    r: f64,
) -> ([f64; 4], [[f64; 4]; 4]) {
    let f = [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let mut m = [0.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i] += f[i][j] * mean[j];
        }
    }
    let mut fp = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                fp[i][j] += f[i][k] * cov[k][j];
            }
        }
    }
    let mut p = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                p[i][j] += fp[i][k] * f[j][k];
            }
        }
        p[i][i] += q;
    }
    // H selects the first two coordinates.
    let s = [[p[0][0] + r, p[0][1]], [p[1][0], p[1][1] + r]];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let si = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let mut gain = [[0.0; 2]; 4];
    for i in 0..4 {
        for j in 0..2 {
            gain[i][j] = p[i][0] * si[0][j] + p[i][1] * si[1][j];
        }
    }
    let innov = [z[0] - m[0], z[1] - m[1]];
    let mut post = m;
    for i in 0..4 {
        post[i] += gain[i][0] * innov[0] + gain[i][1] * innov[1];
    }
    let mut pc = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            pc[i][j] = p[i][j] - (gain[i][0] * p[0][j] + gain[i][1] * p[1][j]);
        }
    }
    let mut sym = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            sym[i][j] = 0.5 * (pc[i][j] + pc[j][i]);
        }
    }
    (post, sym)
}
