//! Fréchet distance in double-double arithmetic. The trace of the
//! geometric-mean term is taken from the eigenvalues of `Lᵀ Σ_s L`, where
//! `Σ_r = L Lᵀ` is a Cholesky factorization, found with cyclic Jacobi
//! rotations. Requires `Σ_r` to be positive definite.

#![allow(clippy::needless_range_loop)]

use twofloat::TwoFloat;

type M = Vec<Vec<TwoFloat>>;

fn tf(v: f64) -> TwoFloat {
    TwoFloat::from_f64(v)
}

fn to_matrix(flat: &[f64], d: usize) -> M {
    (0..d).map(|i| (0..d).map(|j| tf(flat[i * d + j])).collect()).collect()
}

fn cholesky(a: &M) -> M {
    let d = a.len();
    let mut l = vec![vec![tf(0.0); d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// Eigenvalues of a symmetric matrix.
pub fn jacobi_eigenvalues(mut a: M) -> Vec<TwoFloat> {
    let d = a.len();
    for _sweep in 0..100 {
        let mut off = tf(0.0);
        for p in 0..d {
            for q in p + 1..d {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-60 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-40 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (tf(2.0) * a[p][q]);
                let sign = if theta < 0.0 { tf(-1.0) } else { tf(1.0) };
                let t = sign / (theta.abs() + (theta * theta + tf(1.0)).sqrt());
                let c = tf(1.0) / (t * t + tf(1.0)).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i][i]).collect()
}

pub fn fid(mu_r: &[f64], sigma_r: &[f64], mu_s: &[f64], sigma_s: &[f64]) -> f64 {
    let d = mu_r.len();
    let sr = to_matrix(sigma_r, d);
    let ss = to_matrix(sigma_s, d);
    let l = cholesky(&sr);
    let mut m = vec![vec![tf(0.0); d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = tf(0.0);
            for a in 0..d {
                for b in 0..d {
                    acc += l[a][i] * ss[a][b] * l[b][j];
                }
            }
            m[i][j] = acc;
        }
    }
    let tr_sqrt = jacobi_eigenvalues(m)
        .into_iter()
        .fold(tf(0.0), |acc, v| acc + if v > 0.0 { v.sqrt() } else { tf(0.0) });
    let mut total = tf(0.0);
    for i in 0..d {
        let diff = tf(mu_r[i]) - tf(mu_s[i]);
        total += diff * diff + sr[i][i] + ss[i][i];
    }
    (total - tf(2.0) * tr_sqrt).hi()
}
