//! Householder tridiagonalization followed by implicit QL iterations.
//!
//! Used for the larger activation second-moment matrices where cyclic Jacobi
//! becomes the bottleneck. Storage is the transpose of the classic
//! column-oriented formulation: `w[j * n + k]` holds `V[k][j]`, so every hot
//! loop walks contiguous memory and the final rows of `w` are eigenvectors.

use crate::error::{Error, Result};

/// Returns unsorted `(eigenvalues, eigenvector rows)` of the symmetric `n x n`
/// row-major matrix `a`.
pub(crate) fn tridiagonal_ql(a: &[f64], n: usize, max_iter_per_value: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 0 {
        return Ok((d, w));
    }
    tred2(&mut w, &mut d, &mut e, n);
    tql2(&mut w, &mut d, &mut e, n, max_iter_per_value)?;
    Ok((d, w))
}

#[inline]
fn at(n: usize, row: usize, col: usize) -> usize {
    // V[row][col] lives at w[col * n + row]
    col * n + row
}

fn tred2(w: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    for j in 0..n {
        d[j] = w[at(n, n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = w[at(n, i - 1, j)];
                w[at(n, i, j)] = 0.0;
                w[at(n, j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|v| *v = 0.0);
            for j in 0..i {
                f = d[j];
                w[at(n, j, i)] = f;
                g = e[j] + w[at(n, j, j)] * f;
                let col = &w[j * n..j * n + n];
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let col = &mut w[j * n..j * n + n];
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = col[i - 1];
                col[i] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        w[at(n, n - 1, i)] = w[at(n, i, i)];
        w[at(n, i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            let (left, right) = w.split_at_mut((i + 1) * n);
            let next = &right[..n];
            for k in 0..=i {
                d[k] = next[k] / h;
            }
            for j in 0..=i {
                let col = &mut left[j * n..j * n + n];
                let mut g = 0.0;
                for k in 0..=i {
                    g += next[k] * col[k];
                }
                for k in 0..=i {
                    col[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            w[at(n, k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = w[at(n, n - 1, j)];
        w[at(n, n - 1, j)] = 0.0;
    }
    w[at(n, n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn tql2(w: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize, max_iter: usize) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        // e[n-1] == 0 guarantees m < n
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(Error::NoConvergence {
                        sweeps: iter,
                        residual: e[l].abs(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    let (left, right) = w.split_at_mut((i + 1) * n);
                    let vi = &mut left[i * n..];
                    let vi1 = &mut right[..n];
                    for (a, b) in vi.iter_mut().zip(vi1.iter_mut()) {
                        let hv = *b;
                        *b = s * *a + c * hv;
                        *a = c * *a - s * hv;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
