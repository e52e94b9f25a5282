//! Dense matrix utilities that nalgebra does not provide directly: the
//! eigendecomposition of a general (non-symmetric) real matrix, matrix
//! functions built on it, a Padé matrix exponential, and the Van Loan
//! discretization of a linear stochastic system.
//!
//! The eigensolver is a port of the classic EISPACK `orthes`/`hqr2` pair
//! (Householder reduction to Hessenberg form followed by shifted double
//! QR iteration with eigenvector accumulation). Complex conjugate pairs
//! are kept in packed real form: a pair a ± bi occupies two consecutive
//! columns of the vector matrix, and functions of the matrix act on the
//! corresponding 2x2 rotation-scaling block.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("eigenvalue QR iteration did not converge within {0} steps")]
    EigenNonConvergence(usize),
    #[error("matrix of eigenvectors is numerically singular")]
    SingularVectors,
}

/// Eigendecomposition of a general real square matrix, packed real form.
///
/// Real eigenvalue k: `im[k] == 0` and column k of `vectors` is its
/// eigenvector. Conjugate pair at (k, k+1): `im[k] > 0`, `im[k+1] = -im[k]`,
/// and columns k, k+1 hold the real and imaginary parts of the eigenvector
/// for `re[k] + i*im[k]`. In block form `a * vectors = vectors * d` where
/// `d` is block diagonal with 1x1 blocks `re[k]` and 2x2 blocks
/// `[[re, im], [-im, re]]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigen {
    /// 1-norm condition estimate of the eigenvector matrix; `None` if singular.
    pub fn vector_condition(&self) -> Option<f64> {
        let inv = self.vectors.clone().lu().try_inverse()?;
        Some(one_norm(&self.vectors) * one_norm(&inv))
    }

    /// Evaluates `f` on the spectrum and maps the result back through the
    /// eigenvectors. `f(re, im) -> (re, im)` must satisfy f(conj z) = conj f(z).
    ///
    /// Returns the real and imaginary parts of `V f(D) V^-1`. For a real
    /// input matrix the imaginary part is nonzero only when `f` produces an
    /// imaginary component on an unpaired real eigenvalue (e.g. the
    /// principal log of a negative real eigenvalue).
    pub fn function(
        &self,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), LinalgError> {
        let n = self.re.len();
        let mut fd_re = DMatrix::zeros(n, n);
        let mut fd_im = DMatrix::zeros(n, n);
        let mut k = 0;
        while k < n {
            if self.im[k] == 0.0 {
                let (fr, fi) = f(self.re[k], 0.0);
                fd_re[(k, k)] = fr;
                fd_im[(k, k)] = fi;
                k += 1;
            } else {
                // Block [[a, b], [-b, a]] behaves as the complex scalar a + bi.
                let (fr, fi) = f(self.re[k], self.im[k]);
                fd_re[(k, k)] = fr;
                fd_re[(k + 1, k + 1)] = fr;
                fd_re[(k, k + 1)] = fi;
                fd_re[(k + 1, k)] = -fi;
                k += 2;
            }
        }
        // X = V F V^-1 via V^T X^T = (V F)^T.
        let lu = self.vectors.transpose().lu();
        let re = lu
            .solve(&(&self.vectors * fd_re).transpose())
            .ok_or(LinalgError::SingularVectors)?
            .transpose();
        let im = lu
            .solve(&(&self.vectors * fd_im).transpose())
            .ok_or(LinalgError::SingularVectors)?
            .transpose();
        Ok((re, im))
    }
}

/// Eigendecomposition of a general real square matrix.
pub fn eigen(a: &DMatrix<f64>) -> Result<Eigen, LinalgError> {
    assert_eq!(a.nrows(), a.ncols(), "eigen requires a square matrix");
    let n = a.nrows();
    let mut h = a.clone();
    let mut v = DMatrix::identity(n, n);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n > 0 {
        orthes(&mut h, &mut v);
        hqr2(&mut h, &mut v, &mut d, &mut e)?;
    }
    Ok(Eigen {
        re: d,
        im: e,
        vectors: v,
    })
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Infinity norm (max row sum of absolute values).
fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé(6,6)
/// approximant. Independent of the eigendecomposition path.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols());
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = inf_norm(a);
    let s = if norm > 0.5 {
        (norm.log2().ceil() as i32 + 1).max(0) as u32
    } else {
        0
    };
    let a = a / 2f64.powi(s as i32);

    // Padé(6,6) coefficients c_{k+1} = c_k (q-k)/((2q-k)(k+1)).
    let q = 6usize;
    let mut c = vec![1.0; q + 1];
    for k in 0..q {
        c[k + 1] = c[k] * (q - k) as f64 / (((2 * q - k) * (k + 1)) as f64);
    }

    let mut num = DMatrix::<f64>::identity(n, n) * c[0];
    let mut den = num.clone();
    let mut pow = DMatrix::<f64>::identity(n, n);
    for (k, &ck) in c.iter().enumerate().skip(1) {
        pow = &pow * &a;
        num += &pow * ck;
        if k % 2 == 0 {
            den += &pow * ck;
        } else {
            den -= &pow * ck;
        }
    }
    let mut f = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is singular; matrix norm out of range");
    for _ in 0..s {
        f = &f * &f;
    }
    f
}

/// Exact discretization of `dx = A x dt + noise`, where `noise_cov` is the
/// continuous-time covariance intensity (H Hᵀ for diffusion matrix H).
///
/// Returns `(phi, qd)` with `phi = exp(A dt)` and `qd` the covariance of
/// the discrete increment, computed with Van Loan's block-exponential.
pub fn discretize_lti(
    a: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(noise_cov.nrows(), n);
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a * dt));
    block
        .view_mut((0, n), (n, n))
        .copy_from(&(noise_cov * dt));
    block
        .view_mut((n, n), (n, n))
        .copy_from(&(a.transpose() * dt));
    let f = expm(&block);
    let f12 = f.view((0, n), (n, n)).into_owned();
    let f22 = f.view((n, n), (n, n)).into_owned();
    let phi = f22.transpose();
    let qd = &phi * f12;
    // Symmetrize away roundoff.
    let qd = (&qd + qd.transpose()) * 0.5;
    (phi, qd)
}

/// Residual of the stationary Lyapunov equation `A C + C Aᵀ + Q = 0`,
/// relative to `‖Q‖_F`.
pub fn lyapunov_residual(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let r = a * c + c * a.transpose() + q;
    r.norm() / q.norm()
}

/// Householder reduction of `h` to upper Hessenberg form, accumulating the
/// orthogonal transformation into `v`.
fn orthes(h: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    let low = 0;
    let high = n - 1;
    let mut ort = vec![0.0; n];

    for m in (low + 1)..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[(i, m - 1)].abs();
        }
        if scale == 0.0 {
            continue;
        }
        let mut hsum = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hsum += ort[i] * ort[i];
        }
        let mut g = hsum.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hsum -= ort[m] * g;
        ort[m] -= g;

        // Similarity transformation H <- (I - u uᵀ/h) H (I - u uᵀ/h).
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hsum;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hsum;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }

    // Accumulate the transformations.
    for m in ((low + 1)..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in (m + 1)..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[(i, j)];
            }
            // Double division avoids possible underflow.
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

/// Shifted double QR iteration on a Hessenberg matrix with eigenvector
/// accumulation and back-substitution, after EISPACK `hqr2`.
#[allow(clippy::too_many_lines)]
fn hqr2(
    h: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    d: &mut [f64],
    e: &mut [f64],
) -> Result<(), LinalgError> {
    let nn = h.nrows();
    let low = 0isize;
    let high = nn as isize - 1;
    let eps = 2f64.powi(-52);
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut t, mut w, mut x, mut y);
    let _ = (s, z);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let max_total_iter = 60 * nn.max(1);
    let mut total_iter = 0usize;

    let mut n = nn as isize - 1;
    let mut iter = 0;
    while n >= low {
        // Look for a single small subdiagonal element.
        let mut l = n;
        while l > low {
            s = h[((l - 1) as usize, (l - 1) as usize)].abs() + h[(l as usize, l as usize)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l as usize, (l - 1) as usize)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One real root found.
            let nu = n as usize;
            h[(nu, nu)] += exshift;
            d[nu] = h[(nu, nu)];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found, real pair or complex pair.
            let nu = n as usize;
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];

            if q >= 0.0 {
                // Real pair.
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in (nu - 1)..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in low as usize..=high as usize {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
            } else {
                // Complex pair.
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet; form a shift.
            let nu = n as usize;
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }

            if iter == 10 {
                // Wilkinson's exceptional shift.
                exshift += x;
                for i in low as usize..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low as usize..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = 0.964;
                    w = 0.964;
                }
            }

            iter += 1;
            total_iter += 1;
            if total_iter > max_total_iter {
                return Err(LinalgError::EigenNonConvergence(total_iter));
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                let mu = m as usize;
                z = h[(mu, mu)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(mu + 1, mu)] + h[(mu, mu + 1)];
                q = h[(mu + 1, mu + 1)] - z - r - s;
                r = h[(mu + 2, mu + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(mu, mu - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (h[(mu - 1, mu - 1)].abs() + z.abs() + h[(mu + 1, mu + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                let iu = i as usize;
                h[(iu, iu - 2)] = 0.0;
                if i > m + 2 {
                    h[(iu, iu - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..n, columns m..n.
            for k in m..n {
                let ku = k as usize;
                let notlast = k != n - 1;
                if k != m {
                    p = h[(ku, ku - 1)];
                    q = h[(ku + 1, ku - 1)];
                    r = if notlast { h[(ku + 2, ku - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(ku, ku - 1)] = -s * x;
                    } else if l != m {
                        h[(ku, ku - 1)] = -h[(ku, ku - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in ku..nn {
                        p = h[(ku, j)] + q * h[(ku + 1, j)];
                        if notlast {
                            p += r * h[(ku + 2, j)];
                            h[(ku + 2, j)] -= p * z;
                        }
                        h[(ku, j)] -= p * x;
                        h[(ku + 1, j)] -= p * y;
                    }
                    let imax = n.min(k + 3) as usize;
                    for i in 0..=imax {
                        p = x * h[(i, ku)] + y * h[(i, ku + 1)];
                        if notlast {
                            p += z * h[(i, ku + 2)];
                            h[(i, ku + 2)] -= p * r;
                        }
                        h[(i, ku)] -= p;
                        h[(i, ku + 1)] -= p * q;
                    }
                    for i in low as usize..=high as usize {
                        p = x * v[(i, ku)] + y * v[(i, ku + 1)];
                        if notlast {
                            p += z * v[(i, ku + 2)];
                            v[(i, ku + 2)] -= p * r;
                        }
                        v[(i, ku)] -= p;
                        v[(i, ku + 1)] -= p * q;
                    }
                }
            }
        }
    }

    // Back-substitute to find vectors of the upper triangular form.
    if norm == 0.0 {
        return Ok(());
    }
    for n in (0..nn as isize).rev() {
        let nu = n as usize;
        p = d[nu];
        q = e[nu];

        if q == 0.0 {
            // Real vector.
            let mut l = n;
            h[(nu, nu)] = 1.0;
            for i in (0..n).rev() {
                let iu = i as usize;
                w = h[(iu, iu)] - p;
                r = 0.0;
                for j in l..=n {
                    r += h[(iu, j as usize)] * h[(j as usize, nu)];
                }
                if e[iu] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[iu] == 0.0 {
                        h[(iu, nu)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        // Solve the real 2x2 system for the conjugate pair rows.
                        x = h[(iu, iu + 1)];
                        y = h[(iu + 1, iu)];
                        q = (d[iu] - p) * (d[iu] - p) + e[iu] * e[iu];
                        t = (x * s - z * r) / q;
                        h[(iu, nu)] = t;
                        h[(iu + 1, nu)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    // Overflow control.
                    t = h[(iu, nu)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in iu..=nu {
                            h[(j, nu)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            // Complex vector; real part in column n-1, imaginary in column n.
            let mut l = n - 1;
            if h[(nu, nu - 1)].abs() > h[(nu - 1, nu)].abs() {
                h[(nu - 1, nu - 1)] = q / h[(nu, nu - 1)];
                h[(nu - 1, nu)] = -(h[(nu, nu)] - p) / h[(nu, nu - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[(nu - 1, nu)], h[(nu - 1, nu - 1)] - p, q);
                h[(nu - 1, nu - 1)] = cr;
                h[(nu - 1, nu)] = ci;
            }
            h[(nu, nu - 1)] = 0.0;
            h[(nu, nu)] = 1.0;
            for i in (0..=(n - 2)).rev() {
                let iu = i as usize;
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += h[(iu, j as usize)] * h[(j as usize, nu - 1)];
                    sa += h[(iu, j as usize)] * h[(j as usize, nu)];
                }
                w = h[(iu, iu)] - p;

                if e[iu] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[iu] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[(iu, nu - 1)] = cr;
                        h[(iu, nu)] = ci;
                    } else {
                        x = h[(iu, iu + 1)];
                        y = h[(iu + 1, iu)];
                        let mut vr = (d[iu] - p) * (d[iu] - p) + e[iu] * e[iu] - q * q;
                        let vi = (d[iu] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[(iu, nu - 1)] = cr;
                        h[(iu, nu)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[(iu + 1, nu - 1)] =
                                (-ra - w * h[(iu, nu - 1)] + q * h[(iu, nu)]) / x;
                            h[(iu + 1, nu)] = (-sa - w * h[(iu, nu)] - q * h[(iu, nu - 1)]) / x;
                        } else {
                            let (cr, ci) =
                                cdiv(-r - y * h[(iu, nu - 1)], -s - y * h[(iu, nu)], z, q);
                            h[(iu + 1, nu - 1)] = cr;
                            h[(iu + 1, nu)] = ci;
                        }
                    }
                    // Overflow control.
                    t = h[(iu, nu - 1)].abs().max(h[(iu, nu)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in iu..=nu {
                            h[(j, nu - 1)] /= t;
                            h[(j, nu)] /= t;
                        }
                    }
                }
            }
        }
    }

    // Back-transform to eigenvectors of the original matrix.
    for j in (low as usize..nn).rev() {
        for i in low as usize..=high as usize {
            z = 0.0;
            for k in low as usize..=j.min(high as usize) {
                z += v[(i, k)] * h[(k, j)];
            }
            v[(i, j)] = z;
        }
    }
    Ok(())
}
