//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use fa_precoder::asymptotic::Surrogate;
use fa_precoder::linalg::ComplexMatrix;
use fa_precoder::precoder::StructuredPrecoder;
use num_complex::Complex64 as C64;

/// Nodes and weights for `∫ e^{-t²} f(t) dt`, Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `I(x; Hx + n)` in bits for `n ~ CN(0, I)` and equiprobable `x` over the
/// product of `points`, by tensor Gauss–Hermite quadrature over the
/// `2·rows` real noise dimensions.
pub fn mi_quadrature(h: &ComplexMatrix, points: &[C64], nodes: usize) -> f64 {
    let (n_r, n_t) = (h.rows(), h.cols());
    let m = points.len();
    let total = m.pow(n_t as u32);
    let symbols: Vec<Vec<C64>> = (0..total)
        .map(|mut k| {
            (0..n_t)
                .map(|_| {
                    let p = points[k % m];
                    k /= m;
                    p
                })
                .collect()
        })
        .collect();
    let images: Vec<Vec<C64>> = symbols.iter().map(|s| h.matvec(s)).collect();
    let (t, w) = gauss_hermite(nodes);
    let dims = 2 * n_r;
    let norm = std::f64::consts::PI.powf(-(dims as f64) / 2.0);
    let mut idx = vec![0usize; dims];
    let mut acc = 0.0;
    let mut terms = vec![0.0; total];
    loop {
        let weight: f64 = idx.iter().map(|&i| w[i]).product::<f64>() * norm;
        let noise: Vec<C64> = (0..n_r).map(|r| C64::new(t[idx[2 * r]], t[idx[2 * r + 1]])).collect();
        let nn: f64 = noise.iter().map(|z| z.norm_sqr()).sum();
        let mut inner = 0.0;
        for a in 0..total {
            for (b, term) in terms.iter_mut().enumerate() {
                let d: f64 = (0..n_r)
                    .map(|r| (images[a][r] - images[b][r] + noise[r]).norm_sqr())
                    .sum();
                *term = nn - d;
            }
            inner += log_sum_exp(&terms);
        }
        acc += weight * inner / total as f64;
        let mut k = 0;
        loop {
            if k == dims {
                return ((total as f64).ln() - acc) / std::f64::consts::LN_2;
            }
            idx[k] += 1;
            if idx[k] < nodes {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Closed-form-in-one-integral BPSK MI: `1 - E log2(1 + exp(-4a(a + t)))`
/// with `t ~ N(0, 1/2)`, for amplitude `a = |h|`.
pub fn bpsk_scalar(a: f64, nodes: usize) -> f64 {
    let (t, w) = gauss_hermite(nodes);
    let e: f64 = t
        .iter()
        .zip(&w)
        .map(|(t, w)| {
            let z = -4.0 * a * (a + t);
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            w * softplus
        })
        .sum::<f64>()
        / std::f64::consts::PI.sqrt();
    1.0 - e / std::f64::consts::LN_2
}

/// Root of `F(γ) - γ` on `[0, tr Λ_R]` by plain bisection, where `F` runs
/// one fixed-point sweep of `sur` from `γ`.
pub fn fixed_point_bisection(sur: &Surrogate<'_>, pre: &StructuredPrecoder, tol: f64) -> (f64, f64) {
    let lambda_r = sur.stats().lambda_r.clone();
    let lambda_t = sur.stats().lambda_t.clone();
    let psi_at = |gamma: f64| -> f64 {
        let ev = sur.evaluate(pre, gamma, true, None).unwrap();
        let mut psi = 0.0;
        for (s, e) in ev.iter().enumerate() {
            let e = &e.mmse.as_ref().unwrap().matrix;
            let v = pre.mixer(s);
            let vev = v.matmul(e).unwrap().matmul(&v.adjoint()).unwrap();
            for (i, &l) in pre.stream_perm(s).iter().enumerate() {
                psi += pre.stream_power(s)[i] * vev[(i, i)].re * lambda_t[l];
            }
        }
        psi
    };
    let f = |gamma: f64| -> f64 {
        let psi = psi_at(gamma);
        lambda_r.iter().map(|l| l / (1.0 + psi * l)).sum::<f64>() - gamma
    };
    let (mut lo, mut hi) = (0.0, lambda_r.iter().sum::<f64>());
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    (gamma, psi_at(gamma))
}

/// Best `Σ log2(1 + g_i p_i)` over a grid of allocations summing to `p`
/// (step `p / steps`), then refined by coordinate search.
pub fn waterfill_grid(gains: &[f64], p: f64, steps: usize) -> Vec<f64> {
    let n = gains.len();
    let rate = |x: &[f64]| -> f64 { x.iter().zip(gains).map(|(x, g)| (1.0 + g * x).log2()).sum() };
    let mut best = vec![p / n as f64; n];
    let mut best_rate = rate(&best);
    let mut alloc = vec![0usize; n];
    fn rec(
        k: usize,
        left: usize,
        alloc: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if k + 1 == alloc.len() {
            alloc[k] = left;
            visit(alloc);
            return;
        }
        for a in 0..=left {
            alloc[k] = a;
            rec(k + 1, left - a, alloc, visit);
        }
    }
    let unit = p / steps as f64;
    rec(0, steps, &mut alloc, &mut |a: &[usize]| {
        let x: Vec<f64> = a.iter().map(|&k| k as f64 * unit).collect();
        let r = rate(&x);
        if r > best_rate {
            best_rate = r;
            best = x;
        }
    });
    let mut delta = unit;
    while delta > 1e-9 {
        let mut moved = false;
        for i in 0..n {
            for j in 0..n {
                if i == j || best[j] < delta {
                    continue;
                }
                let mut x = best.clone();
                x[i] += delta;
                x[j] -= delta;
                let r = rate(&x);
                if r > best_rate {
                    best_rate = r;
                    best = x;
                    moved = true;
                }
            }
        }
        if !moved {
            delta /= 2.0;
        }
    }
    best
}

/// Eigenvalues of a real symmetric matrix from its characteristic
/// polynomial (Faddeev–LeVerrier), roots isolated by sign changes on a fine
/// grid over the Gershgorin interval and polished by bisection.
pub fn eig_charpoly(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mul = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect())
            .collect()
    };
    // coefficients c_k of λ^n + c_1 λ^{n-1} + ... + c_n
    let mut coeffs = vec![1.0];
    let mut m: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    let mut c_prev = 1.0;
    for k in 1..=n {
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += c_prev;
        }
        m = mul(a, &m);
        let c = -(0..n).map(|i| m[i][i]).sum::<f64>() / k as f64;
        coeffs.push(c);
        c_prev = c;
    }
    let poly = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
    let radius = (0..n)
        .map(|i| a[i][i].abs() + (0..n).filter(|&j| j != i).map(|j| a[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let grid = 200_000;
    let mut roots = Vec::new();
    let (lo, hi) = (-radius - 1e-9, radius + 1e-9);
    let step = (hi - lo) / grid as f64;
    let mut x0 = lo;
    let mut f0 = poly(x0);
    for k in 1..=grid {
        let x1 = lo + k as f64 * step;
        let f1 = poly(x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f0 * f1 < 0.0 {
            let (mut a0, mut b0, mut fa) = (x0, x1, f0);
            for _ in 0..200 {
                let mid = 0.5 * (a0 + b0);
                let fm = poly(mid);
                if fa * fm <= 0.0 {
                    b0 = mid;
                } else {
                    a0 = mid;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a0 + b0));
        }
        x0 = x1;
        f0 = f1;
    }
    roots
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Quasi-random `CN(0, I)` bank: Halton points through Box–Muller. The
/// integration error shrinks close to `1/count` for smooth integrands, far
/// faster than a pseudo-random bank of the same size.
pub fn halton_bank(dim: usize, count: usize) -> fa_precoder::mi::NoiseBank {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    assert!(2 * dim <= PRIMES.len());
    let mut samples = Vec::with_capacity(dim * count);
    for k in 1..=count {
        for d in 0..dim {
            let u1 = radical_inverse(k, PRIMES[2 * d]);
            let u2 = radical_inverse(k, PRIMES[2 * d + 1]);
            let r = (-u1.ln()).sqrt();
            samples.push(C64::from_polar(r, 2.0 * std::f64::consts::PI * u2));
        }
    }
    fa_precoder::mi::NoiseBank::from_samples(dim, samples).expect("well-formed bank")
}

/// Random unit-diagonal PSD correlation: normalized `W Wᴴ` with `W` an
/// `n × (n + 1)` complex Gaussian matrix.
pub fn random_correlation<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> ComplexMatrix {
    let w = fa_precoder::channel::gaussian_matrix(n, n + 1, rng);
    let a = w.matmul(&w.adjoint()).expect("square product");
    let d: Vec<f64> = (0..n).map(|i| 1.0 / a[(i, i)].re.sqrt()).collect();
    let mut out = a.scale_rows(&d).scale_cols(&d);
    // exact unit diagonal after rounding
    out = ComplexMatrix::from_fn(n, n, |i, j| if i == j { C64::new(1.0, 0.0) } else { out[(i, j)] });
    out
}
