//! Kronecker-correlated Rayleigh channels.
//!
//! `H = A_R^{1/2} W A_T^{1/2}` with `W` IID `CN(0, 1)`. Only the
//! eigendecompositions of the two correlation matrices are kept; realizations
//! are drawn as `U_R Λ_R^{1/2} W Λ_T^{1/2} U_T^H`, which has the same law.
//!
//! Random streams come from ChaCha8 keyed by `(seed, stream)`, so each worker
//! can own an independent, portable stream.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig, ComplexMatrix, C64};
use crate::tol;

/// Seeded generator for stream `stream` of master seed `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One draw from `CN(0, 1)`: independent real and imaginary parts of
/// variance 1/2.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng))
}

/// Exponential correlation model, `[A]_{ij} = ρ^{|i-j|}`.
pub fn exp_correlation(n: usize, rho: f64) -> Result<ComplexMatrix> {
    if n == 0 {
        return Err(Error::config("correlation size must be at least 1"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::config(format!("correlation coefficient {rho} outside [0, 1)")));
    }
    Ok(ComplexMatrix::from_fn(n, n, |i, j| {
        C64::new(rho.powi(i.abs_diff(j) as i32), 0.0)
    }))
}

/// Eigendecomposed transmit and receive correlation.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub n_t: usize,
    pub n_r: usize,
    pub u_t: ComplexMatrix,
    pub u_r: ComplexMatrix,
    pub lambda_t: Vec<f64>,
    pub lambda_r: Vec<f64>,
    left: ComplexMatrix,
    right: ComplexMatrix,
}

impl ChannelStats {
    /// Uncorrelated `n_r × n_t` channel.
    pub fn iid(n_t: usize, n_r: usize) -> Self {
        Self::from_parts(
            ComplexMatrix::identity(n_t),
            vec![1.0; n_t],
            ComplexMatrix::identity(n_r),
            vec![1.0; n_r],
        )
    }

    /// Exponential correlation at both ends.
    pub fn exponential(n_t: usize, n_r: usize, rho_t: f64, rho_r: f64) -> Result<Self> {
        make_stats(&exp_correlation(n_t, rho_t)?, &exp_correlation(n_r, rho_r)?)
    }

    /// Statistics from eigenpairs directly, without the unit-diagonal
    /// normalization of [`make_stats`]. Degenerate spectra (all zeros) are
    /// allowed.
    pub fn from_eigen(
        u_t: ComplexMatrix,
        lambda_t: Vec<f64>,
        u_r: ComplexMatrix,
        lambda_r: Vec<f64>,
    ) -> Result<Self> {
        for (u, l, label) in [(&u_t, &lambda_t, "transmit"), (&u_r, &lambda_r, "receive")] {
            if !u.is_square() || u.rows() != l.len() || l.is_empty() {
                return Err(Error::dim(format!(
                    "{label} eigenvectors are {}x{} for {} eigenvalues",
                    u.rows(),
                    u.cols(),
                    l.len()
                )));
            }
            if l.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::domain(format!("{label} eigenvalues must be finite and >= 0")));
            }
            if u.unitarity_defect() > tol::UNITARY * l.len() as f64 {
                return Err(Error::domain(format!("{label} eigenvectors are not unitary")));
            }
        }
        Ok(Self::from_parts(u_t, lambda_t, u_r, lambda_r))
    }

    pub(crate) fn from_parts(
        u_t: ComplexMatrix,
        lambda_t: Vec<f64>,
        u_r: ComplexMatrix,
        lambda_r: Vec<f64>,
    ) -> Self {
        let sqrt_t: Vec<f64> = lambda_t.iter().map(|l| l.sqrt()).collect();
        let sqrt_r: Vec<f64> = lambda_r.iter().map(|l| l.sqrt()).collect();
        let left = u_r.scale_cols(&sqrt_r);
        let right = u_t.adjoint().scale_rows(&sqrt_t);
        Self {
            n_t: lambda_t.len(),
            n_r: lambda_r.len(),
            u_t,
            u_r,
            lambda_t,
            lambda_r,
            left,
            right,
        }
    }

    /// `N_t / N_r`.
    pub fn ratio(&self) -> f64 {
        self.n_t as f64 / self.n_r as f64
    }

    pub fn transmit_correlation(&self) -> ComplexMatrix {
        &self.u_t.scale_cols(&self.lambda_t) * &self.u_t.adjoint()
    }

    pub fn receive_correlation(&self) -> ComplexMatrix {
        &self.u_r.scale_cols(&self.lambda_r) * &self.u_r.adjoint()
    }

    pub fn trace_r(&self) -> f64 {
        self.lambda_r.iter().sum()
    }
}

/// Validates a correlation matrix and returns its eigenpairs with
/// eigenvalues clipped to be nonnegative and summing to `n`.
fn decompose_correlation(a: &ComplexMatrix, label: &str) -> Result<(ComplexMatrix, Vec<f64>)> {
    if !a.is_square() {
        return Err(Error::dim(format!("{label} correlation must be square")));
    }
    let n = a.rows();
    let trace = a.trace().re;
    let rel = (trace / n as f64 - 1.0).abs();
    let scale = if rel <= tol::UNIT_DIAGONAL {
        1.0
    } else if rel <= tol::TRACE_RESCALE {
        log::warn!("{label} correlation trace {trace:.6} differs from {n}; rescaling");
        n as f64 / trace
    } else {
        return Err(Error::domain(format!(
            "{label} correlation has trace {trace:.6}, expected {n} (unit diagonal)"
        )));
    };
    let eig = hermitian_eig(a)?;
    let floor = -tol::PSD_SLACK * n as f64;
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < floor) {
        return Err(Error::domain(format!(
            "{label} correlation is not positive semidefinite (eigenvalue {neg:.3e})"
        )));
    }
    let mut lambda: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0) * scale).collect();
    // restore the trace exactly after clipping
    let sum: f64 = lambda.iter().sum();
    if sum > 0.0 {
        let fix = n as f64 / sum;
        lambda.iter_mut().for_each(|l| *l *= fix);
    }
    Ok((eig.eigenvectors, lambda))
}

/// Builds channel statistics from transmit and receive correlation matrices.
pub fn make_stats(a_t: &ComplexMatrix, a_r: &ComplexMatrix) -> Result<ChannelStats> {
    let (u_t, lambda_t) = decompose_correlation(a_t, "transmit")?;
    let (u_r, lambda_r) = decompose_correlation(a_r, "receive")?;
    Ok(ChannelStats::from_parts(u_t, lambda_t, u_r, lambda_r))
}

/// A channel realization together with the stream it came from.
#[derive(Debug, Clone)]
pub struct ChannelSample {
    pub h: ComplexMatrix,
    pub seed: u64,
    pub stream: u64,
    pub index: u64,
}

/// Draws one realization `H` (`N_r × N_t`).
pub fn sample_channel<R: Rng + ?Sized>(stats: &ChannelStats, rng: &mut R) -> ComplexMatrix {
    let w = gaussian_matrix(stats.n_r, stats.n_t, rng);
    &(&stats.left * &w) * &stats.right
}

/// Deterministic sequence of realizations on stream `(seed, stream)`.
pub struct ChannelSampler<'a> {
    stats: &'a ChannelStats,
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    index: u64,
}

impl<'a> ChannelSampler<'a> {
    pub fn new(stats: &'a ChannelStats, seed: u64, stream: u64) -> Self {
        Self {
            stats,
            rng: rng_stream(seed, stream),
            seed,
            stream,
            index: 0,
        }
    }
}

impl Iterator for ChannelSampler<'_> {
    type Item = ChannelSample;

    fn next(&mut self) -> Option<ChannelSample> {
        let h = sample_channel(self.stats, &mut self.rng);
        let s = ChannelSample {
            h,
            seed: self.seed,
            stream: self.stream,
            index: self.index,
        };
        self.index += 1;
        Some(s)
    }
}

/// Equivalent channel `H_eq = Λ_R^{1/2} W̃ Λ_T^{1/2}` of a realization, where
/// `W̃ = U_R^H A_R^{-1/2} H A_T^{-1/2} U_T`. Algebraically this is
/// `U_R^H H U_T`; the whitened route is taken so singular correlations are
/// reported instead of silently accepted.
pub fn reduce_equivalent(stats: &ChannelStats, h: &ComplexMatrix) -> Result<ComplexMatrix> {
    if h.rows() != stats.n_r || h.cols() != stats.n_t {
        return Err(Error::dim(format!(
            "sample is {}x{}, statistics describe {}x{}",
            h.rows(),
            h.cols(),
            stats.n_r,
            stats.n_t
        )));
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    if min(&stats.lambda_r) <= tol::INVERTIBLE || min(&stats.lambda_t) <= tol::INVERTIBLE {
        return Err(Error::domain(
            "singular correlation matrix: equivalent channel is undefined",
        ));
    }
    let inv_r: Vec<f64> = stats.lambda_r.iter().map(|l| 1.0 / l.sqrt()).collect();
    let inv_t: Vec<f64> = stats.lambda_t.iter().map(|l| 1.0 / l.sqrt()).collect();
    let rotated = &(&stats.u_r.adjoint() * h) * &stats.u_t;
    let w_tilde = rotated.scale_rows(&inv_r).scale_cols(&inv_t);
    let sqrt_r: Vec<f64> = stats.lambda_r.iter().map(|l| l.sqrt()).collect();
    let sqrt_t: Vec<f64> = stats.lambda_t.iter().map(|l| l.sqrt()).collect();
    Ok(w_tilde.scale_rows(&sqrt_r).scale_cols(&sqrt_t))
}

/// Largest matrix dimension accepted by the text reader.
pub const MAX_FILE_DIM: usize = 256;

/// Parses the plain-text matrix format: a line holding `n`, then `n` rows of
/// `2n` comma-separated numbers (`re,im` per entry). Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_matrix(text: &str) -> Result<ComplexMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing dimension header".into(),
    })?;
    let n: usize = header.parse().map_err(|_| Error::Parse {
        line: hline,
        msg: format!("invalid dimension '{header}'"),
    })?;
    if n == 0 || n > MAX_FILE_DIM {
        return Err(Error::Parse {
            line: hline,
            msg: format!("dimension {n} outside 1..={MAX_FILE_DIM}"),
        });
    }
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        let (ln, row) = lines.next().ok_or(Error::Parse {
            line: hline + r + 1,
            msg: format!("expected {n} rows, found {r}"),
        })?;
        let nums = row
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: ln,
                        msg: format!("invalid number '{t}'"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if nums.len() != 2 * n {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {} values, found {}", 2 * n, nums.len()),
            });
        }
        data.extend(nums.chunks(2).map(|p| C64::new(p[0], p[1])));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse {
            line: ln,
            msg: "trailing data after matrix".into(),
        });
    }
    ComplexMatrix::from_vec(n, n, data)
}

/// Parses a correlation matrix and checks Hermitian symmetry.
pub fn parse_correlation(text: &str) -> Result<ComplexMatrix> {
    let a = parse_matrix(text)?;
    let defect = a.hermitian_defect();
    if defect > tol::HERMITIAN_FILE * a.frobenius_norm().max(1.0) {
        return Err(Error::domain(format!(
            "correlation matrix is not Hermitian (defect {defect:.3e})"
        )));
    }
    Ok(a)
}

/// Serializes a square matrix in the format read by [`parse_matrix`].
/// Values are written with round-trip precision.
pub fn format_matrix(m: &ComplexMatrix) -> Result<String> {
    if !m.is_square() {
        return Err(Error::dim("matrix files hold square matrices only"));
    }
    let mut out = format!("{}\n", m.rows());
    for r in 0..m.rows() {
        let row: Vec<String> = m
            .row(r)
            .iter()
            .map(|z| format!("{:?},{:?}", z.re, z.im))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    Ok(out)
}

pub fn read_matrix(path: &Path) -> Result<ComplexMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}

pub fn load_correlation(path: &Path) -> Result<ComplexMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_correlation(&text)
}

pub fn write_matrix(path: &Path, m: &ComplexMatrix) -> Result<()> {
    std::fs::write(path, format_matrix(m)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;

    #[test]
    fn exp_correlation_examples() {
        assert_eq!(exp_correlation(4, 0.0).unwrap(), ComplexMatrix::identity(4));
        let a = exp_correlation(2, 0.5).unwrap();
        assert_eq!(a, ComplexMatrix::from_real(2, 2, &[1.0, 0.5, 0.5, 1.0]).unwrap());
        let eig = hermitian_eig(&a).unwrap();
        assert!((eig.eigenvalues[0] - 1.5).abs() < 1e-14);
        assert!((eig.eigenvalues[1] - 0.5).abs() < 1e-14);
        assert!(exp_correlation(3, 1.0).is_err());
        assert!(exp_correlation(3, -0.1).is_err());
    }

    #[test]
    fn stats_from_identity_and_exponential() {
        let s = make_stats(&ComplexMatrix::identity(4), &ComplexMatrix::identity(4)).unwrap();
        assert_eq!(s.lambda_t, vec![1.0; 4]);
        assert_eq!(s.lambda_r, vec![1.0; 4]);

        let s = ChannelStats::exponential(4, 4, 0.9, 0.9).unwrap();
        assert!((s.lambda_t.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        assert!((s.lambda_r.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        assert!(s.lambda_t.windows(2).all(|w| w[0] >= w[1]));
        let a = exp_correlation(4, 0.9).unwrap();
        assert!((&s.transmit_correlation() - &a).frobenius_norm() < 1e-12);
    }

    #[test]
    fn stats_rescales_small_trace_errors_and_rejects_large() {
        let slightly = exp_correlation(3, 0.3).unwrap().scale(1.004);
        let s = make_stats(&slightly, &ComplexMatrix::identity(2)).unwrap();
        assert!((s.lambda_t.iter().sum::<f64>() - 3.0).abs() < 1e-9);

        let off = exp_correlation(3, 0.3).unwrap().scale(1.2);
        assert!(matches!(
            make_stats(&off, &ComplexMatrix::identity(2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stats_rejects_indefinite() {
        let bad = ComplexMatrix::from_real(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            make_stats(&bad, &ComplexMatrix::identity(2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn same_seed_same_channel() {
        let s = ChannelStats::exponential(3, 2, 0.7, 0.2).unwrap();
        let a = sample_channel(&s, &mut rng_stream(42, 0));
        let b = sample_channel(&s, &mut rng_stream(42, 0));
        let c = sample_channel(&s, &mut rng_stream(42, 1));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.rows(), a.cols()), (2, 3));
    }

    #[test]
    fn identity_correlation_reduces_to_itself() {
        let s = ChannelStats::iid(3, 3);
        let h = sample_channel(&s, &mut rng_stream(5, 0));
        let heq = reduce_equivalent(&s, &h).unwrap();
        assert!((&heq - &h).frobenius_norm() < 1e-12);
    }

    #[test]
    fn equivalent_channel_keeps_singular_values() {
        let s = ChannelStats::exponential(4, 3, 0.8, 0.5).unwrap();
        let mut rng = rng_stream(9, 0);
        for _ in 0..20 {
            let h = sample_channel(&s, &mut rng);
            let heq = reduce_equivalent(&s, &h).unwrap();
            let a = singular_values(&h);
            let b = singular_values(&heq);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_correlation_is_rejected() {
        let s = ChannelStats::from_parts(
            ComplexMatrix::identity(2),
            vec![2.0, 0.0],
            ComplexMatrix::identity(2),
            vec![1.0, 1.0],
        );
        let h = sample_channel(&s, &mut rng_stream(1, 0));
        assert!(matches!(reduce_equivalent(&s, &h), Err(Error::Domain(_))));
        let wrong = ComplexMatrix::zeros(3, 2);
        assert!(matches!(reduce_equivalent(&s, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn matrix_text_roundtrip() {
        let m = ComplexMatrix::from_vec(
            2,
            2,
            vec![
                C64::new(1.0, 0.0),
                C64::new(0.25, -0.1),
                C64::new(0.25, 0.1),
                C64::new(1.0, 0.0),
            ],
        )
        .unwrap();
        let text = format_matrix(&m).unwrap();
        assert_eq!(text.lines().next(), Some("2"));
        assert_eq!(parse_correlation(&text).unwrap(), m);
    }

    #[test]
    fn matrix_parser_errors() {
        assert!(matches!(parse_matrix(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_matrix("x\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_matrix("0\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_matrix("2\n1,0,0,0\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_matrix("1\n1,0,3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_matrix("1\nnan,0\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_matrix("1\n1,0\n1,0\n"), Err(Error::Parse { line: 3, .. })));
        let m = parse_matrix("# comment\n1\n\n 2.5 , -1\n").unwrap();
        assert_eq!(m[(0, 0)], C64::new(2.5, -1.0));
        // not Hermitian
        assert!(matches!(
            parse_correlation("2\n1,0,0.5,0\n0.4,0,1,0\n"),
            Err(Error::Domain(_))
        ));
    }
}
