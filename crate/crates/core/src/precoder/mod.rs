//! Block-structured precoders `B = U_T Λ_B V_B`.
//!
//! The `N_t` eigen-directions of the transmit correlation are split into `S`
//! groups of `N_s`. Position `j = s·N_s + i` of the permutation `perm` names
//! the eigen-direction carrying slot `i` of stream `s`; `Λ_B` and `V_B` are
//! zero outside those groups, so streams are decoupled.

mod optimize;

pub use optimize::{
    optimize, IterationRecord, OptimizationTrace, Optimizer, OptimizerConfig, RestartTrace,
    StepOutcome,
};

use rand::Rng;

use crate::channel::{gaussian_matrix, ChannelStats};
use crate::error::{Error, Result};
use crate::linalg::{polar_retract, ComplexMatrix};
use crate::tol;

const LOG2_E: f64 = std::f64::consts::LOG2_E;

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPrecoder {
    n_s: usize,
    perm: Vec<usize>,
    /// `Λ²` entries in stream order (position `s·N_s + i`).
    power: Vec<f64>,
    v: Vec<ComplexMatrix>,
}

impl StructuredPrecoder {
    pub fn new(
        perm: Vec<usize>,
        n_s: usize,
        power: Vec<f64>,
        v: Vec<ComplexMatrix>,
    ) -> Result<Self> {
        let n_t = perm.len();
        check_shape(n_t, n_s)?;
        check_permutation(&perm)?;
        if power.len() != n_t {
            return Err(Error::dim(format!(
                "{} power entries for {n_t} subchannels",
                power.len()
            )));
        }
        if power.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain("subchannel powers must be finite and nonnegative"));
        }
        if v.len() != n_t / n_s {
            return Err(Error::dim(format!(
                "{} mixers for {} streams",
                v.len(),
                n_t / n_s
            )));
        }
        for (s, vs) in v.iter().enumerate() {
            if vs.rows() != n_s || vs.cols() != n_s {
                return Err(Error::dim(format!(
                    "mixer {s} is {}x{}, expected {n_s}x{n_s}",
                    vs.rows(),
                    vs.cols()
                )));
            }
            let defect = vs.unitarity_defect();
            if defect > tol::UNITARY {
                return Err(Error::domain(format!(
                    "mixer {s} is not unitary (defect {defect:.2e})"
                )));
            }
        }
        Ok(Self { n_s, perm, power, v })
    }

    /// Equal power on every subchannel and identity mixers.
    pub fn uniform(perm: Vec<usize>, n_s: usize, total_power: f64) -> Result<Self> {
        let n_t = perm.len();
        check_shape(n_t, n_s)?;
        let power = vec![total_power / n_t as f64; n_t];
        let v = vec![ComplexMatrix::identity(n_s); n_t / n_s];
        Self::new(perm, n_s, power, v)
    }

    /// Random start: uniform power perturbed by ±10 %, renormalized, and
    /// mixers drawn as the unitary factor of a complex Gaussian matrix.
    /// Width-one streams keep the unit scalar.
    pub fn random<R: Rng + ?Sized>(
        perm: Vec<usize>,
        n_s: usize,
        total_power: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n_t = perm.len();
        check_shape(n_t, n_s)?;
        let base = total_power / n_t as f64;
        let raw: Vec<f64> = (0..n_t)
            .map(|_| base * (1.0 + rng.random_range(-0.1..0.1)))
            .collect();
        let power = normalize_power(&raw, total_power);
        let mut v = Vec::with_capacity(n_t / n_s);
        for _ in 0..n_t / n_s {
            if n_s == 1 {
                v.push(ComplexMatrix::identity(1));
                continue;
            }
            loop {
                // rank deficiency has probability zero; retry regardless
                if let Ok(q) = polar_retract(&gaussian_matrix(n_s, n_s, rng)) {
                    v.push(q);
                    break;
                }
            }
        }
        Self::new(perm, n_s, power, v)
    }

    pub fn n_t(&self) -> usize {
        self.perm.len()
    }

    /// Stream count `S`.
    pub fn streams(&self) -> usize {
        self.v.len()
    }

    /// Stream width `N_s`.
    pub fn width(&self) -> usize {
        self.n_s
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Eigen-directions used by stream `s`.
    pub fn stream_perm(&self, s: usize) -> &[usize] {
        &self.perm[s * self.n_s..(s + 1) * self.n_s]
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn stream_power(&self, s: usize) -> &[f64] {
        &self.power[s * self.n_s..(s + 1) * self.n_s]
    }

    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Diagonal of `Λ_s`.
    pub fn amplitudes(&self, s: usize) -> Vec<f64> {
        self.stream_power(s).iter().map(|p| p.sqrt()).collect()
    }

    pub fn mixer(&self, s: usize) -> &ComplexMatrix {
        &self.v[s]
    }

    pub fn mixers(&self) -> &[ComplexMatrix] {
        &self.v
    }

    /// Diagonal of `Λ_B` in eigen-direction order.
    pub fn lambda_b(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_t()];
        for (j, &l) in self.perm.iter().enumerate() {
            out[l] = self.power[j].sqrt();
        }
        out
    }

    /// `V_B`: block `s` of the mixers scattered to rows and columns
    /// `perm[s·N_s..(s+1)·N_s]`, zero elsewhere.
    pub fn v_b(&self) -> ComplexMatrix {
        let n_t = self.n_t();
        let mut out = ComplexMatrix::zeros(n_t, n_t);
        for (s, vs) in self.v.iter().enumerate() {
            let idx = self.stream_perm(s);
            for (a, &r) in idx.iter().enumerate() {
                for (b, &c) in idx.iter().enumerate() {
                    out[(r, c)] = vs[(a, b)];
                }
            }
        }
        out
    }

    /// `B = U_T Λ_B V_B`.
    pub fn expand(&self, stats: &ChannelStats) -> Result<ComplexMatrix> {
        if stats.n_t != self.n_t() {
            return Err(Error::dim(format!(
                "precoder has {} inputs, channel has {} transmit antennas",
                self.n_t(),
                stats.n_t
            )));
        }
        stats.u_t.matmul(&self.v_b().scale_rows(&self.lambda_b()))
    }

    pub(crate) fn set_power(&mut self, power: Vec<f64>) {
        debug_assert_eq!(power.len(), self.power.len());
        self.power = power;
    }

    pub(crate) fn set_mixers(&mut self, v: Vec<ComplexMatrix>) {
        debug_assert_eq!(v.len(), self.v.len());
        self.v = v;
    }
}

fn check_shape(n_t: usize, n_s: usize) -> Result<()> {
    if n_t == 0 || n_s == 0 || n_t % n_s != 0 {
        return Err(Error::config(format!(
            "S·N_s must equal N_t: N_s = {n_s} does not divide N_t = {n_t}"
        )));
    }
    Ok(())
}

fn check_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &l in perm {
        if l >= perm.len() || std::mem::replace(&mut seen[l], true) {
            return Err(Error::domain(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Clips negative entries to zero and rescales to sum to `total`. An all-zero
/// input maps to the uniform allocation.
pub fn normalize_power(p: &[f64], total: f64) -> Vec<f64> {
    let clipped: Vec<f64> = p.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= 0.0 {
        return vec![total / p.len() as f64; p.len()];
    }
    clipped.iter().map(|x| x * total / sum).collect()
}

/// Groups subchannels so each stream holds the `N_s/2` strongest and the
/// `N_s/2` weakest of the gains not yet assigned. Ties keep index order.
/// Width one means no pairing and returns the identity.
pub fn pair_subchannels(xi: &[f64], n_s: usize) -> Result<Vec<usize>> {
    check_shape(xi.len(), n_s)?;
    if n_s == 1 {
        return Ok((0..xi.len()).collect());
    }
    if n_s % 2 == 1 {
        return Err(Error::config(format!(
            "subchannel pairing needs an even stream width, got N_s = {n_s}"
        )));
    }
    let mut order: Vec<usize> = (0..xi.len()).collect();
    order.sort_by(|&a, &b| xi[b].total_cmp(&xi[a]));
    let half = n_s / 2;
    let n = xi.len();
    let mut perm = Vec::with_capacity(n);
    for s in 0..n / n_s {
        perm.extend_from_slice(&order[s * half..(s + 1) * half]);
        perm.extend_from_slice(&order[n - (s + 1) * half..n - s * half]);
    }
    Ok(perm)
}

/// Surrogate-MI gradients with the fixed-point auxiliaries held fixed.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `∂I/∂Λ²` in stream order, bits per unit power.
    pub power: Vec<f64>,
    /// `∂I/∂V_s*` per stream, so `dI = 2 Re tr(G^H dV)`.
    pub mixers: Vec<ComplexMatrix>,
}

/// `∂I/∂[Λ_s²]_ii = [V_s E_s V_s^H]_ii [Ξ_s]_ii log2 e` and
/// `∂I/∂V_s* = Ξ_s Λ_s² V_s E_s log2 e`.
pub fn gradients(
    pre: &StructuredPrecoder,
    xi_s: &[Vec<f64>],
    e_s: &[ComplexMatrix],
) -> Result<Gradients> {
    let (s_count, n_s) = (pre.streams(), pre.width());
    if xi_s.len() != s_count || e_s.len() != s_count {
        return Err(Error::dim(format!(
            "expected {s_count} gain vectors and MMSE matrices, got {} and {}",
            xi_s.len(),
            e_s.len()
        )));
    }
    let mut power = Vec::with_capacity(pre.n_t());
    let mut mixers = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let (xi, e, v) = (&xi_s[s], &e_s[s], pre.mixer(s));
        if xi.len() != n_s || e.rows() != n_s || e.cols() != n_s {
            return Err(Error::dim(format!("stream {s} quantities do not have width {n_s}")));
        }
        let ve = v.matmul(e)?;
        let vev = ve.matmul(&v.adjoint())?;
        power.extend((0..n_s).map(|i| vev[(i, i)].re * xi[i] * LOG2_E));
        let w: Vec<f64> = xi
            .iter()
            .zip(pre.stream_power(s))
            .map(|(x, p)| x * p * LOG2_E)
            .collect();
        mixers.push(ve.scale_rows(&w));
    }
    Ok(Gradients { power, mixers })
}

/// `2 Re tr(A^H B)`, the real inner product paired with Wirtinger gradients.
pub(crate) fn real_inner(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    2.0 * a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x.conj() * y).re)
        .sum::<f64>()
}

pub(crate) fn axpy(a: &ComplexMatrix, t: f64, g: &ComplexMatrix) -> ComplexMatrix {
    a + &g.scale(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rng_stream;
    use crate::linalg::C64;

    #[test]
    fn pairing_examples() {
        assert_eq!(pair_subchannels(&[4.0, 3.0, 2.0, 1.0], 2).unwrap(), vec![0, 3, 1, 2]);
        assert_eq!(pair_subchannels(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![3, 0, 2, 1]);
        assert_eq!(pair_subchannels(&[2.0; 4], 2).unwrap(), vec![0, 3, 1, 2]);
        assert_eq!(pair_subchannels(&[2.0; 4], 4).unwrap(), vec![0, 1, 2, 3]);
        let xi = [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(pair_subchannels(&xi, 4).unwrap(), vec![0, 1, 6, 7, 2, 3, 4, 5]);
        assert_eq!(pair_subchannels(&xi, 1).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(matches!(pair_subchannels(&[1.0; 6], 3), Err(Error::Config(_))));
        assert!(matches!(pair_subchannels(&[1.0; 6], 4), Err(Error::Config(_))));
    }

    #[test]
    fn scatter_bookkeeping() {
        let pre = StructuredPrecoder::new(
            vec![1, 0],
            1,
            vec![4.0, 9.0],
            vec![ComplexMatrix::identity(1); 2],
        )
        .unwrap();
        assert_eq!(pre.lambda_b(), vec![3.0, 2.0]);
        let b = pre.expand(&ChannelStats::iid(2, 2)).unwrap();
        assert_eq!(b, ComplexMatrix::from_diag(&[3.0, 2.0]));
    }

    #[test]
    fn block_pattern_and_power() {
        let mut rng = rng_stream(5, 0);
        let pre = StructuredPrecoder::random(vec![0, 1, 2, 3], 2, 4.0, &mut rng).unwrap();
        assert!((pre.total_power() - 4.0).abs() < 1e-12);
        let vb = pre.v_b();
        for r in 0..4 {
            for c in 0..4 {
                if r / 2 != c / 2 {
                    assert_eq!(vb[(r, c)], C64::new(0.0, 0.0));
                }
            }
        }
        assert!(vb.unitarity_defect() < 1e-12);
        let stats = ChannelStats::exponential(4, 4, 0.7, 0.3).unwrap();
        let b = pre.expand(&stats).unwrap();
        let tr = b.matmul(&b.adjoint()).unwrap().trace().re;
        assert!((tr - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_structure() {
        let id = ComplexMatrix::identity(2);
        assert!(StructuredPrecoder::new(vec![0, 0], 2, vec![1.0, 1.0], vec![id.clone()]).is_err());
        assert!(StructuredPrecoder::new(vec![0, 1, 2], 2, vec![1.0; 3], vec![id.clone()]).is_err());
        assert!(StructuredPrecoder::new(vec![0, 1], 2, vec![-1.0, 1.0], vec![id.clone()]).is_err());
        let not_unitary = id.scale(1.1);
        assert!(StructuredPrecoder::new(vec![0, 1], 2, vec![1.0; 2], vec![not_unitary]).is_err());
    }

    #[test]
    fn gradients_vanish_without_error_or_gain() {
        let mut rng = rng_stream(6, 0);
        let pre = StructuredPrecoder::random(vec![0, 1, 2, 3], 2, 2.0, &mut rng).unwrap();
        let zero = vec![ComplexMatrix::zeros(2, 2); 2];
        let g = gradients(&pre, &[vec![1.0, 0.5], vec![0.3, 0.2]], &zero).unwrap();
        assert!(g.power.iter().all(|x| *x == 0.0));
        assert!(g.mixers.iter().all(|m| m.max_abs() == 0.0));
        let eye = vec![ComplexMatrix::identity(2); 2];
        let g = gradients(&pre, &[vec![0.0; 2], vec![0.0; 2]], &eye).unwrap();
        assert!(g.power.iter().all(|x| *x == 0.0));
        assert!(g.mixers.iter().all(|m| m.max_abs() == 0.0));
        assert!(gradients(&pre, &[vec![0.0; 2]], &eye).is_err());
    }

    #[test]
    fn normalize_clips_and_rescales() {
        assert_eq!(normalize_power(&[-1.0, 1.0, 3.0], 2.0), vec![0.0, 0.5, 1.5]);
        assert_eq!(normalize_power(&[-1.0, 0.0], 2.0), vec![1.0, 1.0]);
    }
}
