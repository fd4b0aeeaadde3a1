//! Finite-alphabet mutual information and MMSE for `z = G d + n`.
//!
//! `d` is uniform over the product alphabet (enumerated exhaustively), `n` is
//! `CN(0, I)` and the expectation over `n` is a Monte-Carlo average over a
//! fixed [`NoiseBank`]. All likelihood sums go through log-sum-exp with the
//! maximum exponent subtracted first.
//!
//! With `Δ_mk = d_m - d_k`,
//!
//! ```text
//! I = n log2 M - 1/M^n Σ_m E_n[ log2 Σ_k exp(-‖G Δ_mk + n‖² + ‖n‖²) ]
//! ```

use std::time::Instant;

use crate::channel::{complex_gaussian, rng_stream};
use crate::constellation::{enumerate_product, Constellation};
use crate::error::{Error, Result};
use crate::linalg::{ComplexMatrix, C64};

const LN_2: f64 = std::f64::consts::LN_2;

/// Stream id reserved for noise banks so they never overlap channel streams.
pub const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0000;

/// A fixed set of `CN(0, I)` noise vectors reused across evaluations.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    dim: usize,
    seed: u64,
    samples: Vec<C64>,
}

impl NoiseBank {
    pub fn generate(dim: usize, count: usize, seed: u64) -> Self {
        assert!(dim > 0, "noise dimension must be positive");
        let mut rng = rng_stream(seed, NOISE_STREAM + dim as u64);
        let samples = (0..dim * count).map(|_| complex_gaussian(&mut rng)).collect();
        Self { dim, seed, samples }
    }

    pub fn from_samples(dim: usize, samples: Vec<C64>) -> Result<Self> {
        if dim == 0 || samples.len() % dim != 0 {
            return Err(Error::dim("noise samples do not tile the requested dimension"));
        }
        Ok(Self {
            dim,
            seed: 0,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&self, j: usize) -> &[C64] {
        &self.samples[j * self.dim..(j + 1) * self.dim]
    }

    /// Per-component sample mean.
    pub fn mean(&self) -> Vec<C64> {
        let mut acc = vec![C64::new(0.0, 0.0); self.dim];
        for j in 0..self.len() {
            for (a, z) in acc.iter_mut().zip(self.sample(j)) {
                *a += z;
            }
        }
        let n = self.len().max(1) as f64;
        acc.into_iter().map(|a| a / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiMethod {
    MonteCarlo,
    ExhaustiveQuadrature,
}

/// Mutual information in bits per channel use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: MiMethod,
}

/// MMSE matrix with entrywise Monte-Carlo standard errors (row-major).
#[derive(Debug, Clone)]
pub struct MmseEstimate {
    pub matrix: ComplexMatrix,
    pub std_error: Vec<f64>,
}

/// Result of one pass over the noise bank.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mi: MiEstimate,
    pub mmse: Option<MmseEstimate>,
}

/// Precomputed product alphabet for one input dimension.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    dim: usize,
    total: usize,
    bits: f64,
    /// structure-of-arrays: coordinate `t` of symbol `k` at `t * total + k`
    re: Vec<f64>,
    im: Vec<f64>,
}

impl SymbolTable {
    pub fn new(c: &Constellation, dim: usize) -> Result<Self> {
        let e = enumerate_product(c, dim)?;
        let total = e.total();
        let flat = e.to_table();
        let mut re = vec![0.0; dim * total];
        let mut im = vec![0.0; dim * total];
        for k in 0..total {
            for t in 0..dim {
                re[t * total + k] = flat[k * dim + t].re;
                im[t * total + k] = flat[k * dim + t].im;
            }
        }
        Ok(Self {
            dim,
            total,
            bits: dim as f64 * c.bits_per_symbol(),
            re,
            im,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `n log2 M`, the saturation value.
    pub fn max_bits(&self) -> f64 {
        self.bits
    }

    pub fn symbol(&self, k: usize) -> Vec<C64> {
        (0..self.dim)
            .map(|t| C64::new(self.re[t * self.total + k], self.im[t * self.total + k]))
            .collect()
    }

    fn check(&self, g: &ComplexMatrix, bank: &NoiseBank) -> Result<()> {
        if g.cols() != self.dim {
            return Err(Error::dim(format!(
                "channel has {} inputs, alphabet dimension is {}",
                g.cols(),
                self.dim
            )));
        }
        if bank.dim() != g.rows() {
            return Err(Error::dim(format!(
                "noise bank dimension {} does not match channel outputs {}",
                bank.dim(),
                g.rows()
            )));
        }
        if bank.is_empty() {
            return Err(Error::config("noise bank is empty"));
        }
        Ok(())
    }

    /// Noiseless outputs `G d_k` in structure-of-arrays layout.
    fn outputs(&self, g: &ComplexMatrix) -> (Vec<f64>, Vec<f64>) {
        let (r, k_total) = (g.rows(), self.total);
        let mut are = vec![0.0; r * k_total];
        let mut aim = vec![0.0; r * k_total];
        for i in 0..r {
            let (dst_re, dst_im) = (
                &mut are[i * k_total..(i + 1) * k_total],
                &mut aim[i * k_total..(i + 1) * k_total],
            );
            for t in 0..self.dim {
                let gij = g[(i, t)];
                let sre = &self.re[t * k_total..(t + 1) * k_total];
                let sim = &self.im[t * k_total..(t + 1) * k_total];
                for k in 0..k_total {
                    dst_re[k] += gij.re * sre[k] - gij.im * sim[k];
                    dst_im[k] += gij.re * sim[k] + gij.im * sre[k];
                }
            }
        }
        (are, aim)
    }

    /// Single pass over the bank computing the MI estimate and, on request,
    /// the MMSE matrix of `d`.
    pub fn evaluate(
        &self,
        g: &ComplexMatrix,
        bank: &NoiseBank,
        with_mmse: bool,
        deadline: Option<Instant>,
    ) -> Result<Evaluation> {
        self.check(g, bank)?;
        let mut scratch = Scratch::new(g, self);
        let n = self.dim;
        let k_total = self.total;
        let inv_k = 1.0 / k_total as f64;
        let count = bank.len();

        let mut mi_sum = 0.0;
        let mut mi_sq = 0.0;
        let mut e_sum = vec![C64::new(0.0, 0.0); if with_mmse { n * n } else { 0 }];
        let mut e_sq = vec![0.0; e_sum.len()];
        let mut e_j = vec![C64::new(0.0, 0.0); e_sum.len()];
        let mut err = vec![C64::new(0.0, 0.0); n];

        for j in 0..count {
            check_deadline(deadline)?;
            let noise = bank.sample(j);
            let mut lse_acc = 0.0;
            e_j.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            for m in 0..k_total {
                if m % 64 == 63 {
                    check_deadline(deadline)?;
                }
                let lse = scratch.log_partition(m, noise);
                lse_acc += lse;
                if with_mmse {
                    scratch.posterior_error(self, m, &mut err);
                    for a in 0..n {
                        for b in 0..n {
                            e_j[a * n + b] += err[a] * err[b].conj();
                        }
                    }
                }
            }
            let v = self.bits - lse_acc * inv_k / LN_2;
            mi_sum += v;
            mi_sq += v * v;
            if with_mmse {
                for ((s, q), e) in e_sum.iter_mut().zip(&mut e_sq).zip(&e_j) {
                    let e = e * inv_k;
                    *s += e;
                    *q += e.norm_sqr();
                }
            }
        }

        let cnt = count as f64;
        let mean = mi_sum / cnt;
        let mi = MiEstimate {
            value: mean,
            std_error: std_error(mi_sum, mi_sq, count),
            method: MiMethod::MonteCarlo,
        };
        let mmse = with_mmse.then(|| {
            let matrix = ComplexMatrix::from_fn(n, n, |a, b| e_sum[a * n + b] / cnt);
            let se = e_sum
                .iter()
                .zip(&e_sq)
                .map(|(s, q)| {
                    if count < 2 {
                        return 0.0;
                    }
                    let var = (q - s.norm_sqr() / cnt) / (cnt - 1.0);
                    (var.max(0.0) / cnt).sqrt()
                })
                .collect();
            MmseEstimate { matrix, std_error: se }
        });
        Ok(Evaluation { mi, mmse })
    }

    /// MI estimate where the bank is shared out across transmitted symbols
    /// instead of being reused for each of them: symbol `m` sees
    /// `max(1, |bank| / M^n)` consecutive samples starting at
    /// `offset + m * per_symbol` (cyclically). Costs `|bank| · M^n` likelihood
    /// evaluations instead of `|bank| · M^{2n}`.
    pub fn mi_stratified(
        &self,
        g: &ComplexMatrix,
        bank: &NoiseBank,
        offset: usize,
        deadline: Option<Instant>,
    ) -> Result<MiEstimate> {
        self.check(g, bank)?;
        let mut scratch = Scratch::new(g, self);
        let count = bank.len();
        let per = (count / self.total).max(1);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut strata = 0.0;
        for m in 0..self.total {
            check_deadline(deadline)?;
            let mut acc = 0.0;
            for t in 0..per {
                let j = (offset + m * per + t) % count;
                let v = self.bits - scratch.log_partition(m, bank.sample(j)) / LN_2;
                acc += v;
                sum += v;
                sq += v * v;
            }
            strata += acc / per as f64;
        }
        // pooled variance over all terms; conservative for a stratified mean
        Ok(MiEstimate {
            value: strata / self.total as f64,
            std_error: std_error(sum, sq, self.total * per),
            method: MiMethod::MonteCarlo,
        })
    }
}

fn check_deadline(deadline: Option<Instant>) -> Result<()> {
    match deadline {
        Some(d) if Instant::now() > d => Err(Error::Timeout { seconds: 0.0 }),
        _ => Ok(()),
    }
}

fn std_error(sum: f64, sq: f64, count: usize) -> f64 {
    if count < 2 {
        return 0.0;
    }
    let c = count as f64;
    let var = (sq - sum * sum / c) / (c - 1.0);
    (var.max(0.0) / c).sqrt()
}

/// Four-way unrolled sum; lets the compiler keep independent accumulators.
fn sum4(x: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = x.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest.iter().sum::<f64>()
}

/// Branch-free `exp` so the caller's loop vectorizes. Range reduction
/// `x = k ln2 + r`, `|r| <= ln2/2`, then a degree-12 Taylor polynomial
/// (truncation below 2e-16 relative). The argument is clamped to `±700`.
#[inline(always)]
fn exp_clamped(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-700.0, 700.0);
    let t = x * std::f64::consts::LOG2_E + MAGIC;
    let kf = t - MAGIC;
    let r = x - kf * LN2_HI - kf * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k = t.to_bits().wrapping_sub(MAGIC.to_bits());
    let scale = f64::from_bits(k.wrapping_add(1023) << 52);
    p * scale
}

/// Per-evaluation buffers.
struct Scratch {
    rows: usize,
    total: usize,
    are: Vec<f64>,
    aim: Vec<f64>,
    dist: Vec<f64>,
}

impl Scratch {
    fn new(g: &ComplexMatrix, table: &SymbolTable) -> Self {
        let (are, aim) = table.outputs(g);
        Self {
            rows: g.rows(),
            total: table.total,
            are,
            aim,
            dist: vec![0.0; table.total],
        }
    }

    /// `ln Σ_k exp(‖n‖² - ‖G(d_m - d_k) + n‖²)`. Leaves the unnormalized
    /// weights in `self.dist`.
    fn log_partition(&mut self, m: usize, noise: &[C64]) -> f64 {
        let k_total = self.total;
        let dist = &mut self.dist;
        let mut nn = 0.0;
        for i in 0..self.rows {
            let row_re = &self.are[i * k_total..(i + 1) * k_total];
            let row_im = &self.aim[i * k_total..(i + 1) * k_total];
            let yr = row_re[m] + noise[i].re;
            let yi = row_im[m] + noise[i].im;
            nn += noise[i].norm_sqr();
            if i == 0 {
                for ((d, &ar), &ai) in dist.iter_mut().zip(row_re).zip(row_im) {
                    let (dr, di) = (yr - ar, yi - ai);
                    *d = dr * dr + di * di;
                }
            } else {
                for ((d, &ar), &ai) in dist.iter_mut().zip(row_re).zip(row_im) {
                    let (dr, di) = (yr - ar, yi - ai);
                    *d += dr * dr + di * di;
                }
            }
        }
        // the k = m term is exp(0) = 1, so the sum never underflows
        for d in dist.iter_mut() {
            *d = exp_clamped(nn - *d);
        }
        sum4(dist).ln()
    }

    /// `d_m - E[d | z]` using the weights left by `log_partition`.
    fn posterior_error(&self, table: &SymbolTable, m: usize, out: &mut [C64]) {
        let k_total = self.total;
        let w = &self.dist;
        let norm = sum4(w);
        for (t, o) in out.iter_mut().enumerate() {
            let sre = &table.re[t * k_total..(t + 1) * k_total];
            let sim = &table.im[t * k_total..(t + 1) * k_total];
            let mut hr = 0.0;
            let mut hi = 0.0;
            for k in 0..k_total {
                hr += w[k] * sre[k];
                hi += w[k] * sim[k];
            }
            *o = C64::new(sre[m] - hr / norm, sim[m] - hi / norm);
        }
    }
}

/// Mutual information `I(d; G d + n)` in bits.
pub fn mi_discrete(
    g: &ComplexMatrix,
    c: &Constellation,
    n: usize,
    bank: &NoiseBank,
) -> Result<MiEstimate> {
    Ok(SymbolTable::new(c, n)?.evaluate(g, bank, false, None)?.mi)
}

/// MMSE matrix `E[(d - d̂)(d - d̂)^H]` of the conditional-mean estimate.
pub fn mmse_matrix(
    g: &ComplexMatrix,
    c: &Constellation,
    n: usize,
    bank: &NoiseBank,
) -> Result<MmseEstimate> {
    let eval = SymbolTable::new(c, n)?.evaluate(g, bank, true, None)?;
    Ok(eval.mmse.expect("requested"))
}

/// `Ω_s = Λ_s V_s E_s V_s^H Λ_s^H` for real diagonal `Λ_s` given by its
/// diagonal entries.
pub fn stream_mmse_to_omega(
    lambda_s: &[f64],
    v_s: &ComplexMatrix,
    e_s: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    let n = lambda_s.len();
    if v_s.rows() != n || v_s.cols() != n || e_s.rows() != n || e_s.cols() != n {
        return Err(Error::dim(format!(
            "stream width {n} does not match V ({}x{}) and E ({}x{})",
            v_s.rows(),
            v_s.cols(),
            e_s.rows(),
            e_s.cols()
        )));
    }
    let lv = v_s.scale_rows(lambda_s);
    Ok(&(&lv * e_s) * &lv.adjoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::Modulation;

    fn scalar(g: f64) -> ComplexMatrix {
        ComplexMatrix::from_real(1, 1, &[g]).unwrap()
    }

    #[test]
    fn zero_channel_carries_nothing() {
        let bank = NoiseBank::generate(2, 200, 1);
        for m in [Modulation::Bpsk, Modulation::Qpsk] {
            let c = Constellation::new(m);
            let g = ComplexMatrix::zeros(2, 2);
            let v = mi_discrete(&g, &c, 2, &bank).unwrap();
            assert!(v.value.abs() < 1e-12, "{m}: {}", v.value);
            let e = mmse_matrix(&g, &c, 2, &bank).unwrap();
            assert!((&e.matrix - &ComplexMatrix::identity(2)).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn strong_channel_saturates() {
        let bank = NoiseBank::generate(1, 500, 2);
        let c = Constellation::new(Modulation::Qpsk);
        let v = mi_discrete(&scalar(1e3), &c, 1, &bank).unwrap();
        assert!((v.value - 2.0).abs() < 1e-3);
        for m in [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16] {
            let c = Constellation::new(m);
            let e = mmse_matrix(&scalar(1e3), &c, 1, &bank).unwrap();
            assert!(e.matrix.max_abs() <= 1e-6);
        }
    }

    #[test]
    fn shape_and_bank_errors() {
        let c = Constellation::new(Modulation::Bpsk);
        let bank = NoiseBank::generate(2, 10, 0);
        let g = ComplexMatrix::zeros(2, 3);
        assert!(matches!(mi_discrete(&g, &c, 2, &bank), Err(Error::Dimension(_))));
        let g = ComplexMatrix::zeros(3, 2);
        assert!(matches!(mi_discrete(&g, &c, 2, &bank), Err(Error::Dimension(_))));
        let empty = NoiseBank::from_samples(2, vec![]).unwrap();
        let g = ComplexMatrix::zeros(2, 2);
        assert!(matches!(mi_discrete(&g, &c, 2, &empty), Err(Error::Config(_))));
        let q = Constellation::new(Modulation::Qam16);
        let bank = NoiseBank::generate(6, 1, 0);
        let g = ComplexMatrix::zeros(6, 6);
        assert!(matches!(mi_discrete(&g, &q, 6, &bank), Err(Error::Capacity(_))));
    }

    #[test]
    fn omega_examples() {
        let e = ComplexMatrix::from_real(2, 2, &[0.3, 0.1, 0.1, 0.2]).unwrap();
        let id = ComplexMatrix::identity(2);
        let om = stream_mmse_to_omega(&[1.0, 1.0], &id, &e).unwrap();
        assert!((&om - &e).frobenius_norm() < 1e-15);
        let z = stream_mmse_to_omega(&[1.3, 0.2], &id, &ComplexMatrix::zeros(2, 2)).unwrap();
        assert_eq!(z.frobenius_norm(), 0.0);
        assert!(stream_mmse_to_omega(&[1.0], &id, &e).is_err());
    }

    #[test]
    fn noise_bank_moments() {
        let bank = NoiseBank::generate(3, 4000, 11);
        let bound = 4.0 / (bank.len() as f64).sqrt();
        for m in bank.mean() {
            assert!(m.re.abs() <= bound && m.im.abs() <= bound);
        }
        let power: f64 = (0..bank.len())
            .map(|j| bank.sample(j).iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / bank.len() as f64;
        assert!((power - 3.0).abs() < 0.15);
    }

    #[test]
    fn stratified_agrees_with_full_pass() {
        let c = Constellation::new(Modulation::Qpsk);
        let table = SymbolTable::new(&c, 2).unwrap();
        let g = ComplexMatrix::from_real(2, 2, &[0.9, 0.2, -0.1, 0.6]).unwrap();
        let bank = NoiseBank::generate(2, 20000, 4);
        let full = table.evaluate(&g, &bank, false, None).unwrap().mi;
        let strat = table.mi_stratified(&g, &bank, 0, None).unwrap();
        let tol = 3.0 * (full.std_error.powi(2) + strat.std_error.powi(2)).sqrt();
        assert!((full.value - strat.value).abs() < tol, "{full:?} {strat:?}");
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut x = 720.0;
        while x > -720.0 {
            let (a, b) = (exp_clamped(x), x.clamp(-700.0, 700.0).exp());
            assert!((a - b).abs() <= 4e-16 * b, "{x}: {a} vs {b}");
            x -= 0.0137;
        }
        assert_eq!(exp_clamped(0.0), 1.0);
    }

    #[test]
    fn deadline_interrupts() {
        let c = Constellation::new(Modulation::Bpsk);
        let table = SymbolTable::new(&c, 1).unwrap();
        let bank = NoiseBank::generate(1, 10, 0);
        let past = Instant::now() - std::time::Duration::from_secs(1);
        let r = table.evaluate(&scalar(1.0), &bank, false, Some(past));
        assert!(matches!(r, Err(Error::Timeout { .. })));
    }
}
