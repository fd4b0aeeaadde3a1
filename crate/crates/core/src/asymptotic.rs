//! Large-system surrogate for the ergodic MI of a structured precoder.
//!
//! With `Ξ = γ Λ_T` and `R = ψ Λ_R`, the auxiliaries solve
//!
//! ```text
//! ψ = tr(Ω Λ_T),   γ = tr((I + ψ Λ_R)^{-1} Λ_R)
//! ```
//!
//! where `Ω` is the block-diagonal MMSE matrix of `x = Λ_B V_B d` seen
//! through the diagonal channel `Ξ^{1/2}`. The surrogate is
//!
//! ```text
//! I_asy = Σ_s I(d_s; Ξ_s^{1/2} Λ_s V_s d_s + n) + log2 det(I + R) − γ ψ log2 e
//! ```
//!
//! Traces are unnormalized. `I_asy` is stationary in `(γ, ψ)` at the fixed
//! point, so fixed-point error only enters it at second order.

use std::time::Instant;

use rayon::prelude::*;

use crate::channel::ChannelStats;
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::mi::{stream_mmse_to_omega, Evaluation, NoiseBank, SymbolTable};
use crate::precoder::StructuredPrecoder;
use crate::tol;

const LOG2_E: f64 = std::f64::consts::LOG2_E;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedPointMethod {
    /// Damped Picard sweeps `γ ← (1−α)γ + α F(γ)`, likewise for `ψ`.
    Picard,
    /// Secant steps on `F(γ) − γ`, kept inside the bracket `[0, tr Λ_R]`
    /// narrowed by every evaluation, falling back to the plain Picard point
    /// or bisection.
    Secant,
}

#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    pub method: FixedPointMethod,
    pub tol: f64,
    pub max_iter: usize,
    /// Picard damping `α`; halved after three sign flips of the `γ` update.
    pub damping: f64,
    /// Starting `(γ, ψ)`; defaults to `(tr Λ_R, 0)`.
    pub warm_start: Option<(f64, f64)>,
    pub deadline: Option<Instant>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            method: FixedPointMethod::Picard,
            tol: tol::FIXED_POINT,
            max_iter: tol::FIXED_POINT_MAX_ITER,
            damping: 0.5,
            warm_start: None,
            deadline: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointState {
    pub gamma: f64,
    pub psi: f64,
    /// Diagonal of `Ξ = γ Λ_T`.
    pub xi: Vec<f64>,
    /// Diagonal of `R = ψ Λ_R`.
    pub r: Vec<f64>,
    pub omega: ComplexMatrix,
    pub iterations: usize,
    /// `|Δγ| + |Δψ|` of the last sweep.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticMi {
    pub total: f64,
    pub term_mi: f64,
    pub term_logdet: f64,
    pub term_correction: f64,
    /// Sum of the per-stream Monte-Carlo standard errors.
    pub std_error: f64,
}

impl AsymptoticMi {
    pub fn assemble(gamma: f64, psi: f64, lambda_r: &[f64], term_mi: f64, std_error: f64) -> Self {
        let term_logdet: f64 = lambda_r.iter().map(|l| (psi * l).ln_1p()).sum::<f64>() * LOG2_E;
        let term_correction = gamma * psi * LOG2_E;
        Self {
            total: term_mi + term_logdet - term_correction,
            term_mi,
            term_logdet,
            term_correction,
            std_error,
        }
    }
}

/// Evaluation context shared by every surrogate computation of one run:
/// channel statistics, the stream-width symbol table and a frozen noise bank.
#[derive(Debug)]
pub struct Surrogate<'a> {
    stats: &'a ChannelStats,
    table: SymbolTable,
    bank: &'a NoiseBank,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        stats: &'a ChannelStats,
        c: &Constellation,
        n_s: usize,
        bank: &'a NoiseBank,
    ) -> Result<Self> {
        if bank.dim() != n_s {
            return Err(Error::dim(format!(
                "noise bank has dimension {}, streams have width {n_s}",
                bank.dim()
            )));
        }
        Ok(Self {
            stats,
            table: SymbolTable::new(c, n_s)?,
            bank,
        })
    }

    pub fn stats(&self) -> &ChannelStats {
        self.stats
    }

    pub fn bank(&self) -> &NoiseBank {
        self.bank
    }

    fn check(&self, pre: &StructuredPrecoder) -> Result<()> {
        if pre.n_t() != self.stats.n_t || pre.width() != self.table.dim() {
            return Err(Error::dim(format!(
                "precoder ({} inputs, width {}) does not fit the surrogate ({} inputs, width {})",
                pre.n_t(),
                pre.width(),
                self.stats.n_t,
                self.table.dim()
            )));
        }
        Ok(())
    }

    /// Per-stream `diag(Ξ_s)` for a given `γ`.
    pub fn stream_xi(&self, pre: &StructuredPrecoder, gamma: f64) -> Vec<Vec<f64>> {
        (0..pre.streams())
            .map(|s| {
                pre.stream_perm(s)
                    .iter()
                    .map(|&l| gamma * self.stats.lambda_t[l])
                    .collect()
            })
            .collect()
    }

    /// Per-stream effective channels `Ξ_s^{1/2} Λ_s V_s`.
    pub fn stream_gains(&self, pre: &StructuredPrecoder, gamma: f64) -> Vec<ComplexMatrix> {
        self.stream_xi(pre, gamma)
            .iter()
            .enumerate()
            .map(|(s, xi)| {
                let d: Vec<f64> = xi
                    .iter()
                    .zip(pre.stream_power(s))
                    .map(|(x, p)| (x * p).sqrt())
                    .collect();
                pre.mixer(s).scale_rows(&d)
            })
            .collect()
    }

    /// MI (and optionally MMSE) of every stream at `γ`, in stream order.
    pub fn evaluate(
        &self,
        pre: &StructuredPrecoder,
        gamma: f64,
        with_mmse: bool,
        deadline: Option<Instant>,
    ) -> Result<Vec<Evaluation>> {
        self.check(pre)?;
        self.stream_gains(pre, gamma)
            .par_iter()
            .map(|g| self.table.evaluate(g, self.bank, with_mmse, deadline))
            .collect()
    }

    /// `tr(Ω Λ_T)` from per-stream MMSE matrices.
    fn psi_of(&self, pre: &StructuredPrecoder, evals: &[Evaluation]) -> f64 {
        let mut psi = 0.0;
        for (s, ev) in evals.iter().enumerate() {
            let e = &ev.mmse.as_ref().expect("MMSE requested").matrix;
            let v = pre.mixer(s);
            for (i, (&l, p)) in pre.stream_perm(s).iter().zip(pre.stream_power(s)).enumerate() {
                let vev_ii: f64 = (0..v.cols())
                    .flat_map(|a| (0..v.cols()).map(move |b| (a, b)))
                    .map(|(a, b)| (v[(i, a)] * e[(a, b)] * v[(i, b)].conj()).re)
                    .sum();
                psi += p * vev_ii * self.stats.lambda_t[l];
            }
        }
        psi
    }

    fn gamma_of(&self, psi: f64) -> f64 {
        self.stats.lambda_r.iter().map(|l| l / (1.0 + psi * l)).sum()
    }

    /// Solves for `(γ, ψ)` with the method in `opts`.
    pub fn solve(&self, pre: &StructuredPrecoder, opts: &FixedPointOptions) -> Result<FixedPointState> {
        self.solve_with_evaluations(pre, opts).map(|(st, _)| st)
    }

    /// As [`Surrogate::solve`], also returning the per-stream MI and MMSE at
    /// the returned `γ`.
    pub fn solve_with_evaluations(
        &self,
        pre: &StructuredPrecoder,
        opts: &FixedPointOptions,
    ) -> Result<(FixedPointState, Vec<Evaluation>)> {
        self.check(pre)?;
        if !(opts.tol > 0.0) || opts.max_iter == 0 || !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::config(
                "fixed point needs tol > 0, max_iter >= 1 and damping in (0, 1]",
            ));
        }
        let (mut gamma, mut psi) = opts.warm_start.unwrap_or((self.stats.trace_r(), 0.0));
        let mut alpha = opts.damping;
        let mut flips = 0;
        let mut last_sign = 0.0;
        // secant state: bracket on γ and the previous (γ, F(γ) − γ)
        let (mut lo, mut hi) = (0.0, self.stats.trace_r());
        let mut prev: Option<(f64, f64)> = None;
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let evals = self.evaluate(pre, gamma, true, opts.deadline)?;
            let psi_new = self.psi_of(pre, &evals);
            let gamma_new = self.gamma_of(psi_new);
            residual = (gamma_new - gamma).abs() + (psi_new - psi).abs();
            // a dead receive side pins γ = 0, so one evaluation settles ψ
            if self.stats.trace_r() == 0.0 {
                return Ok((self.finish(pre, 0.0, psi_new, it, 0.0, &evals)?, evals));
            }
            if residual <= opts.tol {
                return Ok((self.finish(pre, gamma, psi_new, it, residual, &evals)?, evals));
            }
            match opts.method {
                FixedPointMethod::Picard => {
                    let sign = (gamma_new - gamma).signum();
                    if last_sign != 0.0 && sign != last_sign {
                        flips += 1;
                        if flips == 3 {
                            alpha *= 0.5;
                            flips = 0;
                        }
                    }
                    last_sign = sign;
                    psi += alpha * (psi_new - psi);
                    gamma += alpha * (gamma_new - gamma);
                }
                FixedPointMethod::Secant => {
                    psi = psi_new;
                    let h = gamma_new - gamma;
                    if h > 0.0 {
                        lo = gamma.max(lo);
                    } else {
                        hi = gamma.min(hi);
                    }
                    let secant = prev
                        .filter(|&(g0, h0)| h != h0 && g0 != gamma)
                        .map(|(g0, h0)| gamma - h * (gamma - g0) / (h - h0));
                    prev = Some((gamma, h));
                    let inside = |x: f64| x.is_finite() && x > lo && x < hi;
                    gamma = match secant {
                        Some(x) if inside(x) => x,
                        _ if inside(gamma_new) => gamma_new,
                        _ => 0.5 * (lo + hi),
                    };
                }
            }
        }
        Err(Error::Convergence {
            iterations: opts.max_iter,
            residual,
        })
    }

    fn finish(
        &self,
        pre: &StructuredPrecoder,
        gamma: f64,
        psi: f64,
        iterations: usize,
        residual: f64,
        evals: &[Evaluation],
    ) -> Result<FixedPointState> {
        let e: Vec<ComplexMatrix> = evals
            .iter()
            .map(|ev| ev.mmse.as_ref().expect("MMSE requested").matrix.clone())
            .collect();
        Ok(FixedPointState {
            gamma,
            psi,
            xi: self.stats.lambda_t.iter().map(|l| gamma * l).collect(),
            r: self.stats.lambda_r.iter().map(|l| psi * l).collect(),
            omega: assemble_omega(pre, &e)?,
            iterations,
            residual,
        })
    }

    /// `I_asy` at a solved fixed point.
    pub fn asymptotic_mi(&self, state: &FixedPointState, pre: &StructuredPrecoder) -> Result<AsymptoticMi> {
        let evals = self.evaluate(pre, state.gamma, false, None)?;
        Ok(self.assemble(state.gamma, state.psi, &evals))
    }

    pub fn assemble(&self, gamma: f64, psi: f64, evals: &[Evaluation]) -> AsymptoticMi {
        let term_mi = evals.iter().map(|e| e.mi.value).sum();
        let se = evals.iter().map(|e| e.mi.std_error).sum();
        AsymptoticMi::assemble(gamma, psi, &self.stats.lambda_r, term_mi, se)
    }
}

/// `Ω_eq`: the per-stream `Λ_s V_s E_s V_s^H Λ_s` scattered to the stream's
/// eigen-directions, zero elsewhere.
pub fn assemble_omega(pre: &StructuredPrecoder, e_s: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    if e_s.len() != pre.streams() {
        return Err(Error::dim(format!(
            "{} MMSE matrices for {} streams",
            e_s.len(),
            pre.streams()
        )));
    }
    let n_t = pre.n_t();
    let mut omega = ComplexMatrix::zeros(n_t, n_t);
    for (s, e) in e_s.iter().enumerate() {
        let w = stream_mmse_to_omega(&pre.amplitudes(s), pre.mixer(s), e)?;
        let idx = pre.stream_perm(s);
        for (a, &r) in idx.iter().enumerate() {
            for (b, &c) in idx.iter().enumerate() {
                omega[(r, c)] = w[(a, b)];
            }
        }
    }
    Ok(omega)
}

pub fn solve_fixed_point(
    stats: &ChannelStats,
    pre: &StructuredPrecoder,
    c: &Constellation,
    bank: &NoiseBank,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointState> {
    let opts = FixedPointOptions {
        tol,
        max_iter,
        ..FixedPointOptions::default()
    };
    Surrogate::new(stats, c, pre.width(), bank)?.solve(pre, &opts)
}

pub fn asymptotic_mi(
    state: &FixedPointState,
    stats: &ChannelStats,
    pre: &StructuredPrecoder,
    c: &Constellation,
    bank: &NoiseBank,
) -> Result<AsymptoticMi> {
    Surrogate::new(stats, c, pre.width(), bank)?.asymptotic_mi(state, pre)
}

/// Per-stream `diag(Ξ_s)` picked out of `Ξ_eq` by the permutation.
pub fn surrogate_channel_gains(state: &FixedPointState, pre: &StructuredPrecoder) -> Result<Vec<Vec<f64>>> {
    if state.xi.len() != pre.n_t() {
        return Err(Error::dim(format!(
            "state has {} gains, precoder {} inputs",
            state.xi.len(),
            pre.n_t()
        )));
    }
    Ok((0..pre.streams())
        .map(|s| pre.stream_perm(s).iter().map(|&l| state.xi[l]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rng_stream;
    use crate::constellation::Modulation;

    fn qpsk() -> Constellation {
        Constellation::new(Modulation::Qpsk)
    }

    #[test]
    fn zero_power_is_exact() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.5).unwrap();
        let pre = StructuredPrecoder::uniform(vec![0, 1, 2, 3], 2, 0.0).unwrap();
        let bank = NoiseBank::generate(2, 200, 1);
        let st = solve_fixed_point(&stats, &pre, &qpsk(), &bank, 1e-12, 10).unwrap();
        assert_eq!(st.iterations, 1);
        assert_eq!(st.psi, 0.0);
        assert_eq!(st.gamma, stats.trace_r());
        assert_eq!(st.omega.max_abs(), 0.0);
        let mi = asymptotic_mi(&st, &stats, &pre, &qpsk(), &bank).unwrap();
        assert_eq!(mi.total, 0.0);
    }

    #[test]
    fn zero_channel_is_exact() {
        let stats = ChannelStats::from_parts(
            ComplexMatrix::identity(2),
            vec![0.0, 0.0],
            ComplexMatrix::identity(2),
            vec![1.5, 0.5],
        );
        let pre = StructuredPrecoder::uniform(vec![0, 1], 2, 2.0).unwrap();
        let bank = NoiseBank::generate(2, 100, 1);
        let st = solve_fixed_point(&stats, &pre, &qpsk(), &bank, 1e-12, 10).unwrap();
        assert_eq!(st.iterations, 1);
        assert_eq!((st.gamma, st.psi), (2.0, 0.0));
        // E = I, so Ω = Λ_B V_B V_B^H Λ_B
        let expect = ComplexMatrix::from_diag(&[1.0, 1.0]);
        assert!((&st.omega - &expect).max_abs() < 1e-15);
    }

    #[test]
    fn stream_gains_follow_permutation() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.0).unwrap();
        let pre = StructuredPrecoder::uniform(vec![0, 3, 1, 2], 2, 4.0).unwrap();
        let bank = NoiseBank::generate(2, 100, 1);
        let st = solve_fixed_point(&stats, &pre, &qpsk(), &bank, 1e-9, 500).unwrap();
        let g = surrogate_channel_gains(&st, &pre).unwrap();
        assert_eq!(g[0], vec![st.xi[0], st.xi[3]]);
        assert_eq!(g[1], vec![st.xi[1], st.xi[2]]);
        let total: f64 = g.iter().flatten().sum();
        assert!((total - st.xi.iter().sum::<f64>()).abs() < 1e-12);
        for (x, l) in st.xi.iter().zip(&stats.lambda_t) {
            assert!((x - st.gamma * l).abs() < 1e-10);
        }
    }

    #[test]
    fn omega_is_block_sparse() {
        let mut rng = rng_stream(3, 0);
        let stats = ChannelStats::exponential(4, 4, 0.8, 0.2).unwrap();
        let pre = StructuredPrecoder::random(vec![2, 0, 3, 1], 2, 3.0, &mut rng).unwrap();
        let bank = NoiseBank::generate(2, 200, 2);
        let st = solve_fixed_point(&stats, &pre, &qpsk(), &bank, 1e-9, 500).unwrap();
        let group = |l: usize| pre.perm().iter().position(|&x| x == l).unwrap() / 2;
        for r in 0..4 {
            for c in 0..4 {
                if group(r) != group(c) {
                    assert_eq!(st.omega[(r, c)].norm(), 0.0);
                } else {
                    assert!(st.omega[(r, r)].re > 0.0);
                }
            }
        }
        assert!(st.residual <= 1e-9);
        assert!(st.omega.hermitian_defect() < 1e-12);
    }

    #[test]
    fn stationary_in_auxiliaries() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.9).unwrap();
        let pre = StructuredPrecoder::uniform(vec![0, 3, 1, 2], 2, 3.0).unwrap();
        let bank = NoiseBank::generate(2, 400, 9);
        let sur = Surrogate::new(&stats, &qpsk(), 2, &bank).unwrap();
        let st = sur.solve(&pre, &FixedPointOptions::default()).unwrap();
        let at = |g: f64, p: f64| sur.assemble(g, p, &sur.evaluate(&pre, g, false, None).unwrap()).total;
        let base = at(st.gamma, st.psi);
        let h = 1e-4;
        let dg = (at(st.gamma + h, st.psi) - at(st.gamma - h, st.psi)) / (2.0 * h);
        let dp = (at(st.gamma, st.psi + h) - at(st.gamma, st.psi - h)) / (2.0 * h);
        // ∂/∂γ cancels the MMSE-based ψ against the slope of the sampled MI,
        // which agree only to Monte-Carlo accuracy
        assert!(dg.abs() < 1e-2 * st.psi * LOG2_E, "{base} {dg}");
        assert!(dp.abs() < 1e-6, "{base} {dp}");
    }

    #[test]
    fn secant_matches_picard() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.9).unwrap();
        let mut rng = rng_stream(8, 0);
        let bank = NoiseBank::generate(2, 300, 4);
        let sur = Surrogate::new(&stats, &qpsk(), 2, &bank).unwrap();
        for p in [0.1, 3.0, 30.0] {
            let pre = StructuredPrecoder::random(vec![0, 3, 1, 2], 2, p, &mut rng).unwrap();
            let picard = sur.solve(&pre, &FixedPointOptions::default()).unwrap();
            let secant = sur
                .solve(
                    &pre,
                    &FixedPointOptions {
                        method: FixedPointMethod::Secant,
                        ..Default::default()
                    },
                )
                .unwrap();
            assert!((picard.gamma - secant.gamma).abs() < 1e-8, "{p}");
            assert!((picard.psi - secant.psi).abs() < 1e-8, "{p}");
            assert!(secant.iterations < picard.iterations);
        }
    }

    #[test]
    fn warm_start_and_errors() {
        let stats = ChannelStats::exponential(4, 4, 0.5, 0.5).unwrap();
        let pre = StructuredPrecoder::uniform(vec![0, 1, 2, 3], 2, 10.0).unwrap();
        let bank = NoiseBank::generate(2, 100, 4);
        let sur = Surrogate::new(&stats, &qpsk(), 2, &bank).unwrap();
        let cold = sur.solve(&pre, &FixedPointOptions::default()).unwrap();
        let warm = sur
            .solve(
                &pre,
                &FixedPointOptions {
                    warm_start: Some((cold.gamma, cold.psi)),
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(warm.iterations < cold.iterations);
        assert!((warm.gamma - cold.gamma).abs() < 1e-8);
        let short = FixedPointOptions {
            max_iter: 2,
            ..Default::default()
        };
        assert!(matches!(sur.solve(&pre, &short), Err(Error::Convergence { iterations: 2, .. })));
        assert!(Surrogate::new(&stats, &qpsk(), 4, &bank).is_err());
        let wide = StructuredPrecoder::uniform(vec![0, 1, 2, 3], 4, 1.0).unwrap();
        assert!(sur.solve(&wide, &FixedPointOptions::default()).is_err());
    }
}
