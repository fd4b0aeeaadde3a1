//! Gradient ascent on `{Λ_s², V_s}` with backtracking, power normalization,
//! unitary retraction, fixed-point refresh and random restarts.

use std::time::Instant;

use rayon::prelude::*;

use super::{axpy, gradients, normalize_power, pair_subchannels, real_inner, StructuredPrecoder};
use crate::asymptotic::{AsymptoticMi, FixedPointMethod, FixedPointOptions, FixedPointState, Surrogate};
use crate::channel::{rng_stream, ChannelStats};
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::linalg::{polar_retract, ComplexMatrix};
use crate::mi::{Evaluation, NoiseBank};

/// Stream ids for restart initializations.
const RESTART_STREAM: u64 = 0x7265_7374_0000_0000;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Stop once an iteration improves `I_asy` by no more than this (bits).
    pub epsilon: f64,
    pub restarts: usize,
    pub armijo_c1: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    /// Step tried on the first iteration; later line searches start at twice
    /// the previously accepted step.
    pub initial_step: f64,
    pub seed: u64,
    /// Noise samples per stream evaluation during optimization.
    pub bank_size: usize,
    pub fixed_point_method: FixedPointMethod,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
    pub deadline: Option<Instant>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            epsilon: 1e-4,
            restarts: 3,
            armijo_c1: 1e-4,
            armijo_shrink: 0.5,
            max_backtracks: 20,
            initial_step: 1.0,
            seed: 0,
            bank_size: 500,
            fixed_point_method: FixedPointMethod::Secant,
            fixed_point_tol: 1e-7,
            fixed_point_max_iter: crate::tol::FIXED_POINT_MAX_ITER,
            deadline: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.max_iter == 0 {
            bad.push("max_iter must be >= 1");
        }
        if !(self.epsilon >= 0.0) {
            bad.push("epsilon must be >= 0");
        }
        if self.restarts == 0 {
            bad.push("restarts must be >= 1");
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            bad.push("armijo_c1 must lie in (0, 1)");
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            bad.push("armijo_shrink must lie in (0, 1)");
        }
        if !(self.initial_step > 0.0) {
            bad.push("initial_step must be > 0");
        }
        if self.bank_size == 0 {
            bad.push("bank_size must be >= 1");
        }
        if !(self.fixed_point_tol > 0.0) || self.fixed_point_max_iter == 0 {
            bad.push("fixed point tolerance and sweep limit must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    fn fixed_point(&self, warm_start: Option<(f64, f64)>) -> FixedPointOptions {
        FixedPointOptions {
            method: self.fixed_point_method,
            tol: self.fixed_point_tol,
            max_iter: self.fixed_point_max_iter,
            warm_start,
            deadline: self.deadline,
            ..FixedPointOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub i_asy: f64,
    pub std_error: f64,
    /// Accepted step for the power update, 0 when no step was accepted.
    pub step_power: f64,
    pub step_mixer: f64,
    /// Fraction of the proposed move kept after the post-refresh check.
    pub blend: f64,
    pub fp_residual: f64,
    pub fp_sweeps: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// Improvement fell to `epsilon` or below.
    Converged,
    MaxIterations,
}

/// One restart of the ascent, advanced an iteration at a time.
pub struct Optimizer<'s, 'a> {
    sur: &'s Surrogate<'a>,
    cfg: OptimizerConfig,
    pre: StructuredPrecoder,
    state: FixedPointState,
    evals: Vec<Evaluation>,
    value: AsymptoticMi,
    step_power: f64,
    step_mixer: f64,
    iteration: usize,
    records: Vec<IterationRecord>,
    started: Instant,
    done: Option<StepOutcome>,
}

impl<'s, 'a> Optimizer<'s, 'a> {
    /// Solves the initial fixed point and records iteration 0.
    pub fn new(sur: &'s Surrogate<'a>, pre: StructuredPrecoder, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let started = Instant::now();
        let (state, evals) = sur.solve_with_evaluations(&pre, &cfg.fixed_point(None))?;
        let value = sur.assemble(state.gamma, state.psi, &evals);
        let records = vec![IterationRecord {
            iteration: 0,
            i_asy: value.total,
            std_error: value.std_error,
            step_power: 0.0,
            step_mixer: 0.0,
            blend: 1.0,
            fp_residual: state.residual,
            fp_sweeps: state.iterations,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        }];
        Ok(Self {
            sur,
            step_power: cfg.initial_step / 2.0,
            step_mixer: cfg.initial_step / 2.0,
            cfg,
            pre,
            state,
            evals,
            value,
            iteration: 0,
            records,
            started,
            done: None,
        })
    }

    pub fn precoder(&self) -> &StructuredPrecoder {
        &self.pre
    }

    pub fn value(&self) -> &AsymptoticMi {
        &self.value
    }

    pub fn state(&self) -> &FixedPointState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn outcome(&self) -> Option<StepOutcome> {
        self.done
    }

    fn surrogate_mi(&self, pre: &StructuredPrecoder) -> Result<(f64, Vec<Evaluation>)> {
        let ev = self.sur.evaluate(pre, self.state.gamma, true, self.cfg.deadline)?;
        Ok((ev.iter().map(|e| e.mi.value).sum(), ev))
    }

    fn mmse(evals: &[Evaluation]) -> Vec<ComplexMatrix> {
        evals
            .iter()
            .map(|e| e.mmse.as_ref().expect("MMSE requested").matrix.clone())
            .collect()
    }

    /// Projected Armijo search on `Λ²` with `γ` frozen.
    fn power_step(
        &mut self,
        pre: &StructuredPrecoder,
        f0: f64,
        evals: Vec<Evaluation>,
    ) -> Result<(StructuredPrecoder, f64, Vec<Evaluation>)> {
        let xi = self.sur.stream_xi(pre, self.state.gamma);
        let g = gradients(pre, &xi, &Self::mmse(&evals))?.power;
        let total = pre.total_power();
        let mut t = 2.0 * self.step_power;
        for _ in 0..=self.cfg.max_backtracks {
            let moved: Vec<f64> = pre.power().iter().zip(&g).map(|(p, d)| p + t * d).collect();
            let power = normalize_power(&moved, total);
            let slope: f64 = g.iter().zip(power.iter().zip(pre.power())).map(|(d, (a, b))| d * (a - b)).sum();
            if slope > 0.0 {
                let mut trial = pre.clone();
                trial.set_power(power);
                let (f, ev) = self.surrogate_mi(&trial)?;
                if f >= f0 + self.cfg.armijo_c1 * slope {
                    self.step_power = t;
                    return Ok((trial, f, ev));
                }
            }
            t *= self.cfg.armijo_shrink;
        }
        Ok((pre.clone(), f0, evals))
    }

    /// Armijo search on the mixers along `V + t ∇`, retracted to unitary.
    fn mixer_step(
        &mut self,
        pre: &StructuredPrecoder,
        f0: f64,
        evals: &[Evaluation],
    ) -> Result<(StructuredPrecoder, f64)> {
        if pre.width() == 1 {
            return Ok((pre.clone(), 0.0));
        }
        let xi = self.sur.stream_xi(pre, self.state.gamma);
        let g = gradients(pre, &xi, &Self::mmse(evals))?.mixers;
        let mut t = 2.0 * self.step_mixer;
        'search: for _ in 0..=self.cfg.max_backtracks {
            let mut v = Vec::with_capacity(g.len());
            let mut slope = 0.0;
            for (vs, gs) in pre.mixers().iter().zip(&g) {
                let Ok(q) = polar_retract(&axpy(vs, t, gs)) else {
                    t *= self.cfg.armijo_shrink;
                    continue 'search;
                };
                slope += real_inner(gs, &(&q - vs));
                v.push(q);
            }
            if slope > 0.0 {
                let mut trial = pre.clone();
                trial.set_mixers(v);
                let ev = self.sur.evaluate(&trial, self.state.gamma, false, self.cfg.deadline)?;
                let f: f64 = ev.iter().map(|e| e.mi.value).sum();
                if f >= f0 + self.cfg.armijo_c1 * slope {
                    self.step_mixer = t;
                    return Ok((trial, t));
                }
            }
            t *= self.cfg.armijo_shrink;
        }
        Ok((pre.clone(), 0.0))
    }

    /// Refreshes the fixed point for `pre`; `None` when it fails to settle.
    fn refresh(&self, pre: &StructuredPrecoder) -> Result<Option<(FixedPointState, Vec<Evaluation>)>> {
        let warm = Some((self.state.gamma, self.state.psi));
        match self.sur.solve_with_evaluations(pre, &self.cfg.fixed_point(warm)) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Convergence { iterations, residual }) => {
                log::debug!(
                    "fixed point refresh stalled at iteration {} ({iterations} sweeps, residual {residual:e})",
                    self.iteration
                );
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// One iteration: power step, mixer step, fixed-point refresh, and the
    /// stopping test. Calling it after a stop keeps iterating. A refreshed objective below the current one is pulled
    /// back toward the current iterate until it no longer decreases.
    pub fn step(&mut self) -> Result<StepOutcome> {
        self.iteration += 1;
        let old = self.pre.clone();
        let f0: f64 = self.evals.iter().map(|e| e.mi.value).sum();
        let (after_power, f1, ev1) = self.power_step(&old, f0, self.evals.clone())?;
        let step_power = if after_power == old { 0.0 } else { self.step_power };
        let (proposal, step_mixer) = self.mixer_step(&after_power, f1, &ev1)?;

        let mut blend = 1.0;
        let mut accepted = None;
        if proposal != old {
            for _ in 0..=self.cfg.max_backtracks {
                let cand = if blend == 1.0 {
                    proposal.clone()
                } else {
                    blend_precoders(&old, &proposal, blend)?
                };
                if let Some((st, ev)) = self.refresh(&cand)? {
                    let value = self.sur.assemble(st.gamma, st.psi, &ev);
                    if value.total >= self.value.total {
                        accepted = Some((cand, st, ev, value));
                        break;
                    }
                }
                blend *= 0.5;
            }
        }

        let improvement = match accepted {
            Some((pre, st, ev, value)) => {
                let gain = value.total - self.value.total;
                self.pre = pre;
                self.state = st;
                self.evals = ev;
                self.value = value;
                gain
            }
            None => {
                blend = 0.0;
                0.0
            }
        };
        self.records.push(IterationRecord {
            iteration: self.iteration,
            i_asy: self.value.total,
            std_error: self.value.std_error,
            step_power,
            step_mixer,
            blend,
            fp_residual: self.state.residual,
            fp_sweeps: self.state.iterations,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
        });
        let outcome = if improvement <= self.cfg.epsilon {
            StepOutcome::Converged
        } else if self.iteration >= self.cfg.max_iter {
            StepOutcome::MaxIterations
        } else {
            StepOutcome::Continue
        };
        self.done = (outcome != StepOutcome::Continue).then_some(outcome);
        Ok(outcome)
    }

    /// Iterates until a stopping rule fires.
    pub fn run(mut self) -> Result<RestartTrace> {
        let outcome = loop {
            match self.step()? {
                StepOutcome::Continue => {}
                done => break done,
            }
        };
        Ok(RestartTrace {
            restart: 0,
            outcome,
            value: self.value,
            state: self.state,
            precoder: self.pre,
            records: self.records,
        })
    }
}

/// `(1-θ)·a + θ·b`, with powers renormalized and mixers retracted.
fn blend_precoders(a: &StructuredPrecoder, b: &StructuredPrecoder, theta: f64) -> Result<StructuredPrecoder> {
    let mixed: Vec<f64> = a
        .power()
        .iter()
        .zip(b.power())
        .map(|(x, y)| (1.0 - theta) * x + theta * y)
        .collect();
    let mut out = a.clone();
    out.set_power(normalize_power(&mixed, a.total_power()));
    if a.width() > 1 {
        let v = a
            .mixers()
            .iter()
            .zip(b.mixers())
            .map(|(x, y)| polar_retract(&(&x.scale(1.0 - theta) + &y.scale(theta))))
            .collect::<Result<Vec<_>>>();
        // antipodal mixers have no retraction; keep the current ones
        out.set_mixers(v.unwrap_or_else(|_| a.mixers().to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RestartTrace {
    pub restart: usize,
    pub outcome: StepOutcome,
    pub value: AsymptoticMi,
    pub state: FixedPointState,
    pub precoder: StructuredPrecoder,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub restarts: Vec<RestartTrace>,
    pub best: usize,
    pub b: ComplexMatrix,
}

impl OptimizationTrace {
    pub fn best_restart(&self) -> &RestartTrace {
        &self.restarts[self.best]
    }

    pub fn precoder(&self) -> &StructuredPrecoder {
        &self.best_restart().precoder
    }

    pub fn value(&self) -> &AsymptoticMi {
        &self.best_restart().value
    }
}

/// Maximizes `I_asy` over `S` streams of width `N_s` at total power `p`.
/// Subchannels are paired once from the transmit eigenvalues (the surrogate
/// gains are a positive multiple of them), restarts run in parallel on a
/// shared noise bank, and the best final value wins (lowest index on ties).
pub fn optimize(
    stats: &ChannelStats,
    c: &Constellation,
    p: f64,
    s: usize,
    n_s: usize,
    cfg: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    if s == 0 || n_s == 0 || s * n_s != stats.n_t {
        return Err(Error::config(format!(
            "S·N_s must equal N_t: {s}·{n_s} != {}",
            stats.n_t
        )));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::config(format!("power must be positive, got {p}")));
    }
    cfg.validate()?;
    let perm = pair_subchannels(&stats.lambda_t, n_s)?;
    let bank = NoiseBank::generate(n_s, cfg.bank_size, cfg.seed);
    let sur = Surrogate::new(stats, c, n_s, &bank)?;
    let restarts = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_stream(cfg.seed, RESTART_STREAM + r as u64);
            let init = StructuredPrecoder::random(perm.clone(), n_s, p, &mut rng)?;
            let mut trace = Optimizer::new(&sur, init, cfg.clone())?.run()?;
            trace.restart = r;
            Ok(trace)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = restarts
        .iter()
        .enumerate()
        .fold(0, |b, (i, t)| if t.value.total > restarts[b].value.total { i } else { b });
    let b = restarts[best].precoder.expand(stats)?;
    Ok(OptimizationTrace { restarts, best, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::Modulation;

    fn small_cfg() -> OptimizerConfig {
        OptimizerConfig {
            max_iter: 25,
            restarts: 2,
            bank_size: 200,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn trace_is_monotone_and_feasible() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.9).unwrap();
        let c = Constellation::new(Modulation::Qpsk);
        let t = optimize(&stats, &c, 3.0, 2, 2, &small_cfg()).unwrap();
        assert_eq!(t.restarts.len(), 2);
        for r in &t.restarts {
            for w in r.records.windows(2) {
                assert!(w[1].i_asy >= w[0].i_asy, "{:?}", r.records);
            }
            assert!((r.precoder.total_power() - 3.0).abs() < 1e-9);
            for v in r.precoder.mixers() {
                assert!(v.unitarity_defect() < 1e-9);
            }
        }
        let tr = t.b.matmul(&t.b.adjoint()).unwrap().trace().re;
        assert!((tr - 3.0).abs() < 1e-9);
        let first = t.best_restart().records[0].i_asy;
        assert!(t.value().total > first);
    }

    #[test]
    fn rejects_bad_factorization() {
        let stats = ChannelStats::iid(4, 4);
        let c = Constellation::new(Modulation::Bpsk);
        assert!(matches!(optimize(&stats, &c, 1.0, 3, 1, &small_cfg()), Err(Error::Config(_))));
        assert!(matches!(optimize(&stats, &c, 0.0, 2, 2, &small_cfg()), Err(Error::Config(_))));
        let bad = OptimizerConfig {
            restarts: 0,
            ..small_cfg()
        };
        assert!(matches!(optimize(&stats, &c, 1.0, 2, 2, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn width_one_only_moves_power() {
        let stats = ChannelStats::exponential(4, 4, 0.9, 0.0).unwrap();
        let c = Constellation::new(Modulation::Qpsk);
        let t = optimize(&stats, &c, 1.0, 4, 1, &small_cfg()).unwrap();
        for v in t.precoder().mixers() {
            assert_eq!(v, &ComplexMatrix::identity(1));
        }
        // low power on a strongly correlated channel favours the top eigenvalue
        let p = t.precoder().power();
        assert!(p[0] > p[3], "{p:?}");
    }
}
