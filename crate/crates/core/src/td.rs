//! Online TD(lambda) with accumulating eligibility traces over a flat
//! parameter vector, in plain-SGD and adaptive (second-moment, beta1 = 0)
//! update modes.
//!
//! The loop follows the classic online form: cache the prediction and its
//! gradient, observe the next cumulant, form the TD error against the next
//! prediction, fold the cached gradient into the eligibility vector, and step
//! the parameters along `delta * z`.

use crate::error::{Error, Result};
use crate::flops;
use crate::net::StageAdvance;

/// Anything the learner can drive: produces a scalar prediction with its
/// parameter gradient, and accepts elementwise parameter updates.
pub trait Predictor {
    fn param_len(&self) -> usize;
    /// Advance one step on observation `x`; fills `grad` (resized to
    /// `param_len`) with the gradient of the returned prediction.
    fn predict(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64>;
    fn apply_update(&mut self, delta: &[f64]);
    /// Clear recurrent dynamics (hidden state, traces, windows) at an episode
    /// boundary. Parameters are untouched.
    fn reset_dynamics(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    /// Second-moment decay for the adaptive mode.
    pub beta2: f64,
    /// Denominator floor for the adaptive mode.
    pub eps_opt: f64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("step-size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("discount must lie in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(
                "trace decay must lie in [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(
                "second-moment decay must lie in [0,1)".into(),
            ));
        }
        if self.eps_opt <= 0.0 {
            return Err(Error::InvalidConfig(
                "optimizer denominator floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// TD(lambda) state: eligibility `z`, adaptive second moments `v`, and the
/// cached previous prediction with its gradient.
#[derive(Debug, Clone)]
pub struct TdLambda {
    pub(crate) cfg: LearnerConfig,
    pub(crate) z: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) y: f64,
    pub(crate) grad_prev: Vec<f64>,
    pub(crate) primed: bool,
    pub(crate) steps: u64,
    grad_next: Vec<f64>,
    delta_buf: Vec<f64>,
}

impl TdLambda {
    pub fn new(cfg: LearnerConfig, param_len: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            z: vec![0.0; param_len],
            v: vec![0.0; param_len],
            y: 0.0,
            grad_prev: vec![0.0; param_len],
            primed: false,
            steps: 0,
            grad_next: Vec::new(),
            delta_buf: Vec::new(),
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn eligibility(&self) -> &[f64] {
        &self.z
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    pub fn last_prediction(&self) -> f64 {
        self.y
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Evaluate the first observation of an episode without updating. Every
    /// later step goes through [`td_step`](Self::td_step).
    pub fn prime<P: Predictor>(&mut self, predictor: &mut P, x: &[f64]) -> Result<f64> {
        self.y = predictor.predict(x, &mut self.grad_prev)?;
        self.primed = true;
        Ok(self.y)
    }

    /// One online TD(lambda) transition: predict on `x_next`, form
    /// `delta = c + gamma y' - y`, decay-and-accumulate the eligibility with
    /// the cached gradient, and update the parameters.
    ///
    /// Returns the prediction `y'` made for `x_next` (the value scored by the
    /// harness) together with the TD error.
    pub fn td_step<P: Predictor>(
        &mut self,
        predictor: &mut P,
        x_next: &[f64],
        cumulant: f64,
        terminal: bool,
    ) -> Result<(f64, f64)> {
        if !self.primed {
            let y = self.prime(predictor, x_next)?;
            return Ok((y, 0.0));
        }
        let y_next = predictor.predict(x_next, &mut self.grad_next)?;
        let gamma_eff = if terminal { 0.0 } else { self.cfg.gamma };
        let delta = cumulant + gamma_eff * y_next - self.y;
        if !delta.is_finite() {
            return Err(Error::NumericFault {
                step: self.steps,
                detail: format!(
                    "TD error is not finite (y={}, y_next={y_next}, cumulant={cumulant})",
                    self.y
                ),
            });
        }

        let n = self.z.len();
        debug_assert_eq!(n, self.grad_prev.len());
        let decay = self.cfg.lambda * self.cfg.gamma;
        for (z, g) in self.z.iter_mut().zip(&self.grad_prev) {
            *z = decay.mul_add(*z, *g);
        }
        self.delta_buf.clear();
        self.delta_buf.resize(n, 0.0);
        let scale = self.cfg.alpha * delta;
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for (d, z) in self.delta_buf.iter_mut().zip(&self.z) {
                    *d = scale * z;
                }
                flops::add(2 * n as u64 + 2);
            }
            OptimizerKind::Adaptive => {
                let one_minus = 1.0 - self.cfg.beta2;
                for ((d, z), (v, g)) in self
                    .delta_buf
                    .iter_mut()
                    .zip(&self.z)
                    .zip(self.v.iter_mut().zip(&self.grad_prev))
                {
                    *v = self.cfg.beta2.mul_add(*v, one_minus * (g * g));
                    *d = scale * z / (v.sqrt() + self.cfg.eps_opt);
                }
                flops::add(7 * n as u64 + 2);
            }
        }
        predictor.apply_update(&self.delta_buf);

        self.y = y_next;
        std::mem::swap(&mut self.grad_prev, &mut self.grad_next);
        self.steps += 1;

        if terminal {
            self.z.iter_mut().for_each(|z| *z = 0.0);
            predictor.reset_dynamics();
            self.primed = false;
        }
        Ok((y_next, delta))
    }

    /// Realign the learner after a stage transition: new parameters get zero
    /// eligibility, second moment, and cached gradient; entries of the newly
    /// frozen parameters are zeroed for good.
    pub fn on_stage_advance(&mut self, adv: &StageAdvance) {
        self.z.resize(adv.new_param_len, 0.0);
        self.v.resize(adv.new_param_len, 0.0);
        self.grad_prev.resize(adv.new_param_len, 0.0);
        for i in adv.frozen_range.clone() {
            self.z[i] = 0.0;
            self.v[i] = 0.0;
            self.grad_prev[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Network, NormSettings, StageSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        w: Vec<f64>,
    }

    impl Predictor for Linear {
        fn param_len(&self) -> usize {
            self.w.len()
        }
        fn predict(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
            grad.clear();
            grad.extend_from_slice(x);
            Ok(self.w.iter().zip(x).map(|(w, x)| w * x).sum())
        }
        fn apply_update(&mut self, delta: &[f64]) {
            for (w, d) in self.w.iter_mut().zip(delta) {
                *w += d;
            }
        }
        fn reset_dynamics(&mut self) {}
    }

    fn cfg(alpha: f64, gamma: f64, lambda: f64, optimizer: OptimizerKind) -> LearnerConfig {
        LearnerConfig {
            alpha,
            gamma,
            lambda,
            optimizer,
            beta2: 0.9999,
            eps_opt: 1e-8,
        }
    }

    #[test]
    fn lambda_zero_makes_trace_equal_cached_gradient() {
        let mut p = Linear { w: vec![0.0, 0.0] };
        let mut td = TdLambda::new(cfg(1e-3, 0.9, 0.0, OptimizerKind::Sgd), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut prev_x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        td.prime(&mut p, &prev_x).unwrap();
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            td.td_step(&mut p, &x, rng.gen_range(-1.0..1.0), false)
                .unwrap();
            assert_eq!(td.eligibility(), &prev_x);
            prev_x = x;
        }
    }

    #[test]
    fn eligibility_is_the_discounted_gradient_sum() {
        let (gamma, lambda) = (0.9, 0.8);
        let mut p = Linear { w: vec![0.0, 0.0] };
        // alpha tiny so parameter motion cannot disturb the recursion check
        let mut td = TdLambda::new(cfg(1e-12, gamma, lambda, OptimizerKind::Sgd), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        td.prime(&mut p, &x0).unwrap();
        let mut grads = vec![x0.to_vec()];
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            td.td_step(&mut p, &x, 0.1, false).unwrap();
            let t = grads.len();
            let mut expect = [0.0f64; 2];
            for (s, g) in grads.iter().enumerate() {
                let w = (lambda * gamma).powi((t - 1 - s) as i32);
                expect[0] += w * g[0];
                expect[1] += w * g[1];
            }
            assert!((td.eligibility()[0] - expect[0]).abs() < 1e-12);
            assert!((td.eligibility()[1] - expect[1]).abs() < 1e-12);
            grads.push(x.to_vec());
        }
    }

    #[test]
    fn gamma_zero_is_the_delta_rule_and_finds_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let cs: Vec<f64> = xs
            .iter()
            .map(|x| 2.5 * x + rng.gen_range(-0.1..0.1))
            .collect();
        // Brute-force least-squares slope over the same stream.
        let sxc: f64 = xs.iter().zip(&cs).map(|(x, c)| x * c).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let ls = sxc / sxx;

        let mut p = Linear { w: vec![0.0] };
        let mut td = TdLambda::new(cfg(0.01, 0.0, 0.5, OptimizerKind::Sgd), 1).unwrap();
        td.prime(&mut p, &[xs[0]]).unwrap();
        let mut tail = 0.0;
        let mut tail_n = 0;
        for t in 1..n {
            td.td_step(&mut p, &[xs[t]], cs[t], false).unwrap();
            if t > n - 50_000 {
                tail += p.w[0];
                tail_n += 1;
            }
        }
        let avg = tail / tail_n as f64;
        assert!((avg - ls).abs() < 0.02, "LMS {avg} vs least squares {ls}");
    }

    #[test]
    fn two_state_cycle_converges_to_discounted_returns() {
        // Deterministic A -> B -> A cycle; arriving in B pays 1. With
        // one-hot observations and a linear head the learned weights must
        // approach v(A) = 1/(1-g^2), v(B) = g/(1-g^2).
        let gamma = 0.9;
        let va = 1.0 / (1.0 - gamma * gamma);
        let vb = gamma * va;
        let mut p = Linear { w: vec![0.0, 0.0] };
        let mut td = TdLambda::new(cfg(0.01, gamma, 0.9, OptimizerKind::Sgd), 2).unwrap();
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        td.prime(&mut p, &a).unwrap();
        for t in 0..100_000 {
            if t % 2 == 0 {
                td.td_step(&mut p, &b, 1.0, false).unwrap();
            } else {
                td.td_step(&mut p, &a, 0.0, false).unwrap();
            }
        }
        assert!((p.w[0] - va).abs() < 1e-3, "v(A) {} vs {va}", p.w[0]);
        assert!((p.w[1] - vb).abs() < 1e-3, "v(B) {} vs {vb}", p.w[1]);
    }

    #[test]
    fn terminal_transition_resets_trace_and_reprimes() {
        let mut p = Linear { w: vec![0.3] };
        let mut td = TdLambda::new(cfg(0.1, 0.9, 0.9, OptimizerKind::Sgd), 1).unwrap();
        td.prime(&mut p, &[1.0]).unwrap();
        td.td_step(&mut p, &[0.5], 1.0, true).unwrap();
        assert_eq!(td.eligibility(), &[0.0]);
        let w = p.w[0];
        // Next call only re-primes: parameters must not move.
        td.td_step(&mut p, &[0.7], 5.0, false).unwrap();
        assert_eq!(p.w[0], w);
        // After that updates flow again.
        td.td_step(&mut p, &[0.7], 5.0, false).unwrap();
        assert_ne!(p.w[0], w);
    }

    #[test]
    fn nonfinite_td_error_reports_a_numeric_fault() {
        let mut p = Linear {
            w: vec![f64::INFINITY],
        };
        let mut td = TdLambda::new(cfg(0.1, 0.9, 0.9, OptimizerKind::Sgd), 1).unwrap();
        td.prime(&mut p, &[1.0]).unwrap();
        let err = td.td_step(&mut p, &[1.0], 0.0, false).unwrap_err();
        assert!(matches!(err, Error::NumericFault { .. }));
    }

    #[test]
    fn stage_advance_grows_state_by_new_block_and_pins_frozen_entries() {
        let spec = StageSpec {
            features_per_stage: 4,
            steps_per_stage: 10,
            total_stages: 2,
        };
        let mut net = Network::new(3, spec, NormSettings::default(), 0).unwrap();
        let mut td = TdLambda::new(
            cfg(1e-4, 0.9, 0.9, OptimizerKind::Adaptive),
            net.param_len(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut obs = || -> Vec<f64> { (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        td.prime(&mut net, &obs()).unwrap();
        let before = net.param_len();
        let mut adv = None;
        for _ in 0..10 {
            td.td_step(&mut net, &obs(), 0.2, false).unwrap();
            if let Some(a) = net.maybe_advance_stage() {
                td.on_stage_advance(&a);
                adv = Some(a);
            }
        }
        let adv = adv.expect("stage boundary not reached");
        // Four new columns with input width 3 + 4, plus four head weights.
        let m2 = 7;
        assert_eq!(adv.new_param_len, before + 4 * (4 * m2 + 8) + 4);
        assert_eq!(td.eligibility().len(), adv.new_param_len);
        for _ in 0..25 {
            td.td_step(&mut net, &obs(), 0.2, false).unwrap();
            for i in adv.frozen_range.clone() {
                assert_eq!(td.eligibility()[i], 0.0);
            }
        }
    }
}
