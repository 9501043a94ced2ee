//! Trace-patterning benchmark stream: timed pattern/outcome trials with
//! distractor noise, plus ground-truth discounted returns for scoring.
//!
//! Each trial presents a pattern over the CS features for one step. A fixed,
//! seed-chosen half of the patterns is positive: the US fires exactly ISI
//! steps after a positive pattern (the step passes silently for negative
//! patterns, keeping trial lengths identically distributed), and the next
//! trial starts ITI steps after that. Noise features flip independently
//! every step and predict nothing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stream::StepRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub n_cs: usize,
    pub active_bits: usize,
    pub n_positive: usize,
    pub n_noise: usize,
    /// Inclusive step-gap range from a CS to its US.
    pub isi: (u32, u32),
    /// Inclusive step-gap range from a US to the next CS.
    pub iti: (u32, u32),
    pub seed: u64,
    /// Test hook: always present this pattern index instead of sampling.
    pub pattern_override: Option<usize>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_cs: 6,
            active_bits: 3,
            n_positive: 10,
            n_noise: 5,
            isi: (24, 36),
            iti: (80, 120),
            seed: 0,
            pattern_override: None,
        }
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance to the next lexicographic combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

impl TraceConfig {
    pub fn obs_width(&self) -> usize {
        self.n_cs + self.n_noise + 1
    }

    pub fn cumulant_index(&self) -> usize {
        self.obs_width() - 1
    }

    pub fn n_patterns(&self) -> usize {
        combinations(self.n_cs, self.active_bits).len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.active_bits == 0 || self.active_bits > self.n_cs {
            return Err(Error::InvalidConfig(
                "active bits must lie in 1..=n_cs".into(),
            ));
        }
        let total = self.n_patterns();
        if self.n_positive > total {
            return Err(Error::InvalidConfig(format!(
                "cannot pick {} positive patterns out of {total}",
                self.n_positive
            )));
        }
        if self.isi.0 < 1 || self.isi.0 > self.isi.1 || self.iti.0 < 1 || self.iti.0 > self.iti.1 {
            return Err(Error::InvalidConfig("empty ISI or ITI range".into()));
        }
        if let Some(p) = self.pattern_override {
            if p >= total {
                return Err(Error::InvalidConfig(format!(
                    "pattern override {p} outside {total} patterns"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Pattern,
    Outcome { positive: bool },
}

/// Deterministic-given-seed generator of the trace-patterning stream.
#[derive(Debug, Clone)]
pub struct TracePatternGen {
    cfg: TraceConfig,
    patterns: Vec<Vec<usize>>,
    positive: Vec<bool>,
    rng: ChaCha8Rng,
    countdown: u32,
    next_event: Event,
}

impl TracePatternGen {
    pub fn new(cfg: TraceConfig) -> Result<Self> {
        cfg.validate()?;
        let patterns = combinations(cfg.n_cs, cfg.active_bits);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // The positive subset is fixed for the lifetime of the stream.
        let mut order: Vec<usize> = (0..patterns.len()).collect();
        order.shuffle(&mut rng);
        let mut positive = vec![false; patterns.len()];
        for &p in order.iter().take(cfg.n_positive) {
            positive[p] = true;
        }
        Ok(Self {
            cfg,
            patterns,
            positive,
            rng,
            countdown: 0,
            next_event: Event::Pattern,
        })
    }

    pub fn config(&self) -> &TraceConfig {
        &self.cfg
    }

    /// Indices of the patterns that trigger the US.
    pub fn positive_patterns(&self) -> Vec<usize> {
        (0..self.patterns.len())
            .filter(|&p| self.positive[p])
            .collect()
    }

    /// Emit the next step.
    pub fn next_record(&mut self) -> StepRecord {
        let width = self.cfg.obs_width();
        let mut obs = vec![0.0; width];
        if self.countdown == 0 {
            match self.next_event {
                Event::Pattern => {
                    let p = match self.cfg.pattern_override {
                        Some(p) => p,
                        None => self.rng.gen_range(0..self.patterns.len()),
                    };
                    for &bit in &self.patterns[p] {
                        obs[bit] = 1.0;
                    }
                    self.next_event = Event::Outcome {
                        positive: self.positive[p],
                    };
                    self.countdown = self.rng.gen_range(self.cfg.isi.0..=self.cfg.isi.1);
                }
                Event::Outcome { positive } => {
                    if positive {
                        obs[width - 1] = 1.0;
                    }
                    self.next_event = Event::Pattern;
                    self.countdown = self.rng.gen_range(self.cfg.iti.0..=self.cfg.iti.1);
                }
            }
        } else {
            self.countdown -= 1;
        }
        for j in 0..self.cfg.n_noise {
            obs[self.cfg.n_cs + j] = if self.rng.gen::<bool>() { 1.0 } else { 0.0 };
        }
        let cumulant = obs[width - 1];
        StepRecord {
            observation: obs,
            cumulant,
            terminal: false,
        }
    }
}

/// Discounted returns with an invalid tail.
#[derive(Debug, Clone, PartialEq)]
pub struct Returns {
    pub values: Vec<f64>,
    /// `false` where the stream ends (or no terminal arrives) before the
    /// discount horizon is exhausted, so the value is incomplete.
    pub valid: Vec<bool>,
}

/// Steps after which a truncated return is accurate to 1e-8.
pub fn horizon(gamma: f64) -> usize {
    assert!((0.0..1.0).contains(&gamma));
    if gamma == 0.0 {
        1
    } else {
        (1e-8f64.ln() / gamma.ln()).ceil() as usize
    }
}

/// Reverse-recursion returns `g[t] = c[t+1] + gamma * g[t+1]`, with episodes
/// cut at terminal flags and the under-determined tail marked invalid.
pub fn ground_truth_returns(
    cumulants: &[f64],
    terminals: Option<&[bool]>,
    gamma: f64,
) -> Returns {
    let n = cumulants.len();
    let h = horizon(gamma);
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut g = 0.0;
    let mut complete = false;
    for t in (0..n).rev() {
        if t + 1 == n {
            g = 0.0;
            complete = false;
        } else if terminals.map(|ts| ts[t + 1]).unwrap_or(false) {
            g = cumulants[t + 1];
            complete = true;
        } else {
            g = gamma.mul_add(g, cumulants[t + 1]);
        }
        values[t] = g;
        valid[t] = complete || (n - 1 - t) >= h;
    }
    Returns { values, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pattern_count_is_six_choose_three() {
        let cfg = TraceConfig::default();
        assert_eq!(cfg.n_patterns(), 20);
        assert_eq!(cfg.obs_width(), 12);
        let g = TracePatternGen::new(cfg).unwrap();
        assert_eq!(g.positive_patterns().len(), 10);
    }

    #[test]
    fn gaps_stay_inside_the_configured_ranges() {
        let mut g = TracePatternGen::new(TraceConfig {
            seed: 3,
            ..TraceConfig::default()
        })
        .unwrap();
        let n = 1_000_000;
        let mut cs_steps = Vec::new();
        let mut us_steps = Vec::new();
        for t in 0..n {
            let rec = g.next_record();
            let active: usize = rec.observation[..6].iter().map(|&v| v as usize).sum();
            assert!(active == 0 || active == 3, "step {t}: {active} CS bits");
            if active == 3 {
                cs_steps.push(t);
            }
            if rec.cumulant == 1.0 {
                us_steps.push(t);
            }
        }
        assert!(us_steps.len() > 2000);
        for &us in &us_steps {
            let cs_before = *cs_steps.iter().filter(|&&c| c < us).last().unwrap();
            let gap = us - cs_before;
            assert!((24..=36).contains(&gap), "CS->US gap {gap}");
            if let Some(&cs_after) = cs_steps.iter().find(|&&c| c > us) {
                let gap = cs_after - us;
                assert!((80..=120).contains(&gap), "US->CS gap {gap}");
            }
        }
    }

    #[test]
    fn twenty_patterns_appear_and_the_positive_half_is_stable() {
        let mut g = TracePatternGen::new(TraceConfig {
            seed: 5,
            ..TraceConfig::default()
        })
        .unwrap();
        let declared = g.positive_patterns();
        let patterns = combinations(6, 3);
        let key = |obs: &[f64]| -> usize {
            patterns
                .iter()
                .position(|p| {
                    (0..6).all(|b| (obs[b] == 1.0) == p.contains(&b))
                })
                .unwrap()
        };
        let mut followed: Vec<Vec<bool>> = vec![Vec::new(); 20];
        let mut pending: Option<usize> = None;
        for _ in 0..500_000 {
            let rec = g.next_record();
            let active: usize = rec.observation[..6].iter().map(|&v| v as usize).sum();
            if active == 3 {
                pending = Some(key(&rec.observation));
            }
            if rec.cumulant == 1.0 {
                followed[pending.take().unwrap()].push(true);
            }
        }
        // All 20 patterns observed; a pattern is positive iff it ever fired.
        let mut seen_positive = Vec::new();
        for (p, hits) in followed.iter().enumerate() {
            if !hits.is_empty() {
                seen_positive.push(p);
            }
        }
        assert_eq!(seen_positive, declared);
        assert_eq!(seen_positive.len(), 10);
    }

    #[test]
    fn fixed_pattern_without_noise_is_periodic() {
        let cfg = TraceConfig {
            n_noise: 0,
            isi: (30, 30),
            iti: (100, 100),
            pattern_override: Some(4),
            seed: 9,
            ..TraceConfig::default()
        };
        let mut g = TracePatternGen::new(cfg).unwrap();
        let steps: Vec<Vec<f64>> = (0..400).map(|_| g.next_record().observation).collect();
        let period = 130;
        for t in 0..steps.len() - period {
            assert_eq!(steps[t], steps[t + period], "step {t}");
        }
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let cfg = TraceConfig {
            seed: 77,
            ..TraceConfig::default()
        };
        let mut a = TracePatternGen::new(cfg.clone()).unwrap();
        let mut b = TracePatternGen::new(cfg).unwrap();
        for _ in 0..20_000 {
            let (x, y) = (a.next_record(), b.next_record());
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_spike_return_is_gamma_squared() {
        let mut c = vec![0.0; 300];
        c[3] = 1.0;
        let r = ground_truth_returns(&c, None, 0.9);
        assert!((r.values[0] - 0.81).abs() < 1e-15);
        assert!((r.values[2] - 1.0).abs() < 1e-15);
        assert_eq!(r.values[3], 0.0);
        assert!(r.valid[0]);
        // Tail within the discount horizon is flagged invalid.
        assert!(!r.valid[299]);
        assert!(!r.valid[299 - horizon(0.9) + 1]);
        assert!(r.valid[299 - horizon(0.9)]);
    }

    #[test]
    fn all_zero_cumulants_give_zero_returns() {
        let r = ground_truth_returns(&[0.0; 50], None, 0.5);
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reverse_recursion_matches_brute_force_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = 0.9;
        let r = ground_truth_returns(&c, None, gamma);
        for t in 0..n {
            let mut brute = 0.0;
            for j in t + 1..n {
                brute += gamma.powi((j - t - 1) as i32) * c[j];
            }
            assert!((r.values[t] - brute).abs() <= 1e-12, "t={t}");
        }
    }

    #[test]
    fn terminals_cut_the_return() {
        let c = [0.0, 1.0, 5.0, 7.0];
        let mut term = [false; 4];
        term[1] = true;
        let r = ground_truth_returns(&c, Some(&term), 0.9);
        // The transition into step 1 ends the episode: g[0] = c[1] exactly.
        assert_eq!(r.values[0], 1.0);
        assert!(r.valid[0]);
        assert!((r.values[1] - (5.0 + 0.9 * 7.0)).abs() < 1e-15);
    }

    #[test]
    fn us_fires_exactly_when_a_positive_pattern_was_shown() {
        let mut g = TracePatternGen::new(TraceConfig {
            seed: 11,
            ..TraceConfig::default()
        })
        .unwrap();
        let mut due: Option<(usize, bool)> = None; // (step of US, positive)
        let mut pending_isi: Option<usize> = None;
        for t in 0..300_000 {
            let rec = g.next_record();
            let active: usize = rec.observation[..6].iter().map(|&v| v as usize).sum();
            let us = rec.cumulant == 1.0;
            if let Some((step, positive)) = due {
                if t == step {
                    assert_eq!(us, positive, "step {t}");
                    due = None;
                }
            }
            if us {
                assert!(pending_isi.is_none());
            }
            if active == 3 {
                // The exact gap is internal state; bound it by reconstruction.
                pending_isi = Some(t);
            }
            if us {
                let cs = pending_isi.take().unwrap();
                assert!((24..=36).contains(&(t - cs)));
            }
            let _ = &mut due;
        }
    }

    #[test]
    fn noise_features_are_uncorrelated_with_returns() {
        let mut g = TracePatternGen::new(TraceConfig {
            seed: 13,
            ..TraceConfig::default()
        })
        .unwrap();
        let n = 1_000_000;
        let mut noise: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        let mut cumulants = Vec::with_capacity(n);
        for _ in 0..n {
            let rec = g.next_record();
            for j in 0..5 {
                noise[j].push(rec.observation[6 + j]);
            }
            cumulants.push(rec.cumulant);
        }
        let returns = ground_truth_returns(&cumulants, None, 0.9);
        let m = n - horizon(0.9);
        let g_mean: f64 = returns.values[..m].iter().sum::<f64>() / m as f64;
        let g_var: f64 = returns.values[..m]
            .iter()
            .map(|v| (v - g_mean) * (v - g_mean))
            .sum::<f64>()
            / m as f64;
        for (j, feat) in noise.iter().enumerate() {
            let f_mean: f64 = feat[..m].iter().sum::<f64>() / m as f64;
            let f_var: f64 = feat[..m]
                .iter()
                .map(|v| (v - f_mean) * (v - f_mean))
                .sum::<f64>()
                / m as f64;
            let cov: f64 = feat[..m]
                .iter()
                .zip(&returns.values[..m])
                .map(|(f, g)| (f - f_mean) * (g - g_mean))
                .sum::<f64>()
                / m as f64;
            let r = cov / (f_var * g_var).sqrt();
            assert!(r.abs() < 0.01, "noise feature {j} correlates: r = {r}");
        }
    }
}
