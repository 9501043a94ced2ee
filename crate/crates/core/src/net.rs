//! Staged networks of independent LSTM columns.
//!
//! One type covers the three topologies: a single stage of many columns
//! (columnar), many stages of one column (constructive), and many stages of
//! many columns. Columns in stage `s` read the observation concatenated with
//! the normalized outputs of all features in stages `< s`, evaluated in stage
//! order within the same time step. When a stage ends, its columns freeze:
//! parameters and normalizer statistics become immutable and the sensitivity
//! traces are discarded. Head weights stay learnable for every feature.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::column::{self, CellState, ColumnParams, TraceState};
use crate::error::{Error, Result};
use crate::flops;
use crate::norm::RunningMoments;

/// Staging plan. `total_stages == 1` is a columnar network;
/// `features_per_stage == 1` is a constructive network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSpec {
    pub features_per_stage: usize,
    pub steps_per_stage: u64,
    pub total_stages: usize,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features_per_stage < 1 {
            return Err(Error::InvalidConfig(
                "features_per_stage must be >= 1".into(),
            ));
        }
        if self.total_stages < 1 {
            return Err(Error::InvalidConfig("total_stages must be >= 1".into()));
        }
        if self.total_stages > 1 && self.steps_per_stage == 0 {
            return Err(Error::InvalidConfig(
                "steps_per_stage must be positive when more than one stage is planned".into(),
            ));
        }
        Ok(())
    }
}

/// Feature normalization policy for a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub enabled: bool,
    pub beta: f64,
    pub eps: f64,
}

impl NormSettings {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            beta: 0.99999,
            eps: 0.001,
        }
    }
}

impl Default for NormSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            beta: 0.99999,
            eps: 0.001,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Column {
    pub params: ColumnParams,
    pub state: CellState,
    pub traces: TraceState,
    pub norm: RunningMoments,
    pub frozen: bool,
}

/// Where a flat parameter index lands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamLoc {
    Column {
        stage: usize,
        col: usize,
        offset: usize,
    },
    Head {
        stage: usize,
        col: usize,
    },
}

/// Result of a stage transition, for realigning learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct StageAdvance {
    pub new_param_len: usize,
    /// Flat indices of the column parameters that just froze.
    pub frozen_range: Range<usize>,
}

/// A staged columnar network with a linear prediction head.
///
/// The flat parameter layout appends one block per instantiated stage:
/// each stage's column parameters in order, then that stage's head weights.
/// The layout of existing entries never changes when a stage is added.
#[derive(Debug, Clone)]
pub struct Network {
    obs_width: usize,
    spec: StageSpec,
    norm: NormSettings,
    stages: Vec<Vec<Column>>,
    out_weights: Vec<f64>,
    current_stage: usize,
    step_count: u64,
    init_seed: u64,
    input_buf: Vec<f64>,
    features: Vec<f64>,
}

fn stage_rng(init_seed: u64, stage: usize) -> ChaCha8Rng {
    // Distinct, reproducible stream per stage so later stages can be
    // re-instantiated identically after a checkpoint restore.
    ChaCha8Rng::seed_from_u64(
        init_seed.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

impl Network {
    pub fn new(
        obs_width: usize,
        spec: StageSpec,
        norm: NormSettings,
        init_seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if obs_width < 1 {
            return Err(Error::InvalidConfig("observation width must be >= 1".into()));
        }
        let mut net = Self {
            obs_width,
            spec,
            norm,
            stages: Vec::new(),
            out_weights: Vec::new(),
            current_stage: 0,
            step_count: 0,
            init_seed,
            input_buf: Vec::new(),
            features: Vec::new(),
        };
        net.instantiate_stage(0);
        Ok(net)
    }

    fn instantiate_stage(&mut self, stage: usize) {
        let m = self.stage_input_width(stage);
        let mut rng = stage_rng(self.init_seed, stage);
        let cols = (0..self.spec.features_per_stage)
            .map(|_| Column {
                params: ColumnParams::random(m, &mut rng),
                state: CellState::zeroed(),
                traces: TraceState::zeros(m),
                norm: RunningMoments::new(self.norm.beta, self.norm.eps),
                frozen: false,
            })
            .collect();
        self.stages.push(cols);
        self.out_weights
            .extend(std::iter::repeat(0.0).take(self.spec.features_per_stage));
    }

    /// Input width seen by columns of `stage`: the observation plus one
    /// feature per column in every earlier stage.
    pub fn stage_input_width(&self, stage: usize) -> usize {
        self.obs_width + stage * self.spec.features_per_stage
    }

    pub fn obs_width(&self) -> usize {
        self.obs_width
    }

    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn norm_settings(&self) -> &NormSettings {
        &self.norm
    }

    pub fn current_stage(&self) -> usize {
        self.current_stage
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn feature_count(&self) -> usize {
        self.out_weights.len()
    }

    pub fn out_weights(&self) -> &[f64] {
        &self.out_weights
    }

    pub fn stages(&self) -> &[Vec<Column>] {
        &self.stages
    }

    /// Normalized feature values from the most recent step.
    pub fn last_features(&self) -> &[f64] {
        &self.features
    }

    fn stage_block_len(&self, stage: usize) -> usize {
        let u = self.spec.features_per_stage;
        u * column::param_count(self.stage_input_width(stage)) + u
    }

    fn stage_offset(&self, stage: usize) -> usize {
        (0..stage).map(|s| self.stage_block_len(s)).sum()
    }

    /// Total learnable parameters across instantiated stages, heads included.
    pub fn param_len(&self) -> usize {
        (0..self.stages.len()).map(|s| self.stage_block_len(s)).sum()
    }

    /// Flat index range of one column's parameters.
    pub fn column_range(&self, stage: usize, col: usize) -> Range<usize> {
        let n = column::param_count(self.stage_input_width(stage));
        let start = self.stage_offset(stage) + col * n;
        start..start + n
    }

    /// Flat index of one feature's head weight.
    pub fn head_index(&self, stage: usize, col: usize) -> usize {
        let u = self.spec.features_per_stage;
        let n = column::param_count(self.stage_input_width(stage));
        self.stage_offset(stage) + u * n + col
    }

    pub fn locate(&self, idx: usize) -> ParamLoc {
        let mut base = 0;
        for stage in 0..self.stages.len() {
            let u = self.spec.features_per_stage;
            let n = column::param_count(self.stage_input_width(stage));
            let cols_len = u * n;
            if idx < base + cols_len {
                let rel = idx - base;
                return ParamLoc::Column {
                    stage,
                    col: rel / n,
                    offset: rel % n,
                };
            }
            if idx < base + cols_len + u {
                return ParamLoc::Head {
                    stage,
                    col: idx - base - cols_len,
                };
            }
            base += cols_len + u;
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn param(&self, idx: usize) -> f64 {
        match self.locate(idx) {
            ParamLoc::Column { stage, col, offset } => self.stages[stage][col].params.get(offset),
            ParamLoc::Head { stage, col } => {
                self.out_weights[stage * self.spec.features_per_stage + col]
            }
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        match self.locate(idx) {
            ParamLoc::Column { stage, col, offset } => {
                *self.stages[stage][col].params.get_mut(offset) = value;
            }
            ParamLoc::Head { stage, col } => {
                self.out_weights[stage * self.spec.features_per_stage + col] = value;
            }
        }
    }

    pub fn nudge_param(&mut self, idx: usize, delta: f64) {
        self.set_param(idx, self.param(idx) + delta);
    }

    pub fn is_frozen(&self, stage: usize, col: usize) -> bool {
        self.stages[stage][col].frozen
    }

    /// Advance every column one step and produce the prediction and its
    /// gradient with respect to the flat parameter vector.
    ///
    /// Frozen columns run forward only and contribute zero gradient; active
    /// columns also advance their traces. Head-weight gradient entries are the
    /// normalized features; column entries are `w_k * th[p] / max(eps, sigma)`
    /// with the normalizer statistics treated as constants.
    pub fn step(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
        if x.len() != self.obs_width {
            return Err(Error::DimensionMismatch {
                context: "network observation",
                expected: self.obs_width,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "network observation",
            });
        }

        let Self {
            stages,
            input_buf,
            features,
            norm,
            out_weights,
            ..
        } = self;

        input_buf.clear();
        input_buf.extend_from_slice(x);
        features.clear();

        for cols in stages.iter_mut() {
            let width = input_buf.len();
            for col in cols.iter_mut() {
                let new = column::forward(&col.params, &col.state, &input_buf[..width])?;
                if !col.frozen {
                    column::update_traces(
                        &col.params,
                        &col.state,
                        &new,
                        &input_buf[..width],
                        &mut col.traces,
                    )?;
                }
                col.state = new;
                let value = if norm.enabled {
                    col.norm.observe_and_normalize(new.h)?
                } else {
                    new.h
                };
                features.push(value);
            }
            let first = features.len() - cols.len();
            input_buf.extend_from_slice(&features[first..]);
        }

        let mut y = 0.0;
        for (w, hn) in out_weights.iter().zip(features.iter()) {
            y = w.mul_add(*hn, y);
        }
        flops::add(features.len() as u64);

        grad.clear();
        grad.resize(self.param_len(), 0.0);
        let u = self.spec.features_per_stage;
        let mut base = 0;
        for (s, cols) in self.stages.iter().enumerate() {
            let n = column::param_count(self.stage_input_width(s));
            for (c, col) in cols.iter().enumerate() {
                let k = s * u + c;
                if !col.frozen {
                    let denom = if self.norm.enabled { col.norm.denom() } else { 1.0 };
                    let coef = self.out_weights[k] / denom;
                    let dst = &mut grad[base + c * n..base + (c + 1) * n];
                    for (g, th) in dst.iter_mut().zip(&col.traces.th) {
                        *g = coef * th;
                    }
                    flops::add(n as u64 + 1);
                }
                grad[base + u * n + c] = self.features[k];
            }
            base += u * n + u;
        }

        self.step_count += 1;
        Ok(y)
    }

    /// Freeze the current stage and instantiate the next one when the step
    /// counter crosses a `steps_per_stage` boundary. No-op after the final
    /// stage. Call once per time step, after the learning update.
    pub fn maybe_advance_stage(&mut self) -> Option<StageAdvance> {
        if self.current_stage + 1 >= self.spec.total_stages {
            return None;
        }
        if self.step_count == 0 || self.step_count % self.spec.steps_per_stage != 0 {
            return None;
        }
        Some(self.advance_stage_now())
    }

    /// Unconditional stage transition; exposed so measurements and tests can
    /// build a network in its late-stage configuration without replaying the
    /// schedule.
    pub fn advance_stage_now(&mut self) -> StageAdvance {
        assert!(
            self.current_stage + 1 < self.spec.total_stages,
            "no stages remain"
        );
        let s = self.current_stage;
        let n = column::param_count(self.stage_input_width(s));
        let start = self.stage_offset(s);
        let frozen_range = start..start + self.spec.features_per_stage * n;
        for col in &mut self.stages[s] {
            col.frozen = true;
            col.norm.freeze();
            col.traces = TraceState {
                th: Vec::new(),
                tc: Vec::new(),
            };
        }
        self.current_stage += 1;
        self.instantiate_stage(self.current_stage);
        StageAdvance {
            new_param_len: self.param_len(),
            frozen_range,
        }
    }

    /// Zero all hidden and cell states and clear the traces of active
    /// columns. Parameters and normalizer statistics are untouched.
    pub fn reset_dynamics(&mut self) {
        for cols in &mut self.stages {
            for col in cols {
                col.state = CellState::zeroed();
                if !col.frozen {
                    col.traces.clear();
                }
            }
        }
    }

    /// Elementwise parameter update. Frozen column blocks are skipped
    /// entirely so their bits cannot change; head weights always update.
    pub fn apply_update(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.param_len());
        let u = self.spec.features_per_stage;
        let mut base = 0;
        for (s, cols) in self.stages.iter_mut().enumerate() {
            let n = column::param_count(self.obs_width + s * u);
            for (c, col) in cols.iter_mut().enumerate() {
                if !col.frozen {
                    col.params.add_delta(&delta[base + c * n..base + (c + 1) * n]);
                }
            }
            for c in 0..u {
                self.out_weights[s * u + c] += delta[base + u * n + c];
            }
            flops::add(u as u64);
            base += u * n + u;
        }
    }

    /// Perturb each parameter of column `k` (flat feature index, single-stage
    /// networks) by `delta` and report the largest change any other feature
    /// shows over the stream. Disjoint parameter sets make this exactly zero.
    pub fn column_independence_check(&self, k: usize, stream: &[Vec<f64>], delta: f64) -> f64 {
        let run = |net: &Network| -> Vec<Vec<f64>> {
            let mut net = net.clone();
            let mut grad = Vec::new();
            stream
                .iter()
                .map(|x| {
                    net.step(x, &mut grad).expect("independence replay");
                    net.stages
                        .iter()
                        .flatten()
                        .map(|c| c.state.h)
                        .collect::<Vec<f64>>()
                })
                .collect()
        };
        let base = run(self);
        let range = self.column_range(0, k);
        let mut worst = 0.0f64;
        for p in range {
            let mut perturbed = self.clone();
            perturbed.nudge_param(p, delta);
            let runs = run(&perturbed);
            for (hs, base_hs) in runs.iter().zip(&base) {
                for (j, (h, h0)) in hs.iter().zip(base_hs).enumerate() {
                    if j != k {
                        worst = worst.max((h - h0).abs());
                    }
                }
            }
        }
        worst
    }
}

impl Network {
    /// Serialize the full network state: topology, parameters, cell states,
    /// traces, normalizer moments, head weights, and counters.
    pub fn write_state(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        use crate::wire::*;
        put_u32(w, self.obs_width as u32)?;
        put_u32(w, self.spec.features_per_stage as u32)?;
        put_u64(w, self.spec.steps_per_stage)?;
        put_u32(w, self.spec.total_stages as u32)?;
        put_u32(w, self.current_stage as u32)?;
        put_u64(w, self.step_count)?;
        put_u64(w, self.init_seed)?;
        put_u8(w, self.norm.enabled as u8)?;
        put_f64(w, self.norm.beta)?;
        put_f64(w, self.norm.eps)?;
        put_f64s(w, &self.out_weights)?;
        for cols in &self.stages {
            for col in cols {
                let m = col.params.input_len();
                put_u32(w, m as u32)?;
                let flat: Vec<f64> = (0..col.params.count()).map(|i| col.params.get(i)).collect();
                put_f64s(w, &flat)?;
                for v in [
                    col.state.h,
                    col.state.c,
                    col.state.i,
                    col.state.f,
                    col.state.o,
                    col.state.g,
                ] {
                    put_f64(w, v)?;
                }
                put_u8(w, col.frozen as u8)?;
                put_f64(w, col.norm.mean)?;
                put_f64(w, col.norm.var)?;
                put_u8(w, col.norm.frozen as u8)?;
                put_f64s(w, &col.traces.th)?;
                put_f64s(w, &col.traces.tc)?;
            }
        }
        Ok(())
    }

    /// Rebuild a network from [`write_state`](Self::write_state) output.
    pub fn read_state(r: &mut impl std::io::Read) -> Result<Self> {
        use crate::wire::*;
        let obs_width = get_u32(r)? as usize;
        let spec = StageSpec {
            features_per_stage: get_u32(r)? as usize,
            steps_per_stage: get_u64(r)?,
            total_stages: get_u32(r)? as usize,
        };
        let current_stage = get_u32(r)? as usize;
        let step_count = get_u64(r)?;
        let init_seed = get_u64(r)?;
        let norm = NormSettings {
            enabled: get_u8(r)? != 0,
            beta: get_f64(r)?,
            eps: get_f64(r)?,
        };
        let out_weights = get_f64s(r)?;
        let mut stages = Vec::with_capacity(current_stage + 1);
        for _ in 0..=current_stage {
            let mut cols = Vec::with_capacity(spec.features_per_stage);
            for _ in 0..spec.features_per_stage {
                let m = get_u32(r)? as usize;
                let flat = get_f64s(r)?;
                if flat.len() != column::param_count(m) {
                    return Err(Error::InvalidConfig(
                        "checkpoint column parameter count is inconsistent".into(),
                    ));
                }
                let mut params = ColumnParams::zeros(m);
                for (i, v) in flat.iter().enumerate() {
                    *params.get_mut(i) = *v;
                }
                let state = CellState {
                    h: get_f64(r)?,
                    c: get_f64(r)?,
                    i: get_f64(r)?,
                    f: get_f64(r)?,
                    o: get_f64(r)?,
                    g: get_f64(r)?,
                };
                let frozen = get_u8(r)? != 0;
                let mut moments = RunningMoments::new(norm.beta, norm.eps);
                moments.mean = get_f64(r)?;
                moments.var = get_f64(r)?;
                moments.frozen = get_u8(r)? != 0;
                let traces = TraceState {
                    th: get_f64s(r)?,
                    tc: get_f64s(r)?,
                };
                cols.push(Column {
                    params,
                    state,
                    traces,
                    norm: moments,
                    frozen,
                });
            }
            stages.push(cols);
        }
        Ok(Self {
            obs_width,
            spec,
            norm,
            stages,
            out_weights,
            current_stage,
            step_count,
            init_seed,
            input_buf: Vec::new(),
            features: Vec::new(),
        })
    }
}

impl crate::td::Predictor for Network {
    fn param_len(&self) -> usize {
        Network::param_len(self)
    }
    fn predict(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
        self.step(x, grad)
    }
    fn apply_update(&mut self, delta: &[f64]) {
        Network::apply_update(self, delta)
    }
    fn reset_dynamics(&mut self) {
        Network::reset_dynamics(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(width: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn columnar(d: usize, obs: usize, seed: u64, norm: NormSettings) -> Network {
        Network::new(
            obs,
            StageSpec {
                features_per_stage: d,
                steps_per_stage: 0,
                total_stages: 1,
            },
            norm,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zeroed_network_predicts_zero_with_feature_gradient_on_heads() {
        let mut net = columnar(3, 4, 9, NormSettings::default());
        for idx in 0..net.param_len() {
            net.set_param(idx, 0.0);
        }
        let mut grad = Vec::new();
        for x in random_stream(4, 10, 1) {
            let y = net.step(&x, &mut grad).unwrap();
            assert_eq!(y, 0.0);
            for (idx, g) in grad.iter().enumerate() {
                match net.locate(idx) {
                    ParamLoc::Column { .. } => assert_eq!(*g, 0.0),
                    ParamLoc::Head { stage, col } => {
                        assert_eq!(*g, net.last_features()[stage * 3 + col]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_column_identity_head_exposes_traces() {
        let mut net = columnar(1, 3, 4, NormSettings::disabled());
        let head = net.head_index(0, 0);
        net.set_param(head, 1.0);
        let mut grad = Vec::new();
        for x in random_stream(3, 20, 2) {
            let y = net.step(&x, &mut grad).unwrap();
            assert_eq!(y, net.stages()[0][0].state.h);
            for (g, th) in grad[net.column_range(0, 0)]
                .iter()
                .zip(&net.stages()[0][0].traces.th)
            {
                assert_eq!(*g, *th);
            }
        }
    }

    #[test]
    fn stage_arithmetic_and_input_growth() {
        let spec = StageSpec {
            features_per_stage: 4,
            steps_per_stage: 10,
            total_stages: 4,
        };
        let mut net = Network::new(12, spec, NormSettings::default(), 0).unwrap();
        let mut grad = Vec::new();
        let stream = random_stream(12, 40, 3);
        let mut advances = 0;
        for x in &stream {
            net.step(x, &mut grad).unwrap();
            if net.maybe_advance_stage().is_some() {
                advances += 1;
            }
        }
        assert_eq!(advances, 3);
        assert_eq!(net.current_stage(), 3);
        assert_eq!(net.feature_count(), 16);
        for s in 0..4 {
            assert_eq!(net.stage_input_width(s), 12 + 4 * s);
            assert_eq!(net.stages()[s][0].params.input_len(), 12 + 4 * s);
        }
        // Everything but the last stage is frozen.
        for s in 0..3 {
            assert!(net.stages()[s].iter().all(|c| c.frozen));
            assert!(net.stages()[s].iter().all(|c| c.traces.is_empty()));
        }
        assert!(net.stages()[3].iter().all(|c| !c.frozen));
        // No stages remain: further boundaries are no-ops.
        for x in &stream {
            net.step(x, &mut grad).unwrap();
            assert!(net.maybe_advance_stage().is_none());
        }
    }

    #[test]
    fn single_stage_never_advances() {
        let mut net = columnar(2, 3, 7, NormSettings::default());
        let mut grad = Vec::new();
        for x in random_stream(3, 50, 4) {
            net.step(&x, &mut grad).unwrap();
            assert!(net.maybe_advance_stage().is_none());
        }
        assert_eq!(net.current_stage(), 0);
    }

    #[test]
    fn parameter_ranges_are_disjoint_and_cover_everything() {
        let spec = StageSpec {
            features_per_stage: 2,
            steps_per_stage: 5,
            total_stages: 3,
        };
        let mut net = Network::new(4, spec, NormSettings::default(), 1).unwrap();
        net.advance_stage_now();
        net.advance_stage_now();
        let mut seen = vec![false; net.param_len()];
        for s in 0..3 {
            for c in 0..2 {
                for idx in net.column_range(s, c) {
                    assert!(!seen[idx], "index {idx} claimed twice");
                    seen[idx] = true;
                }
                let h = net.head_index(s, c);
                assert!(!seen[h]);
                seen[h] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn frozen_parameters_are_bit_identical_after_many_updates() {
        let spec = StageSpec {
            features_per_stage: 2,
            steps_per_stage: 50,
            total_stages: 2,
        };
        let mut net = Network::new(3, spec, NormSettings::default(), 5).unwrap();
        let mut grad = Vec::new();
        let stream = random_stream(3, 50, 6);
        for x in &stream {
            net.step(x, &mut grad).unwrap();
        }
        let adv = net.maybe_advance_stage().expect("boundary reached");
        let frozen_bits: Vec<u64> = adv
            .frozen_range
            .clone()
            .map(|i| net.param(i).to_bits())
            .collect();
        let frozen_norms: Vec<(u64, u64)> = net.stages()[0]
            .iter()
            .map(|c| (c.norm.mean.to_bits(), c.norm.var.to_bits()))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for x in random_stream(3, 100_000, 7) {
            net.step(&x, &mut grad).unwrap();
            let delta: Vec<f64> = grad.iter().map(|_| rng.gen_range(-1e-3..1e-3)).collect();
            net.apply_update(&delta);
        }
        for (i, bits) in adv.frozen_range.clone().zip(&frozen_bits) {
            assert_eq!(net.param(i).to_bits(), *bits);
        }
        for (c, snap) in net.stages()[0].iter().zip(&frozen_norms) {
            assert_eq!((c.norm.mean.to_bits(), c.norm.var.to_bits()), *snap);
        }
        // Head weights of the frozen features kept learning.
        let h0 = net.head_index(0, 0);
        assert_ne!(net.param(h0), 0.0);
    }

    #[test]
    fn column_independence_is_exact() {
        let stream = random_stream(5, 20, 9);
        for seed in 0..5 {
            let net = columnar(5, 5, seed, NormSettings::default());
            for k in 0..5 {
                assert_eq!(net.column_independence_check(k, &stream, 1e-4), 0.0);
            }
        }
    }

    #[test]
    fn head_weight_perturbation_leaves_features_alone() {
        let net = columnar(4, 3, 11, NormSettings::default());
        let stream = random_stream(3, 20, 10);
        let run = |net: &Network| {
            let mut net = net.clone();
            let mut grad = Vec::new();
            let mut hs = Vec::new();
            for x in &stream {
                net.step(x, &mut grad).unwrap();
                hs.extend(net.stages()[0].iter().map(|c| c.state.h));
            }
            hs
        };
        let base = run(&net);
        let mut perturbed = net.clone();
        let h = perturbed.head_index(0, 2);
        perturbed.nudge_param(h, 1e-4);
        assert_eq!(run(&perturbed), base);
    }

    #[test]
    fn observation_perturbation_reaches_every_column() {
        let net = columnar(4, 3, 13, NormSettings::default());
        let mut stream = random_stream(3, 20, 12);
        let run = |net: &Network, stream: &[Vec<f64>]| {
            let mut net = net.clone();
            let mut grad = Vec::new();
            let mut per_col = vec![0.0f64; 4];
            for x in stream {
                net.step(x, &mut grad).unwrap();
                for (k, c) in net.stages()[0].iter().enumerate() {
                    per_col[k] = per_col[k].max(c.state.h.abs());
                }
            }
            per_col
        };
        let base = run(&net, &stream);
        stream[0][1] += 0.5;
        let moved = run(&net, &stream);
        for k in 0..4 {
            assert_ne!(base[k], moved[k], "column {k} ignored the observation");
        }
    }

    #[test]
    fn gradient_factorizes_through_head_and_normalizer() {
        let mut net = columnar(3, 4, 17, NormSettings::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..3 {
            let h = net.head_index(0, k);
            net.set_param(h, rng.gen_range(-1.0..1.0));
        }
        let mut grad = Vec::new();
        for x in random_stream(4, 30, 14) {
            net.step(&x, &mut grad).unwrap();
            for k in 0..3 {
                let col = &net.stages()[0][k];
                let coef = net.out_weights()[k] / col.norm.denom();
                for (g, th) in grad[net.column_range(0, k)].iter().zip(&col.traces.th) {
                    assert_eq!(*g, coef * th);
                }
            }
        }
    }

    #[test]
    fn rejects_width_mismatch_and_nonfinite_observation() {
        let mut net = columnar(1, 2, 0, NormSettings::default());
        let mut grad = Vec::new();
        assert!(matches!(
            net.step(&[1.0], &mut grad),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            net.step(&[1.0, f64::INFINITY], &mut grad),
            Err(Error::NonFinite { .. })
        ));
    }
}
