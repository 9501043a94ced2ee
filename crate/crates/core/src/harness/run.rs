//! The online experiment loop: stream in, predict, score, learn, advance
//! stages, emit learning curves. Ground truth needs the future, so each run
//! makes two passes over the stream: the first records cumulants and computes
//! discounted returns, the second feeds the learner. Every prediction is
//! scored against the return before its step's data updates any parameter.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::config::{EnvKind, ExperimentConfig, Topology};
use crate::dense::DenseLstm;
use crate::error::{Error, Result};
use crate::flops;
use crate::net::Network;
use crate::stream::{ReadOptions, StepRecord, StreamReader};
use crate::td::{Predictor, TdLambda};
use crate::trace_env::{ground_truth_returns, Returns, TracePatternGen};

/// Circular window of the last `cap` squared prediction errors.
#[derive(Debug, Clone)]
pub struct RunStats {
    window: Vec<f64>,
    cap: usize,
    next: usize,
    filled: usize,
}

impl RunStats {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1);
        Self {
            window: vec![0.0; cap],
            cap,
            next: 0,
            filled: 0,
        }
    }

    pub fn push(&mut self, sq_err: f64) {
        self.window[self.next] = sq_err;
        self.next = (self.next + 1) % self.cap;
        self.filled = (self.filled + 1).min(self.cap);
    }

    /// Mean squared error over the window, recomputed on demand so the
    /// emitted value never drifts from its own contents.
    pub fn windowed_error(&self) -> f64 {
        if self.filled == 0 {
            return f64::NAN;
        }
        self.window[..self.filled].iter().sum::<f64>() / self.filled as f64
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub(crate) fn entries(&self) -> (&[f64], usize, usize) {
        (&self.window, self.next, self.filled)
    }

    pub(crate) fn restore(window: Vec<f64>, next: usize, filled: usize) -> Self {
        let cap = window.len();
        Self {
            window,
            cap,
            next,
            filled,
        }
    }
}

/// The predictor behind a run: a staged columnar network or the dense
/// truncated-BPTT baseline.
#[derive(Debug, Clone)]
pub enum Engine {
    Staged(Network),
    Dense(DenseLstm),
}

impl Predictor for Engine {
    fn param_len(&self) -> usize {
        match self {
            Engine::Staged(n) => n.param_len(),
            Engine::Dense(n) => Predictor::param_len(n),
        }
    }
    fn predict(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
        match self {
            Engine::Staged(n) => n.step(x, grad),
            Engine::Dense(n) => n.predict(x, grad),
        }
    }
    fn apply_update(&mut self, delta: &[f64]) {
        match self {
            Engine::Staged(n) => n.apply_update(delta),
            Engine::Dense(n) => Predictor::apply_update(n, delta),
        }
    }
    fn reset_dynamics(&mut self) {
        match self {
            Engine::Staged(n) => n.reset_dynamics(),
            Engine::Dense(n) => n.reset_state(),
        }
    }
}

enum Source {
    Trace(Box<TracePatternGen>),
    File {
        reader: StreamReader,
        cumulant_index: usize,
        clip: bool,
    },
}

impl Source {
    fn next(&mut self) -> Result<StepRecord> {
        match self {
            Source::Trace(gen) => Ok(gen.next_record()),
            Source::File {
                reader,
                cumulant_index,
                clip,
            } => {
                let mut rec = reader
                    .next()
                    .ok_or_else(|| Error::InvalidConfig("stream file exhausted".into()))??;
                if *clip {
                    let v = &mut rec.observation[*cumulant_index];
                    *v = v.clamp(-1.0, 1.0);
                }
                rec.cumulant = rec.observation[*cumulant_index];
                Ok(rec)
            }
        }
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        match self {
            Source::Trace(gen) => {
                for _ in 0..n {
                    gen.next_record();
                }
                Ok(())
            }
            Source::File { reader, .. } => reader.seek_to(n),
        }
    }
}

fn make_source(cfg: &ExperimentConfig, seed: u64) -> Result<(Source, u64, usize)> {
    match cfg.env {
        EnvKind::Trace => {
            let tc = cfg.trace_config(seed);
            let width = tc.obs_width();
            Ok((
                Source::Trace(Box::new(TracePatternGen::new(tc)?)),
                cfg.total_steps,
                width,
            ))
        }
        EnvKind::Replay => {
            let reader = StreamReader::open_with(&cfg.stream_path, ReadOptions::default())?;
            let width = reader.header().width;
            let cumulant_index = match cfg.cumulant_index {
                Some(i) if i >= width => {
                    return Err(Error::InvalidConfig(format!(
                        "cumulant index {i} outside stream width {width}"
                    )))
                }
                Some(i) => i,
                None => reader.header().cumulant_index,
            };
            let total = cfg.total_steps.min(reader.header().count);
            Ok((
                Source::File {
                    reader,
                    cumulant_index,
                    clip: cfg.clip_rewards,
                },
                total,
                width,
            ))
        }
    }
}

/// One seed's online run, stepped explicitly so callers can checkpoint and
/// resume mid-stream.
pub struct OnlineRun {
    pub(crate) engine: Engine,
    pub(crate) learner: TdLambda,
    source: Source,
    pub(crate) returns: Returns,
    pub(crate) stats: RunStats,
    pub(crate) t: u64,
    total: u64,
    ops_base: u64,
}

/// Outcome of one loop step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub y: f64,
    /// Squared error against the ground-truth return, when that return is
    /// valid at this step.
    pub scored: Option<f64>,
}

impl OnlineRun {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (mut scan, total, width) = make_source(cfg, seed)?;
        let mut cumulants = Vec::with_capacity(total as usize);
        let mut terminals = Vec::with_capacity(total as usize);
        let mut any_terminal = false;
        for _ in 0..total {
            let rec = scan.next()?;
            cumulants.push(rec.cumulant);
            terminals.push(rec.terminal);
            any_terminal |= rec.terminal;
        }
        let returns = ground_truth_returns(
            &cumulants,
            any_terminal.then_some(terminals.as_slice()),
            cfg.gamma,
        );

        let engine = match cfg.topology {
            Topology::Tbptt => {
                Engine::Dense(DenseLstm::new(cfg.features, width, cfg.truncation, seed)?)
            }
            _ => Engine::Staged(Network::new(
                width,
                cfg.stage_spec(),
                cfg.norm_settings(),
                seed,
            )?),
        };
        let learner = TdLambda::new(cfg.learner_config()?, engine.param_len())?;
        let (source, _, _) = make_source(cfg, seed)?;
        Ok(Self {
            engine,
            learner,
            source,
            returns,
            stats: RunStats::new(cfg.metric_window),
            t: 0,
            total,
            ops_base: flops::read(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn windowed_error(&self) -> f64 {
        self.stats.windowed_error()
    }

    pub fn ops_per_step(&self) -> f64 {
        if self.t == 0 {
            0.0
        } else {
            (flops::read() - self.ops_base) as f64 / self.t as f64
        }
    }

    pub fn current_stage(&self) -> usize {
        match &self.engine {
            Engine::Staged(n) => n.current_stage(),
            Engine::Dense(_) => 0,
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn returns(&self) -> &Returns {
        &self.returns
    }

    /// Advance one step: read the next record, predict and learn on it, and
    /// score the fresh prediction against the precomputed return.
    pub fn step_once(&mut self) -> Result<StepOutcome> {
        debug_assert!(self.t < self.total, "stepping past the end of the run");
        let rec = self.source.next()?;
        let (y, _td_error) =
            self.learner
                .td_step(&mut self.engine, &rec.observation, rec.cumulant, rec.terminal)?;
        let idx = self.t as usize;
        let scored = if self.returns.valid[idx] {
            let d = y - self.returns.values[idx];
            let e = d * d;
            self.stats.push(e);
            Some(e)
        } else {
            None
        };
        if let Engine::Staged(net) = &mut self.engine {
            if let Some(adv) = net.maybe_advance_stage() {
                self.learner.on_stage_advance(&adv);
            }
        }
        self.t += 1;
        Ok(StepOutcome { y, scored })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        super::checkpoint::save(path, &self.engine, &self.learner, self.t, &self.stats)
    }

    /// Rebuild a run from a checkpoint: returns are recomputed from the
    /// stream, the source is fast-forwarded, and the engine, learner, and
    /// error window resume exactly where they stopped.
    pub fn resume(cfg: &ExperimentConfig, seed: u64, path: impl AsRef<Path>) -> Result<Self> {
        let mut run = Self::new(cfg, seed)?;
        let (engine, learner, t, stats) = super::checkpoint::load(path, &cfg.learner_config()?)?;
        run.engine = engine;
        run.learner = learner;
        run.stats = stats;
        run.t = t;
        run.source.skip(t)?;
        Ok(run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub error: f64,
    pub ops_per_step: f64,
    pub stage: usize,
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub curve: Vec<CurveRow>,
    pub curve_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Populated when the seed aborted on a numeric fault.
    pub fault: Option<String>,
}

/// Run one seed end to end, writing its learning-curve CSV and final
/// checkpoint under `out_dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<SeedOutcome> {
    let curve_path = out_dir.join(format!("curve_seed{seed}.csv"));
    let checkpoint_path = out_dir.join(format!("checkpoint_seed{seed}.bin"));
    let mut file = BufWriter::new(File::create(&curve_path)?);
    writeln!(file, "step,error,ops,stage")?;

    let mut run = OnlineRun::new(cfg, seed)?;
    let mut curve = Vec::new();
    let mut fault = None;
    while run.step_index() < run.total_steps() {
        match run.step_once() {
            Ok(_) => {}
            Err(Error::NumericFault { step, detail }) => {
                fault = Some(format!("seed {seed} aborted at step {step}: {detail}"));
                break;
            }
            Err(e) => return Err(e),
        }
        let t = run.step_index();
        if t % cfg.curve_cadence == 0 || t == run.total_steps() {
            let row = CurveRow {
                step: t,
                error: run.windowed_error(),
                ops_per_step: run.ops_per_step(),
                stage: run.current_stage(),
            };
            writeln!(
                file,
                "{},{},{},{}",
                row.step, row.error, row.ops_per_step, row.stage
            )?;
            curve.push(row);
        }
    }
    file.flush()?;
    if let Some(msg) = &fault {
        std::fs::write(out_dir.join(format!("seed{seed}_fault.txt")), msg)?;
    } else {
        run.save_checkpoint(&checkpoint_path)?;
    }
    Ok(SeedOutcome {
        seed,
        curve,
        curve_path,
        checkpoint_path,
        fault,
    })
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub summary_path: PathBuf,
}

fn resolve_workers(cfg: &ExperimentConfig) -> usize {
    if let Ok(v) = std::env::var("CCNET_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    if cfg.workers >= 1 {
        return cfg.workers;
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run every seed (in parallel worker threads), then aggregate the curves
/// into `summary.csv` (`step,mean,stderr,n`). A numeric fault sidelines its
/// seed with a diagnostic file; the rest keep going.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let resolved = toml::to_string(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
    std::fs::write(out_dir.join("resolved_config.toml"), resolved)?;

    let workers = resolve_workers(cfg).min(cfg.seeds.len().max(1));
    let results: Mutex<Vec<SeedOutcome>> = Mutex::new(Vec::new());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for w in 0..workers {
            let results = &results;
            let first_error = &first_error;
            let seeds = &cfg.seeds;
            scope.spawn(move || {
                for (i, &seed) in seeds.iter().enumerate() {
                    if i % workers != w {
                        continue;
                    }
                    match run_seed(cfg, seed, out_dir) {
                        Ok(outcome) => results.lock().unwrap().push(outcome),
                        Err(e) => {
                            let mut slot = first_error.lock().unwrap();
                            if slot.is_none() {
                                *slot = Some(e);
                            }
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut seeds = results.into_inner().unwrap();
    seeds.sort_by_key(|s| s.seed);

    let summary_path = out_dir.join("summary.csv");
    let ok: Vec<&SeedOutcome> = seeds.iter().filter(|s| s.fault.is_none()).collect();
    let mut file = BufWriter::new(File::create(&summary_path)?);
    writeln!(file, "step,mean,stderr,n")?;
    if let Some(first) = ok.first() {
        for (i, row) in first.curve.iter().enumerate() {
            let values: Vec<f64> = ok
                .iter()
                .filter_map(|s| s.curve.get(i).map(|r| r.error))
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            writeln!(file, "{},{},{},{}", row.step, mean, stderr, n)?;
        }
    }
    file.flush()?;
    Ok(ExperimentOutcome {
        out_dir: out_dir.to_path_buf(),
        seeds,
        summary_path,
    })
}

/// Recompute a `summary.csv` from already-written curve files.
pub fn summarize(curves: &[PathBuf], out: &Path) -> Result<()> {
    let mut tables: Vec<Vec<(u64, f64)>> = Vec::new();
    for path in curves {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let step: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad curve row in {path:?}")))?;
            let error: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad curve row in {path:?}")))?;
            rows.push((step, error));
        }
        tables.push(rows);
    }
    let mut file = BufWriter::new(File::create(out)?);
    writeln!(file, "step,mean,stderr,n")?;
    if let Some(first) = tables.first() {
        for (i, &(step, _)) in first.iter().enumerate() {
            let values: Vec<f64> = tables
                .iter()
                .filter_map(|t| t.get(i).filter(|(s, _)| *s == step).map(|(_, e)| *e))
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            writeln!(file, "{step},{mean},{stderr},{n}")?;
        }
    }
    file.flush()?;
    Ok(())
}
