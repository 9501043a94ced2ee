//! Per-step compute accounting: closed-form estimates per topology, measured
//! instrumented counts, and cross-method error normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Topology;
use crate::dense::{tbptt_cost, DenseLstm};
use crate::error::{Error, Result};
use crate::flops;
use crate::net::{Network, NormSettings, StageSpec};
use crate::td::Predictor;

/// Closed-form per-step operation estimate.
///
/// * tbptt: `(k+1)(4d^2 + 4dm + 4d)`
/// * columnar: `7 d (4m + 8)` (forward plus a six-fold trace factor)
/// * ccn: `d (2d + 4m + 4) + 6u (2d + 4m + 4)` (average fan-in `d/2`,
///   traces only for the `u` learning features)
/// * constructive: ccn with `u = 1`
///
/// `d` is the total feature count and `m` the observation width.
pub fn estimate_ops(topology: Topology, d: usize, u: usize, k: usize, m: usize) -> Result<u64> {
    if d == 0 {
        return Err(Error::InvalidConfig("feature count must be >= 1".into()));
    }
    let (du, mu) = (d as u64, m as u64);
    match topology {
        Topology::Columnar => Ok(7 * du * (4 * mu + 8)),
        Topology::Ccn => {
            if u == 0 || u > d {
                return Err(Error::InvalidConfig(
                    "features_per_stage must lie in 1..=features".into(),
                ));
            }
            let unit = 2 * du + 4 * mu + 4;
            Ok(du * unit + 6 * (u as u64) * unit)
        }
        Topology::Constructive => {
            let unit = 2 * du + 4 * mu + 4;
            Ok(du * unit + 6 * unit)
        }
        Topology::Tbptt => tbptt_cost(k, d, m),
    }
}

/// Instrumented per-step cost of the prediction machinery (forward pass,
/// trace or window gradients, normalization, gradient assembly), averaged
/// over `steps` random observations. Staged topologies are measured in their
/// final stage configuration; the TD parameter update itself is common to
/// all methods and not included.
pub fn measure_ops(
    topology: Topology,
    d: usize,
    u: usize,
    k: usize,
    m: usize,
    steps: usize,
) -> Result<f64> {
    assert!(steps > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5);
    let mut grad = Vec::new();
    let mut obs = vec![0.0; m];
    let mut draw = move |obs: &mut Vec<f64>| {
        for v in obs.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    };

    match topology {
        Topology::Tbptt => {
            let mut net = DenseLstm::new(d, m, k, 1)?;
            flops::reset();
            for _ in 0..steps {
                draw(&mut obs);
                net.predict(&obs, &mut grad)?;
            }
            Ok(flops::read() as f64 / steps as f64)
        }
        _ => {
            let mut net = build_staged(topology, d, u, m, 1)?;
            while net.current_stage() + 1 < net.spec().total_stages {
                net.advance_stage_now();
            }
            flops::reset();
            for _ in 0..steps {
                draw(&mut obs);
                net.step(&obs, &mut grad)?;
            }
            Ok(flops::read() as f64 / steps as f64)
        }
    }
}

/// A staged network shaped like the given topology measurement target.
pub fn build_staged(
    topology: Topology,
    d: usize,
    u: usize,
    m: usize,
    seed: u64,
) -> Result<Network> {
    let spec = match topology {
        Topology::Columnar => StageSpec {
            features_per_stage: d,
            steps_per_stage: 0,
            total_stages: 1,
        },
        Topology::Ccn => {
            if u == 0 || d % u != 0 {
                return Err(Error::InvalidConfig(format!(
                    "feature count {d} is not a whole number of stages of {u}"
                )));
            }
            StageSpec {
                features_per_stage: u,
                steps_per_stage: 1,
                total_stages: d / u,
            }
        }
        Topology::Constructive => StageSpec {
            features_per_stage: 1,
            steps_per_stage: 1,
            total_stages: d,
        },
        Topology::Tbptt => {
            return Err(Error::InvalidConfig(
                "tbptt is not a staged topology".into(),
            ))
        }
    };
    Network::new(m, spec, NormSettings::default(), seed)
}

/// Elementwise error ratios against a chosen baseline method.
/// `errors[method][task]` must be positive for the baseline.
pub fn normalized_error(errors: &[Vec<f64>], baseline: usize) -> Result<Vec<Vec<f64>>> {
    let base = errors
        .get(baseline)
        .ok_or_else(|| Error::InvalidConfig("baseline index out of range".into()))?;
    if base.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidConfig(
            "baseline error must be positive in every task".into(),
        ));
    }
    errors
        .iter()
        .map(|method| {
            if method.len() != base.len() {
                return Err(Error::InvalidConfig(
                    "methods disagree on the task count".into(),
                ));
            }
            Ok(method.iter().zip(base).map(|(e, b)| e / b).collect())
        })
        .collect()
}

/// Arithmetic mean across tasks for each method.
pub fn mean_relative(relative: &[Vec<f64>]) -> Vec<f64> {
    relative
        .iter()
        .map(|tasks| tasks.iter().sum::<f64>() / tasks.len() as f64)
        .collect()
}
