//! Independent ground-truth gradients for verification: full-history reverse
//! accumulation over a recorded computation trace, and central finite
//! differences.
//!
//! Everything here re-transcribes the forward dynamics on its own instead of
//! calling the engine kernels, favors clarity over speed, and never touches
//! the operation counter. Gradients are taken with respect to the learnable
//! parameters only: frozen columns contribute exact zeros, and normalizer
//! statistics are treated as constants, mirroring the engine's convention.
//! Replays treat the snapshot's dynamic state as a constant, so comparisons
//! against the engine's traces expect a snapshot taken at an episode start
//! (zero traces).

use crate::column::{sigmoid, ColumnParams};
use crate::dense::DenseParams;
use crate::error::{Error, Result};
use crate::net::{Network, ParamLoc};

#[derive(Debug, Clone, Copy)]
struct CellRec {
    h_prev: f64,
    c_prev: f64,
    i: f64,
    f: f64,
    o: f64,
    g: f64,
    c: f64,
    h: f64,
}

fn cell_forward(p: &ColumnParams, h_prev: f64, c_prev: f64, x: &[f64]) -> CellRec {
    let mut zi = p.b_i + p.u_i * h_prev;
    let mut zf = p.b_f + p.u_f * h_prev;
    let mut zo = p.b_o + p.u_o * h_prev;
    let mut zg = p.b_g + p.u_g * h_prev;
    for j in 0..x.len() {
        zi += p.w_i[j] * x[j];
        zf += p.w_f[j] * x[j];
        zo += p.w_o[j] * x[j];
        zg += p.w_g[j] * x[j];
    }
    let i = sigmoid(zi);
    let f = sigmoid(zf);
    let o = sigmoid(zo);
    let g = zg.tanh();
    let c = f * c_prev + i * g;
    let h = o * c.tanh();
    CellRec {
        h_prev,
        c_prev,
        i,
        f,
        o,
        g,
        c,
        h,
    }
}

/// Reverse accumulation of `dh(t)/dp` for one column over its own recorded
/// steps. `inputs[s]` is the column's input at step `s`; the pass runs from
/// step `t` back to step 0.
fn cell_backward(p: &ColumnParams, recs: &[CellRec], inputs: &[&[f64]], t: usize) -> Vec<f64> {
    let m = p.input_len();
    let mut grad = vec![0.0; p.count()];
    let mut dh = 1.0;
    let mut dc = 0.0;
    for s in (0..=t).rev() {
        let r = &recs[s];
        let tc = r.c.tanh();
        dc += dh * r.o * (1.0 - tc * tc);
        let dpre_o = dh * tc * r.o * (1.0 - r.o);
        let dpre_i = dc * r.g * r.i * (1.0 - r.i);
        let dpre_f = dc * r.c_prev * r.f * (1.0 - r.f);
        let dpre_g = dc * r.i * (1.0 - r.g * r.g);
        let x = inputs[s];
        for j in 0..m {
            grad[j] += dpre_i * x[j];
            grad[m + j] += dpre_f * x[j];
            grad[2 * m + j] += dpre_o * x[j];
            grad[3 * m + j] += dpre_g * x[j];
        }
        grad[4 * m] += dpre_i * r.h_prev;
        grad[4 * m + 1] += dpre_f * r.h_prev;
        grad[4 * m + 2] += dpre_o * r.h_prev;
        grad[4 * m + 3] += dpre_g * r.h_prev;
        grad[4 * m + 4] += dpre_i;
        grad[4 * m + 5] += dpre_f;
        grad[4 * m + 6] += dpre_o;
        grad[4 * m + 7] += dpre_g;
        dh = dpre_i * p.u_i + dpre_f * p.u_f + dpre_o * p.u_o + dpre_g * p.u_g;
        dc *= r.f;
    }
    grad
}

/// `dh(t)/dp` of a lone column driven from a zero state by `inputs`,
/// for every parameter in canonical order.
pub fn column_grad_of_h(params: &ColumnParams, inputs: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if t >= inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside stream of length {}",
            inputs.len()
        )));
    }
    let mut recs = Vec::with_capacity(t + 1);
    let (mut h, mut c) = (0.0, 0.0);
    for x in inputs.iter().take(t + 1) {
        let rec = cell_forward(params, h, c, x);
        h = rec.h;
        c = rec.c;
        recs.push(rec);
    }
    let views: Vec<&[f64]> = inputs.iter().take(t + 1).map(|v| v.as_slice()).collect();
    Ok(cell_backward(params, &recs, &views, t))
}

struct NetReplay {
    /// Full input vector per step: observation then every stage's normalized
    /// features, in stage order. Stage `s` columns read the first
    /// `obs + s*u` entries.
    inputs: Vec<Vec<f64>>,
    /// Per column (flat feature order), per step.
    cells: Vec<Vec<CellRec>>,
    /// Normalization denominators per column, per step.
    denoms: Vec<Vec<f64>>,
    /// Normalized feature values per step (same layout as `inputs` tail).
    features: Vec<Vec<f64>>,
}

fn replay_network(net: &Network, stream: &[Vec<f64>], upto: usize) -> Result<NetReplay> {
    let u = net.spec().features_per_stage;
    let stages = net.stages();
    let d = net.feature_count();
    let norm = *net.norm_settings();

    let mut hs: Vec<f64> = Vec::with_capacity(d);
    let mut cs: Vec<f64> = Vec::with_capacity(d);
    let mut means: Vec<f64> = Vec::with_capacity(d);
    let mut vars: Vec<f64> = Vec::with_capacity(d);
    for cols in stages {
        for col in cols {
            hs.push(col.state.h);
            cs.push(col.state.c);
            means.push(col.norm.mean);
            vars.push(col.norm.var);
        }
    }

    let mut replay = NetReplay {
        inputs: Vec::with_capacity(upto + 1),
        cells: vec![Vec::with_capacity(upto + 1); d],
        denoms: vec![Vec::with_capacity(upto + 1); d],
        features: Vec::with_capacity(upto + 1),
    };

    for x in stream.iter().take(upto + 1) {
        let mut input = x.clone();
        let mut feats = Vec::with_capacity(d);
        for (s, cols) in stages.iter().enumerate() {
            let width = net.obs_width() + s * u;
            for (c, col) in cols.iter().enumerate() {
                let k = s * u + c;
                let rec = cell_forward(&col.params, hs[k], cs[k], &input[..width]);
                hs[k] = rec.h;
                cs[k] = rec.c;
                replay.cells[k].push(rec);
                let value = if norm.enabled {
                    if !col.frozen {
                        let old_mean = means[k];
                        means[k] = norm.beta * old_mean + (1.0 - norm.beta) * rec.h;
                        let v = norm.beta * vars[k]
                            + (1.0 - norm.beta) * ((means[k] - rec.h) * (old_mean - rec.h));
                        vars[k] = v.max(0.0);
                    }
                    let denom = vars[k].sqrt().max(norm.eps);
                    replay.denoms[k].push(denom);
                    (rec.h - means[k]) / denom
                } else {
                    replay.denoms[k].push(1.0);
                    rec.h
                };
                feats.push(value);
            }
            input.extend_from_slice(&feats[s * u..(s + 1) * u]);
        }
        replay.inputs.push(input);
        replay.features.push(feats);
    }
    Ok(replay)
}

/// Exact `dy(t)/dtheta` over the learnable parameters of a staged network by
/// full-history reverse accumulation, in the engine's flat layout. Frozen
/// column entries are zero.
pub fn bptt_full(net: &Network, stream: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if t >= stream.len() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside stream of length {}",
            stream.len()
        )));
    }
    let replay = replay_network(net, stream, t)?;
    let u = net.spec().features_per_stage;
    let mut grad = vec![0.0; net.param_len()];

    for (s, cols) in net.stages().iter().enumerate() {
        let width = net.obs_width() + s * u;
        for (c, col) in cols.iter().enumerate() {
            let k = s * u + c;
            grad[net.head_index(s, c)] = replay.features[t][k];
            if col.frozen {
                continue;
            }
            let scale = net.out_weights()[k] / replay.denoms[k][t];
            let views: Vec<&[f64]> = replay.inputs[..=t]
                .iter()
                .map(|inp| &inp[..width])
                .collect();
            let col_grad = cell_backward(&col.params, &replay.cells[k], &views, t);
            let dst = net.column_range(s, c);
            for (slot, g) in grad[dst].iter_mut().zip(&col_grad) {
                *slot = scale * g;
            }
        }
    }
    Ok(grad)
}

/// The prediction sequence `y(0..=t)` under the oracle's own replay.
pub fn replay_predictions(net: &Network, stream: &[Vec<f64>], upto: usize) -> Result<Vec<f64>> {
    let replay = replay_network(net, stream, upto)?;
    Ok(replay
        .features
        .iter()
        .map(|feats| {
            feats
                .iter()
                .zip(net.out_weights())
                .map(|(h, w)| h * w)
                .sum()
        })
        .collect())
}

/// Central-difference gradient `(y(theta + d e_p) - y(theta - d e_p)) / 2d`
/// at step `t`, replaying the stream deterministically for every probe.
/// Frozen column parameters are skipped and reported as zero.
pub fn finite_diff(net: &Network, stream: &[Vec<f64>], t: usize, delta: f64) -> Result<Vec<f64>> {
    assert!(delta > 0.0, "finite-difference step must be positive");
    if t >= stream.len() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside stream of length {}",
            stream.len()
        )));
    }
    let n = net.param_len();
    let mut grad = vec![0.0; n];
    for p in 0..n {
        if let ParamLoc::Column { stage, col, .. } = net.locate(p) {
            if net.is_frozen(stage, col) {
                continue;
            }
        }
        let mut plus = net.clone();
        plus.nudge_param(p, delta);
        let mut minus = net.clone();
        minus.nudge_param(p, -delta);
        let yp = replay_predictions(&plus, stream, t)?[t];
        let ym = replay_predictions(&minus, stream, t)?[t];
        grad[p] = (yp - ym) / (2.0 * delta);
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
struct DenseRec {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

fn dense_forward_rec(p: &DenseParams, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> DenseRec {
    let (d, m) = (p.d, p.m);
    let mut rec = DenseRec {
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i: vec![0.0; d],
        f: vec![0.0; d],
        o: vec![0.0; d],
        g: vec![0.0; d],
        c: vec![0.0; d],
        h: vec![0.0; d],
    };
    for r in 0..d {
        let mut z = [p.b[0][r], p.b[1][r], p.b[2][r], p.b[3][r]];
        for (gi, zg) in z.iter_mut().enumerate() {
            for j in 0..m {
                *zg += p.w[gi][r * m + j] * x[j];
            }
            for j in 0..d {
                *zg += p.u[gi][r * d + j] * h_prev[j];
            }
        }
        rec.i[r] = sigmoid(z[0]);
        rec.f[r] = sigmoid(z[1]);
        rec.o[r] = sigmoid(z[2]);
        rec.g[r] = z[3].tanh();
        rec.c[r] = rec.f[r] * c_prev[r] + rec.i[r] * rec.g[r];
        rec.h[r] = rec.o[r] * rec.c[r].tanh();
    }
    rec
}

/// Exact `dy(t)/dtheta` of the dense LSTM by reverse accumulation over the
/// entire history from a zero initial state, in the dense flat layout.
pub fn dense_bptt_full(params: &DenseParams, stream: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if t >= stream.len() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside stream of length {}",
            stream.len()
        )));
    }
    let (d, m) = (params.d, params.m);
    let mut recs = Vec::with_capacity(t + 1);
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    for x in stream.iter().take(t + 1) {
        let rec = dense_forward_rec(params, &h, &c, x);
        h = rec.h.clone();
        c = rec.c.clone();
        recs.push(rec);
    }

    let dm = d * m;
    let dd = d * d;
    let mut grad = vec![0.0; params.len()];
    for (r, hv) in recs[t].h.iter().enumerate() {
        grad[4 * dm + 4 * dd + 4 * d + r] = *hv;
    }
    let mut dh: Vec<f64> = params.head.clone();
    let mut dc = vec![0.0; d];
    for s in (0..=t).rev() {
        let rec = &recs[s];
        let mut dpre = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        for r in 0..d {
            let tc = rec.c[r].tanh();
            dc[r] += dh[r] * rec.o[r] * (1.0 - tc * tc);
            dpre[2][r] = dh[r] * tc * rec.o[r] * (1.0 - rec.o[r]);
            dpre[0][r] = dc[r] * rec.g[r] * rec.i[r] * (1.0 - rec.i[r]);
            dpre[1][r] = dc[r] * rec.c_prev[r] * rec.f[r] * (1.0 - rec.f[r]);
            dpre[3][r] = dc[r] * rec.i[r] * (1.0 - rec.g[r] * rec.g[r]);
        }
        let x = &stream[s];
        for g in 0..4 {
            for r in 0..d {
                let dp = dpre[g][r];
                for j in 0..m {
                    grad[g * dm + r * m + j] += dp * x[j];
                }
                for j in 0..d {
                    grad[4 * dm + g * dd + r * d + j] += dp * rec.h_prev[j];
                }
                grad[4 * dm + 4 * dd + g * d + r] += dp;
            }
        }
        for j in 0..d {
            let mut acc = 0.0;
            for g in 0..4 {
                for r in 0..d {
                    acc += dpre[g][r] * params.u[g][r * d + j];
                }
            }
            dh[j] = acc;
        }
        for r in 0..d {
            dc[r] *= rec.f[r];
        }
    }
    Ok(grad)
}

/// Central differences for the dense LSTM, replaying from a zero state.
pub fn finite_diff_dense(
    params: &DenseParams,
    stream: &[Vec<f64>],
    t: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    assert!(delta > 0.0);
    if t >= stream.len() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside stream of length {}",
            stream.len()
        )));
    }
    let replay_y = |p: &DenseParams| -> f64 {
        let mut h = vec![0.0; p.d];
        let mut c = vec![0.0; p.d];
        for x in stream.iter().take(t + 1) {
            let rec = dense_forward_rec(p, &h, &c, x);
            h = rec.h;
            c = rec.c;
        }
        p.head.iter().zip(&h).map(|(w, hv)| w * hv).sum()
    };
    let n = params.len();
    let mut grad = vec![0.0; n];
    for p in 0..n {
        let mut plus = params.clone();
        *plus.get_mut(p) += delta;
        let mut minus = params.clone();
        *minus.get_mut(p) -= delta;
        grad[p] = (replay_y(&plus) - replay_y(&minus)) / (2.0 * delta);
    }
    Ok(grad)
}
