//! Fully connected LSTM baseline trained by truncated backpropagation
//! through time over a sliding window of stored activations.
//!
//! The gradient is recomputed every step over the last `k` steps. Each window
//! record stores the activations and the recurrent weights in force at that
//! step, so per-step parameter updates replay exactly the arithmetic a
//! forward-accumulated trace would produce; a width-1 network driven this way
//! with an untruncated window follows the columnar trace engine step for
//! step.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::column::sigmoid;
use crate::error::{Error, Result};
use crate::flops;
use crate::td::Predictor;

/// Parameters of a width-`d` LSTM with input width `m`, plus the linear head.
///
/// Flat layout: `w_i, w_f, w_o, w_g` (each `d*m`, row-major), `u_i, u_f,
/// u_o, u_g` (each `d*d`), `b_i, b_f, b_o, b_g` (each `d`), `head` (`d`).
/// At `d = 1` this coincides with the canonical column ordering followed by
/// the head weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub d: usize,
    pub m: usize,
    pub w: [Vec<f64>; 4],
    pub u: [Vec<f64>; 4],
    pub b: [Vec<f64>; 4],
    pub head: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            w: std::array::from_fn(|_| vec![0.0; d * m]),
            u: std::array::from_fn(|_| vec![0.0; d * d]),
            b: std::array::from_fn(|_| vec![0.0; d]),
            head: vec![0.0; d],
        }
    }

    /// Weights uniform in `[-1/sqrt(m+d), 1/sqrt(m+d)]`, biases and head zero.
    pub fn random<R: Rng>(d: usize, m: usize, rng: &mut R) -> Self {
        let s = 1.0 / ((m + d) as f64).sqrt();
        let mut p = Self::zeros(d, m);
        for g in 0..4 {
            for w in p.w[g].iter_mut() {
                *w = rng.gen_range(-s..=s);
            }
            for u in p.u[g].iter_mut() {
                *u = rng.gen_range(-s..=s);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        4 * self.d * self.m + 4 * self.d * self.d + 4 * self.d + self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn section(&self, idx: usize) -> (usize, usize) {
        // (section id 0..13, offset); sections follow the flat layout.
        let dm = self.d * self.m;
        let dd = self.d * self.d;
        let mut base = 0;
        for s in 0..4 {
            if idx < base + dm {
                return (s, idx - base);
            }
            base += dm;
        }
        for s in 0..4 {
            if idx < base + dd {
                return (4 + s, idx - base);
            }
            base += dd;
        }
        for s in 0..4 {
            if idx < base + self.d {
                return (8 + s, idx - base);
            }
            base += self.d;
        }
        assert!(idx < base + self.d, "parameter index {idx} out of range");
        (12, idx - base)
    }

    pub fn get(&self, idx: usize) -> f64 {
        match self.section(idx) {
            (s, o) if s < 4 => self.w[s][o],
            (s, o) if s < 8 => self.u[s - 4][o],
            (s, o) if s < 12 => self.b[s - 8][o],
            (_, o) => self.head[o],
        }
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut f64 {
        match self.section(idx) {
            (s, o) if s < 4 => &mut self.w[s][o],
            (s, o) if s < 8 => &mut self.u[s - 4][o],
            (s, o) if s < 12 => &mut self.b[s - 8][o],
            (_, o) => &mut self.head[o],
        }
    }
}

/// One stored step: inputs, surrounding states, gate activations, the
/// recurrent weights in force, and backward-pass coefficient caches.
#[derive(Debug, Clone)]
struct WindowRecord {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4], // i, f, o, g
    h: Vec<f64>,
    u_snap: [Vec<f64>; 4],
    // tanh(c); o(1-tanh^2 c); c_prev f(1-f); g i(1-i); i (1-g^2); tanh(c) o(1-o)
    t: Vec<f64>,
    od: Vec<f64>,
    fsc: Vec<f64>,
    gsi: Vec<f64>,
    isg: Vec<f64>,
    tso: Vec<f64>,
}

/// Ring of the most recent window records. Never holds more than `k + 1`.
#[derive(Debug, Clone, Default)]
pub struct TruncationWindow {
    records: VecDeque<WindowRecord>,
    k: usize,
}

impl TruncationWindow {
    fn new(k: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(k + 1),
            k,
        }
    }

    fn push(&mut self, rec: WindowRecord) {
        if self.records.len() > self.k {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fully connected LSTM with truncated-BPTT gradients, sharing the
/// [`Predictor`] surface with the columnar networks. No feature
/// normalization is applied.
#[derive(Debug, Clone)]
pub struct DenseLstm {
    pub params: DenseParams,
    h: Vec<f64>,
    c: Vec<f64>,
    window: TruncationWindow,
    scratch: Backward,
}

#[derive(Debug, Clone, Default)]
struct Backward {
    dh: Vec<f64>,
    dc: Vec<f64>,
    dh_prev: Vec<f64>,
    dpre: [Vec<f64>; 4],
}

impl DenseLstm {
    pub fn new(d: usize, m: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_params(DenseParams::random(d, m, &mut rng), k)
    }

    pub fn from_params(params: DenseParams, k: usize) -> Result<Self> {
        if params.d < 1 {
            return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
        }
        if params.m < 1 {
            return Err(Error::InvalidConfig("input width must be >= 1".into()));
        }
        if k < 1 {
            return Err(Error::InvalidConfig(
                "truncation length must be >= 1".into(),
            ));
        }
        let d = params.d;
        Ok(Self {
            params,
            h: vec![0.0; d],
            c: vec![0.0; d],
            window: TruncationWindow::new(k),
            scratch: Backward::default(),
        })
    }

    pub fn truncation(&self) -> usize {
        self.window.k
    }

    pub fn hidden(&self) -> &[f64] {
        &self.h
    }

    pub fn window(&self) -> &TruncationWindow {
        &self.window
    }

    /// One forward step; caches activations (and the recurrent weights in
    /// force) into the window.
    pub fn forward(&mut self, x: &[f64]) -> Result<()> {
        let (d, m) = (self.params.d, self.params.m);
        if x.len() != m {
            return Err(Error::DimensionMismatch {
                context: "dense forward input",
                expected: m,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dense forward input",
            });
        }

        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
        for g in 0..4 {
            let wg = &self.params.w[g];
            let ug = &self.params.u[g];
            for r in 0..d {
                let mut acc = self.params.b[g][r];
                for (w, xv) in wg[r * m..(r + 1) * m].iter().zip(x) {
                    acc = w.mul_add(*xv, acc);
                }
                for (u, hv) in ug[r * d..(r + 1) * d].iter().zip(&self.h) {
                    acc = u.mul_add(*hv, acc);
                }
                gates[g][r] = if g == 3 { acc.tanh() } else { sigmoid(acc) };
            }
        }
        flops::add((4 * d * (m + d) + 6 * d) as u64);

        let h_prev = std::mem::replace(&mut self.h, vec![0.0; d]);
        let c_prev = std::mem::replace(&mut self.c, vec![0.0; d]);
        let mut t = vec![0.0; d];
        let mut od = vec![0.0; d];
        let mut fsc = vec![0.0; d];
        let mut gsi = vec![0.0; d];
        let mut isg = vec![0.0; d];
        let mut tso = vec![0.0; d];
        for r in 0..d {
            let (i, f, o, g) = (gates[0][r], gates[1][r], gates[2][r], gates[3][r]);
            let c = f.mul_add(c_prev[r], i * g);
            let tc = c.tanh();
            self.c[r] = c;
            self.h[r] = o * tc;
            t[r] = tc;
            od[r] = o * (1.0 - tc * tc);
            fsc[r] = c_prev[r] * (f * (1.0 - f));
            gsi[r] = g * (i * (1.0 - i));
            isg[r] = i * (1.0 - g * g);
            tso[r] = tc * (o * (1.0 - o));
        }
        flops::add(18 * d as u64);

        self.window.push(WindowRecord {
            x: x.to_vec(),
            h_prev,
            c_prev,
            h: self.h.clone(),
            u_snap: self.params.u.clone(),
            gates,
            t,
            od,
            fsc,
            gsi,
            isg,
            tso,
        });
        Ok(())
    }

    /// Current prediction of the linear head.
    pub fn output(&self) -> f64 {
        let mut y = 0.0;
        for (w, h) in self.params.head.iter().zip(&self.h) {
            y = w.mul_add(*h, y);
        }
        flops::add(self.params.d as u64);
        y
    }

    /// Backpropagate `head_error` (the gradient of the loss with respect to
    /// the prediction) through at most `k` stored steps. Contributions older
    /// than the window are dropped. Fills `grad` over the flat layout.
    pub fn truncated_gradient(&mut self, head_error: f64, grad: &mut Vec<f64>) {
        let (d, m) = (self.params.d, self.params.m);
        let dm = d * m;
        let dd = d * d;
        grad.clear();
        grad.resize(self.params.len(), 0.0);
        let n = self.window.records.len();
        if n == 0 {
            return;
        }

        let s = &mut self.scratch;
        s.dh.clear();
        s.dh
            .extend(self.params.head.iter().map(|w| head_error * w));
        s.dc.clear();
        s.dc.resize(d, 0.0);
        for v in s.dpre.iter_mut() {
            v.clear();
            v.resize(d, 0.0);
        }
        s.dh_prev.clear();
        s.dh_prev.resize(d, 0.0);
        flops::add(d as u64);

        let last = self.window.records.back().unwrap();
        for (r, h) in last.h.iter().enumerate() {
            grad[4 * dm + 4 * dd + 4 * d + r] = head_error * h;
        }
        flops::add(d as u64);

        let depth = n.min(self.window.k);
        for (back, rec) in self.window.records.iter().rev().take(depth).enumerate() {
            let deepest = back + 1 == depth;
            for r in 0..d {
                s.dc[r] = s.dh[r].mul_add(rec.od[r], s.dc[r]);
                s.dpre[2][r] = s.dh[r] * rec.tso[r];
                s.dpre[1][r] = s.dc[r] * rec.fsc[r];
                s.dpre[0][r] = s.dc[r] * rec.gsi[r];
                s.dpre[3][r] = s.dc[r] * rec.isg[r];
            }
            for g in 0..4 {
                let wbase = g * dm;
                let ubase = 4 * dm + g * dd;
                let bbase = 4 * dm + 4 * dd + g * d;
                for r in 0..d {
                    let dp = s.dpre[g][r];
                    for (slot, xv) in grad[wbase + r * m..wbase + (r + 1) * m]
                        .iter_mut()
                        .zip(&rec.x)
                    {
                        *slot = dp.mul_add(*xv, *slot);
                    }
                    for (slot, hv) in grad[ubase + r * d..ubase + (r + 1) * d]
                        .iter_mut()
                        .zip(&rec.h_prev)
                    {
                        *slot = dp.mul_add(*hv, *slot);
                    }
                    grad[bbase + r] += dp;
                }
            }
            flops::add((5 * d + 4 * dm + 4 * dd + 4 * d) as u64);

            if !deepest {
                for v in s.dh_prev.iter_mut() {
                    *v = 0.0;
                }
                for g in 0..4 {
                    let ug = &rec.u_snap[g];
                    for r in 0..d {
                        let dp = s.dpre[g][r];
                        for (dst, u) in s.dh_prev.iter_mut().zip(&ug[r * d..(r + 1) * d]) {
                            *dst = dp.mul_add(*u, *dst);
                        }
                    }
                }
                for r in 0..d {
                    s.dc[r] *= rec.gates[1][r];
                }
                std::mem::swap(&mut s.dh, &mut s.dh_prev);
                flops::add((4 * dd + d) as u64);
            }
        }
    }

    pub fn reset_state(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        self.c.iter_mut().for_each(|v| *v = 0.0);
        self.window.records.clear();
    }
}

impl DenseLstm {
    /// Serialize parameters, recurrent state, and the full truncation window
    /// so a resumed run reproduces the uninterrupted one bit for bit.
    pub fn write_state(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        use crate::wire::*;
        put_u32(w, self.params.d as u32)?;
        put_u32(w, self.params.m as u32)?;
        put_u32(w, self.window.k as u32)?;
        let flat: Vec<f64> = (0..self.params.len()).map(|i| self.params.get(i)).collect();
        put_f64s(w, &flat)?;
        put_f64s(w, &self.h)?;
        put_f64s(w, &self.c)?;
        put_u32(w, self.window.records.len() as u32)?;
        for rec in &self.window.records {
            put_f64s(w, &rec.x)?;
            put_f64s(w, &rec.h_prev)?;
            put_f64s(w, &rec.c_prev)?;
            for g in &rec.gates {
                put_f64s(w, g)?;
            }
            put_f64s(w, &rec.h)?;
            for u in &rec.u_snap {
                put_f64s(w, u)?;
            }
            for cache in [&rec.t, &rec.od, &rec.fsc, &rec.gsi, &rec.isg, &rec.tso] {
                put_f64s(w, cache)?;
            }
        }
        Ok(())
    }

    pub fn read_state(r: &mut impl std::io::Read) -> Result<Self> {
        use crate::wire::*;
        let d = get_u32(r)? as usize;
        let m = get_u32(r)? as usize;
        let k = get_u32(r)? as usize;
        let flat = get_f64s(r)?;
        let mut params = DenseParams::zeros(d, m);
        if flat.len() != params.len() {
            return Err(Error::InvalidConfig(
                "checkpoint dense parameter count is inconsistent".into(),
            ));
        }
        for (i, v) in flat.iter().enumerate() {
            *params.get_mut(i) = *v;
        }
        let mut net = Self::from_params(params, k)?;
        net.h = get_f64s(r)?;
        net.c = get_f64s(r)?;
        let n_rec = get_u32(r)? as usize;
        for _ in 0..n_rec {
            let x = get_f64s(r)?;
            let h_prev = get_f64s(r)?;
            let c_prev = get_f64s(r)?;
            let gates = [get_f64s(r)?, get_f64s(r)?, get_f64s(r)?, get_f64s(r)?];
            let h = get_f64s(r)?;
            let u_snap = [get_f64s(r)?, get_f64s(r)?, get_f64s(r)?, get_f64s(r)?];
            let t = get_f64s(r)?;
            let od = get_f64s(r)?;
            let fsc = get_f64s(r)?;
            let gsi = get_f64s(r)?;
            let isg = get_f64s(r)?;
            let tso = get_f64s(r)?;
            net.window.records.push_back(WindowRecord {
                x,
                h_prev,
                c_prev,
                gates,
                h,
                u_snap,
                t,
                od,
                fsc,
                gsi,
                isg,
                tso,
            });
        }
        Ok(net)
    }
}

impl Predictor for DenseLstm {
    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn predict(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
        self.forward(x)?;
        let y = self.output();
        self.truncated_gradient(1.0, grad);
        Ok(y)
    }

    fn apply_update(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.params.len());
        let mut idx = 0;
        for g in 0..4 {
            for w in self.params.w[g].iter_mut() {
                *w += delta[idx];
                idx += 1;
            }
        }
        for g in 0..4 {
            for u in self.params.u[g].iter_mut() {
                *u += delta[idx];
                idx += 1;
            }
        }
        for g in 0..4 {
            for b in self.params.b[g].iter_mut() {
                *b += delta[idx];
                idx += 1;
            }
        }
        for w in self.params.head.iter_mut() {
            *w += delta[idx];
            idx += 1;
        }
        flops::add(delta.len() as u64);
    }

    fn reset_dynamics(&mut self) {
        self.reset_state();
    }
}

/// Estimated per-step operation cost of truncated BPTT:
/// `(k+1)(4d^2 + 4dm + 4d)`.
pub fn tbptt_cost(k: usize, d: usize, m: usize) -> Result<u64> {
    if k < 1 {
        return Err(Error::InvalidConfig(
            "truncation length must be >= 1".into(),
        ));
    }
    if d < 1 {
        return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
    }
    let (k, d, m) = (k as u64, d as u64, m as u64);
    Ok((k + 1) * (4 * d * d + 4 * d * m + 4 * d))
}

/// For each truncation length, the widest network whose estimated cost stays
/// within `budget * (1 + tolerance)`. Lengths that cannot fit even one unit
/// are skipped.
pub fn budget_pairs(
    budget_ops: u64,
    m: usize,
    tolerance: f64,
    truncations: &[usize],
) -> Result<Vec<(usize, usize, u64)>> {
    if budget_ops == 0 {
        return Err(Error::InvalidConfig("budget must be positive".into()));
    }
    if !(0.0..1.0).contains(&tolerance) {
        return Err(Error::InvalidConfig("tolerance must lie in [0,1)".into()));
    }
    let limit = (budget_ops as f64 * (1.0 + tolerance)).floor() as u64;
    let mut out = Vec::new();
    for &k in truncations {
        let mut best = None;
        let mut d = 1;
        loop {
            let cost = tbptt_cost(k, d, m)?;
            if cost > limit {
                break;
            }
            best = Some((d, cost));
            d += 1;
        }
        if let Some((d, cost)) = best {
            out.push((k, d, cost));
        }
    }
    Ok(out)
}
