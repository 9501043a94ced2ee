//! A single LSTM column: one cell with a scalar hidden state, plus exact
//! forward-mode sensitivity traces of that state with respect to every one of
//! the column's own parameters.
//!
//! The column is the unit from which all staged topologies are built. Because
//! its hidden state is a scalar, carrying one `(dh/dp, dc/dp)` pair per
//! parameter is enough to propagate exact gradients forward in time at cost
//! linear in the parameter count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flops;

/// Number of non-array parameters: four recurrent weights and four biases.
pub const SCALAR_PARAMS: usize = 8;

/// Learnable parameters of one column for input width `m`: `4m + 8` scalars.
pub fn param_count(m: usize) -> usize {
    4 * m + SCALAR_PARAMS
}

/// Parameters of one LSTM column.
///
/// The canonical flat ordering used by traces, gradients, eligibility
/// vectors, and checkpoints is: `w_i[0..m)`, `w_f`, `w_o`, `w_g`, then
/// `u_i, u_f, u_o, u_g`, then `b_i, b_f, b_o, b_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnParams {
    pub w_i: Vec<f64>,
    pub w_f: Vec<f64>,
    pub w_o: Vec<f64>,
    pub w_g: Vec<f64>,
    pub u_i: f64,
    pub u_f: f64,
    pub u_o: f64,
    pub u_g: f64,
    pub b_i: f64,
    pub b_f: f64,
    pub b_o: f64,
    pub b_g: f64,
}

impl ColumnParams {
    pub fn zeros(m: usize) -> Self {
        Self {
            w_i: vec![0.0; m],
            w_f: vec![0.0; m],
            w_o: vec![0.0; m],
            w_g: vec![0.0; m],
            u_i: 0.0,
            u_f: 0.0,
            u_o: 0.0,
            u_g: 0.0,
            b_i: 0.0,
            b_f: 0.0,
            b_o: 0.0,
            b_g: 0.0,
        }
    }

    /// Fan-in scaled init: weights (input and recurrent) uniform in
    /// `[-1/sqrt(m), 1/sqrt(m)]`, biases zero.
    pub fn random<R: Rng>(m: usize, rng: &mut R) -> Self {
        assert!(m >= 1, "column input width must be >= 1");
        let s = 1.0 / (m as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-s..=s)).collect() };
        let w_i = draw(m);
        let w_f = draw(m);
        let w_o = draw(m);
        let w_g = draw(m);
        Self {
            w_i,
            w_f,
            w_o,
            w_g,
            u_i: rng.gen_range(-s..=s),
            u_f: rng.gen_range(-s..=s),
            u_o: rng.gen_range(-s..=s),
            u_g: rng.gen_range(-s..=s),
            b_i: 0.0,
            b_f: 0.0,
            b_o: 0.0,
            b_g: 0.0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.w_i.len()
    }

    pub fn count(&self) -> usize {
        param_count(self.input_len())
    }

    /// Read a parameter by canonical flat index.
    pub fn get(&self, idx: usize) -> f64 {
        let m = self.input_len();
        match idx {
            _ if idx < m => self.w_i[idx],
            _ if idx < 2 * m => self.w_f[idx - m],
            _ if idx < 3 * m => self.w_o[idx - 2 * m],
            _ if idx < 4 * m => self.w_g[idx - 3 * m],
            _ => match idx - 4 * m {
                0 => self.u_i,
                1 => self.u_f,
                2 => self.u_o,
                3 => self.u_g,
                4 => self.b_i,
                5 => self.b_f,
                6 => self.b_o,
                7 => self.b_g,
                _ => panic!("parameter index {idx} out of range"),
            },
        }
    }

    /// Mutable access by canonical flat index.
    pub fn get_mut(&mut self, idx: usize) -> &mut f64 {
        let m = self.input_len();
        match idx {
            _ if idx < m => &mut self.w_i[idx],
            _ if idx < 2 * m => &mut self.w_f[idx - m],
            _ if idx < 3 * m => &mut self.w_o[idx - 2 * m],
            _ if idx < 4 * m => &mut self.w_g[idx - 3 * m],
            _ => match idx - 4 * m {
                0 => &mut self.u_i,
                1 => &mut self.u_f,
                2 => &mut self.u_o,
                3 => &mut self.u_g,
                4 => &mut self.b_i,
                5 => &mut self.b_f,
                6 => &mut self.b_o,
                7 => &mut self.b_g,
                _ => panic!("parameter index {idx} out of range"),
            },
        }
    }

    /// Elementwise `theta += delta` over the canonical ordering.
    pub fn add_delta(&mut self, delta: &[f64]) {
        let m = self.input_len();
        assert_eq!(delta.len(), self.count());
        for (w, d) in self.w_i.iter_mut().zip(&delta[..m]) {
            *w += d;
        }
        for (w, d) in self.w_f.iter_mut().zip(&delta[m..2 * m]) {
            *w += d;
        }
        for (w, d) in self.w_o.iter_mut().zip(&delta[2 * m..3 * m]) {
            *w += d;
        }
        for (w, d) in self.w_g.iter_mut().zip(&delta[3 * m..4 * m]) {
            *w += d;
        }
        let s = &delta[4 * m..];
        self.u_i += s[0];
        self.u_f += s[1];
        self.u_o += s[2];
        self.u_g += s[3];
        self.b_i += s[4];
        self.b_f += s[5];
        self.b_o += s[6];
        self.b_g += s[7];
        flops::add(self.count() as u64);
    }
}

/// Cell state after a forward step, with the gate activations cached for the
/// trace recursion. Gates satisfy `i, f, o` in (0,1) and `g` in (-1,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub h: f64,
    pub c: f64,
    pub i: f64,
    pub f: f64,
    pub o: f64,
    pub g: f64,
}

impl CellState {
    pub fn zeroed() -> Self {
        Self {
            h: 0.0,
            c: 0.0,
            i: 0.0,
            f: 0.0,
            o: 0.0,
            g: 0.0,
        }
    }
}

/// Per-parameter sensitivity traces: `th[p] = dh(t)/dp`, `tc[p] = dc(t)/dp`,
/// indexed by the canonical parameter ordering. Both start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceState {
    pub th: Vec<f64>,
    pub tc: Vec<f64>,
}

impl TraceState {
    pub fn zeros(m: usize) -> Self {
        let n = param_count(m);
        Self {
            th: vec![0.0; n],
            tc: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.th.len()
    }

    pub fn is_empty(&self) -> bool {
        self.th.is_empty()
    }

    pub fn clear(&mut self) {
        self.th.iter_mut().for_each(|v| *v = 0.0);
        self.tc.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (wi, xi) in w.iter().zip(x) {
        acc = wi.mul_add(*xi, acc);
    }
    acc
}

/// One forward step of the cell.
///
/// `i = sigmoid(w_i.x + u_i h' + b_i)` and likewise for `f`, `o`;
/// `g = tanh(w_g.x + u_g h' + b_g)`; `c = f c' + i g`; `h = o tanh(c)`.
pub fn forward(params: &ColumnParams, prev: &CellState, x: &[f64]) -> Result<CellState> {
    let m = params.input_len();
    if x.len() != m {
        return Err(Error::DimensionMismatch {
            context: "column forward input",
            expected: m,
            got: x.len(),
        });
    }
    if !(prev.h.is_finite() && prev.c.is_finite()) {
        return Err(Error::NonFinite {
            context: "column forward previous state",
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "column forward input",
        });
    }

    let i = sigmoid(params.u_i.mul_add(prev.h, dot(&params.w_i, x)) + params.b_i);
    let f = sigmoid(params.u_f.mul_add(prev.h, dot(&params.w_f, x)) + params.b_f);
    let o = sigmoid(params.u_o.mul_add(prev.h, dot(&params.w_o, x)) + params.b_o);
    let g = (params.u_g.mul_add(prev.h, dot(&params.w_g, x)) + params.b_g).tanh();
    let c = f.mul_add(prev.c, i * g);
    let h = o * c.tanh();
    // 4(m+2) pre-activations, 2 per sigmoid, 2 for c, 1 for h.
    flops::add(4 * (m as u64 + 2) + 9);

    Ok(CellState { h, c, i, f, o, g })
}

// Trace recursion for parameters whose direct term enters the i, f, or g
// gate. `c_direct` already carries the gate coefficient.
#[inline]
fn trace_step_cell(
    f: f64,
    b_coef: f64,
    d_coef: f64,
    e_coef: f64,
    c_direct: f64,
    th: &mut f64,
    tc: &mut f64,
) {
    let th_old = *th;
    let tc_new = f.mul_add(*tc, b_coef.mul_add(th_old, c_direct));
    *tc = tc_new;
    *th = d_coef.mul_add(tc_new, e_coef * th_old);
}

// Same, for parameters whose direct term enters the output gate.
#[inline]
fn trace_step_out(
    f: f64,
    b_coef: f64,
    d_coef: f64,
    e_coef: f64,
    o_direct: f64,
    th: &mut f64,
    tc: &mut f64,
) {
    let th_old = *th;
    let tc_new = f.mul_add(*tc, b_coef * th_old);
    *tc = tc_new;
    *th = d_coef.mul_add(tc_new, e_coef.mul_add(th_old, o_direct));
}

/// Advance the sensitivity traces through one step.
///
/// For every parameter `p` the recursion is uniform. Each gate partial is the
/// gate's activation derivative times `(direct + u_gate * th[p])`, where the
/// direct term is `x_j`, `h(t-1)`, or `1` exactly when `p` is that gate's own
/// input weight, recurrent weight, or bias. Then
/// `tc[p] = f tc[p] + c(t-1) df + i dg + g di` and
/// `th[p] = o (1 - tanh^2(c)) tc[p] + tanh(c) do`.
///
/// `prev` must be the state the traces describe and `new` the output of
/// [`forward`] on `(params, prev, x)`.
pub fn update_traces(
    params: &ColumnParams,
    prev: &CellState,
    new: &CellState,
    x: &[f64],
    traces: &mut TraceState,
) -> Result<()> {
    let m = params.input_len();
    let n = param_count(m);
    if traces.len() != n {
        return Err(Error::DimensionMismatch {
            context: "trace state length",
            expected: n,
            got: traces.len(),
        });
    }
    if x.len() != m {
        return Err(Error::DimensionMismatch {
            context: "trace update input",
            expected: m,
            got: x.len(),
        });
    }

    let (i, f, o, g) = (new.i, new.f, new.o, new.g);
    let si = i * (1.0 - i);
    let sf = f * (1.0 - f);
    let so = o * (1.0 - o);
    let sg = 1.0 - g * g;
    let tanh_c = new.c.tanh();
    let d_coef = o * (1.0 - tanh_c * tanh_c);

    // Per-gate coefficients of the direct terms inside tc (and th for the
    // output gate); b_coef and e_coef multiply th(t-1).
    let ci = g * si;
    let cf = prev.c * sf;
    let cg = i * sg;
    let co = tanh_c * so;
    let b_coef = cg.mul_add(params.u_g, cf.mul_add(params.u_f, ci * params.u_i));
    let e_coef = co * params.u_o;
    flops::add(19);

    let (th, tc) = (&mut traces.th, &mut traces.tc);
    for j in 0..m {
        trace_step_cell(f, b_coef, d_coef, e_coef, ci * x[j], &mut th[j], &mut tc[j]);
    }
    for j in 0..m {
        let p = m + j;
        trace_step_cell(f, b_coef, d_coef, e_coef, cf * x[j], &mut th[p], &mut tc[p]);
    }
    for j in 0..m {
        let p = 2 * m + j;
        trace_step_out(f, b_coef, d_coef, e_coef, co * x[j], &mut th[p], &mut tc[p]);
    }
    for j in 0..m {
        let p = 3 * m + j;
        trace_step_cell(f, b_coef, d_coef, e_coef, cg * x[j], &mut th[p], &mut tc[p]);
    }
    let s = 4 * m;
    let hp = prev.h;
    trace_step_cell(f, b_coef, d_coef, e_coef, ci * hp, &mut th[s], &mut tc[s]);
    trace_step_cell(f, b_coef, d_coef, e_coef, cf * hp, &mut th[s + 1], &mut tc[s + 1]);
    trace_step_out(f, b_coef, d_coef, e_coef, co * hp, &mut th[s + 2], &mut tc[s + 2]);
    trace_step_cell(f, b_coef, d_coef, e_coef, cg * hp, &mut th[s + 3], &mut tc[s + 3]);
    trace_step_cell(f, b_coef, d_coef, e_coef, ci, &mut th[s + 4], &mut tc[s + 4]);
    trace_step_cell(f, b_coef, d_coef, e_coef, cf, &mut th[s + 5], &mut tc[s + 5]);
    trace_step_out(f, b_coef, d_coef, e_coef, co, &mut th[s + 6], &mut tc[s + 6]);
    trace_step_cell(f, b_coef, d_coef, e_coef, cg, &mut th[s + 7], &mut tc[s + 7]);
    // 5 ops per weight parameter, 5 per recurrent scalar, 4 per bias.
    flops::add(20 * m as u64 + 36);

    Ok(())
}
