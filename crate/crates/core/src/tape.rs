//! Reverse-mode differentiation of the unrolled detection pipeline.
//!
//! A [`Tape`] records one forward pass of the multi-stage detector on a block
//! as a list of coarse operations (observation model, degree-1 term, variable
//! update, factor update, readout, branch merge, bit penalty). Each operation
//! stores its output; [`Tape::backward`] walks the list in reverse and applies
//! the vector-Jacobian product of each operation, accumulating the gradient
//! with respect to the flat parameter vector of [`GapParams::flatten`].
//! Complex taps are differentiated as independent real and imaginary parts.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gap::{preprocessor_for, GapParams};
use crate::gfg::{
    edge_pair_value, fac_kernel, readout_kernel, var_kernel, xi_kernel, DetectorOutput, Dims, FactorTables,
    NbpLayout, MESSAGE_CLAMP,
};
use crate::logdomain::{log_sum_exp, normalize_in_place, softmax_into};
use crate::math;
use crate::metrics::{bit_penalty, LLR_CLIP};
use crate::modem::Constellation;
use crate::observation::{linear_observation, BlockContext, ObservationModel, Preprocessor};

/// Handle of a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
struct UnitSpan {
    nbp: usize,
    w_p: usize,
    taps: usize,
    n_taps: usize,
}

enum Op {
    Constant,
    Observation {
        unit: usize,
        tables: FactorTables,
        model: ObservationModel,
    },
    Xi {
        unit: usize,
        n: usize,
        obs: usize,
        prior: usize,
    },
    Var {
        unit: usize,
        n: usize,
        obs: usize,
        xi: usize,
        nu: Option<usize>,
    },
    Fac {
        unit: usize,
        n: usize,
        obs: usize,
        mu: usize,
    },
    Readout {
        obs: usize,
        xi: usize,
        nu: usize,
    },
    Merge {
        inputs: Vec<usize>,
    },
    Penalty {
        app: usize,
        truth: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    adj_len: usize,
}

/// A recorded forward pass over one block.
pub struct Tape<'a> {
    params: &'a GapParams,
    theta: Vec<f64>,
    spans: Vec<UnitSpan>,
    layout: NbpLayout,
    ctx: &'a BlockContext,
    constellation: &'a Constellation,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a GapParams, ctx: &'a BlockContext, constellation: &'a Constellation) -> Result<Self> {
        params.check_block(ctx)?;
        let layout = params.nbp_layout();
        let n_taps = params.config.taps_per_unit();
        let unit_len = params.unit_len();
        let spans = (0..params.config.units())
            .map(|u| {
                let base = u * unit_len;
                UnitSpan {
                    nbp: base,
                    w_p: base + layout.len(),
                    taps: base + layout.len() + params.config.iters_per_stage,
                    n_taps,
                }
            })
            .collect();
        Ok(Self {
            params,
            theta: params.flatten(),
            spans,
            layout: NbpLayout {
                block_len: ctx.block_len,
                ..layout
            },
            ctx,
            constellation,
            nodes: Vec::new(),
        })
    }

    fn push(&mut self, op: Op, value: Vec<f64>, adj_len: usize) -> NodeId {
        self.nodes.push(Node { op, value, adj_len });
        NodeId(self.nodes.len() - 1)
    }

    fn nbp(&self, unit: usize) -> &[f64] {
        let s = self.spans[unit].nbp;
        &self.theta[s..s + self.layout.len()]
    }

    fn tables(&self, obs: usize) -> &FactorTables {
        match &self.nodes[obs].op {
            Op::Observation { tables, .. } => tables,
            _ => unreachable!("not an observation node"),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Records a constant `K × M` table (e.g. the initial prior).
    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let n = values.len();
        self.push(Op::Constant, values, n)
    }

    /// Records the observation model of `unit`.
    pub fn observation(&mut self, unit: usize) -> Result<NodeId> {
        let model = self.params.unit_observation(unit, self.ctx)?;
        let tables = FactorTables::new(&model, self.constellation);
        let adj = tables.lin.len() + tables.quad.len() + tables.pair.len();
        Ok(self.push(Op::Observation { unit, tables, model }, Vec::new(), adj))
    }

    pub fn xi(&mut self, unit: usize, n: usize, obs: NodeId, prior: NodeId) -> NodeId {
        let t = self.tables(obs.0);
        let mut out = alloc::vec![0.0; t.dims.k * t.dims.m];
        let w_p = self.theta[self.spans[unit].w_p + n];
        xi_kernel(t, &self.layout, self.nbp(unit), n, &self.nodes[prior.0].value, w_p, &mut out);
        let len = out.len();
        self.push(Op::Xi { unit, n, obs: obs.0, prior: prior.0 }, out, len)
    }

    pub fn var(&mut self, unit: usize, n: usize, obs: NodeId, xi: NodeId, nu: Option<NodeId>) -> NodeId {
        let dims = self.tables(obs.0).dims;
        let mut out = alloc::vec![0.0; dims.msg_len()];
        var_kernel(
            dims,
            &self.layout,
            self.nbp(unit),
            n,
            &self.nodes[xi.0].value,
            nu.map(|id| self.nodes[id.0].value.as_slice()),
            &mut out,
        );
        let len = out.len();
        self.push(
            Op::Var {
                unit,
                n,
                obs: obs.0,
                xi: xi.0,
                nu: nu.map(|id| id.0),
            },
            out,
            len,
        )
    }

    pub fn fac(&mut self, unit: usize, n: usize, obs: NodeId, mu: NodeId) -> NodeId {
        let t = self.tables(obs.0);
        let mut out = alloc::vec![0.0; t.dims.msg_len()];
        fac_kernel(t, &self.layout, self.nbp(unit), n, &self.nodes[mu.0].value, &mut out);
        let len = out.len();
        self.push(Op::Fac { unit, n, obs: obs.0, mu: mu.0 }, out, len)
    }

    pub fn readout(&mut self, obs: NodeId, xi: NodeId, nu: NodeId) -> NodeId {
        let dims = self.tables(obs.0).dims;
        let mut out = alloc::vec![0.0; dims.k * dims.m];
        readout_kernel(dims, &self.nodes[xi.0].value, &self.nodes[nu.0].value, &mut out);
        let len = out.len();
        self.push(Op::Readout { obs: obs.0, xi: xi.0, nu: nu.0 }, out, len)
    }

    pub fn merge(&mut self, inputs: &[NodeId]) -> NodeId {
        let m = self.constellation.order();
        let mut acc = self.nodes[inputs[0].0].value.clone();
        for id in &inputs[1..] {
            for (a, v) in acc.iter_mut().zip(&self.nodes[id.0].value) {
                *a += v;
            }
        }
        for row in acc.chunks_mut(m) {
            normalize_in_place(row);
        }
        let len = acc.len();
        self.push(
            Op::Merge {
                inputs: inputs.iter().map(|i| i.0).collect(),
            },
            acc,
            len,
        )
    }

    /// Sum over symbols and bits of `log₂(1 + exp(−(1−2b)·L))` with α = 1 LLRs.
    pub fn penalty(&mut self, app: NodeId, truth: &[usize]) -> NodeId {
        let cons = self.constellation;
        let m = cons.order();
        let bits = cons.bits_per_symbol();
        let v = &self.nodes[app.0].value;
        let mut total = 0.0;
        let mut buf = Vec::with_capacity(m);
        for (k, &c) in truth.iter().enumerate() {
            let row = &v[k * m..(k + 1) * m];
            for i in 0..bits {
                let l = bit_llr(row, cons, i, &mut buf);
                total += bit_penalty(l.clamp(-LLR_CLIP, LLR_CLIP), cons.bit(c, i));
            }
        }
        self.push(
            Op::Penalty {
                app: app.0,
                truth: truth.to_vec(),
            },
            alloc::vec![total],
            1,
        )
    }

    /// Records the full multi-stage pass and returns the merged output node of each stage.
    pub fn record_detector(&mut self, prior: &DetectorOutput) -> Result<Vec<NodeId>> {
        let cfg = self.params.config;
        let mut current = self.constant(prior.as_slice().to_vec());
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let mut outs = Vec::with_capacity(cfg.branches);
            for b in 0..cfg.branches {
                let unit = s * cfg.branches + b;
                let obs = self.observation(unit)?;
                let mut nu = None;
                let mut xi = None;
                for n in 0..cfg.iters_per_stage {
                    let x = self.xi(unit, n, obs, current);
                    let mu = self.var(unit, n, obs, x, nu);
                    nu = Some(self.fac(unit, n, obs, mu));
                    xi = Some(x);
                }
                outs.push(self.readout(obs, xi.expect("N ≥ 1"), nu.expect("N ≥ 1")));
            }
            current = if outs.len() == 1 { outs[0] } else { self.merge(&outs) };
            stages.push(current);
        }
        Ok(stages)
    }

    /// Back-propagates `Σ seed · node` and returns the gradient in flat parameter order.
    pub fn backward(&self, seeds: &[(NodeId, f64)]) -> Vec<f64> {
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        let mut grad = alloc::vec![0.0; self.theta.len()];
        for &(id, s) in seeds {
            let a = ensure(&mut adj[id.0], self.nodes[id.0].adj_len);
            a.iter_mut().for_each(|v| *v += s);
        }
        for i in (0..self.nodes.len()).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let (before, rest) = adj.split_at_mut(i);
            let g = &rest[0];
            self.node_backward(i, g, before, &mut grad);
        }
        grad
    }

    fn node_backward(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>], grad: &mut [f64]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Observation { unit, tables, model } => self.observation_backward(*unit, tables, model, g, grad),
            Op::Xi { unit, n, obs, prior } => self.xi_backward(*unit, *n, *obs, *prior, g, adj, grad),
            Op::Var { unit, n, obs, xi, nu } => self.var_backward(*unit, *n, *obs, *xi, *nu, g, adj, grad),
            Op::Fac { unit, n, obs, mu } => self.fac_backward(*unit, *n, *obs, *mu, g, adj, grad),
            Op::Readout { obs, xi, nu } => {
                let dims = self.tables(*obs).dims;
                let m = dims.m;
                let mut dv = alloc::vec![0.0; dims.k * m];
                row_normalize_backward(&node.value, g, m, &mut dv);
                let gx = ensure(&mut adj[*xi], self.nodes[*xi].adj_len);
                for (a, v) in gx.iter_mut().zip(&dv) {
                    *a += v;
                }
                let gn = ensure(&mut adj[*nu], self.nodes[*nu].adj_len);
                for k in 0..dims.k {
                    for e in 0..dims.edges() {
                        if dims.neighbor(k, e).is_none() {
                            continue;
                        }
                        let o = dims.msg(k, e);
                        for c in 0..m {
                            gn[o + c] += dv[k * m + c];
                        }
                    }
                }
            }
            Op::Merge { inputs } => {
                let m = self.constellation.order();
                let mut dv = alloc::vec![0.0; node.value.len()];
                row_normalize_backward(&node.value, g, m, &mut dv);
                for &inp in inputs {
                    let a = ensure(&mut adj[inp], self.nodes[inp].adj_len);
                    for (x, v) in a.iter_mut().zip(&dv) {
                        *x += v;
                    }
                }
            }
            Op::Penalty { app, truth } => {
                let cons = self.constellation;
                let m = cons.order();
                let bits = cons.bits_per_symbol();
                let v = &self.nodes[*app].value;
                let ga = ensure(&mut adj[*app], self.nodes[*app].adj_len);
                let mut buf = Vec::with_capacity(m);
                let mut w = alloc::vec![0.0; m];
                for (k, &c) in truth.iter().enumerate() {
                    let row = &v[k * m..(k + 1) * m];
                    for i in 0..bits {
                        let l = bit_llr(row, cons, i, &mut buf);
                        if l.abs() >= LLR_CLIP {
                            continue;
                        }
                        let b = cons.bit(c, i);
                        // d/dL log₂(1 + e^{s}), s = ∓L
                        let s = if b == 0 { -l } else { l };
                        let dl = g[0] * math::sigmoid(s) * if b == 0 { -1.0 } else { 1.0 } / core::f64::consts::LN_2;
                        for (sign, bit) in [(1.0, 0u8), (-1.0, 1u8)] {
                            let subset = cons.bit_subset(i, bit);
                            buf.clear();
                            buf.extend(subset.iter().map(|&p| row[p]));
                            softmax_into(&buf, &mut w[..subset.len()]);
                            for (j, &p) in subset.iter().enumerate() {
                                ga[k * m + p] += sign * dl * w[j];
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn xi_backward(&self, unit: usize, n: usize, obs: usize, prior: usize, g: &[f64], adj: &mut [Vec<f64>], grad: &mut [f64]) {
        let t = self.tables(obs);
        let lay = &self.layout;
        let span = self.spans[unit];
        let th = self.nbp(unit);
        let m = t.dims.m;
        let w_p = self.theta[span.w_p + n];
        let pv = &self.nodes[prior].value;
        let mut gwp = 0.0;
        {
            let is_const = matches!(self.nodes[prior].op, Op::Constant);
            let gp = if is_const {
                None
            } else {
                Some(ensure(&mut adj[prior], self.nodes[prior].adj_len))
            };
            if let Some(gp) = gp {
                for (a, v) in gp.iter_mut().zip(g) {
                    *a += w_p * v;
                }
            }
        }
        let mut gt = alloc::vec![0.0; t.lin.len() + t.quad.len()];
        for k in 0..t.dims.k {
            let i1 = lay.kappa(n, k, 0);
            let i2 = lay.kappa(n, k, 1);
            let i3 = lay.kappa(n, k, 2);
            let (k1, k2, k3) = (th[i1], th[i2], th[i3]);
            let (mut g1, mut g2, mut g3) = (0.0, 0.0, 0.0);
            for c in 0..m {
                let idx = k * m + c;
                let gv = g[idx];
                gwp += gv * pv[idx];
                let lin = t.lin[idx];
                let quad = t.quad[idx];
                g1 += gv * (k2 * lin - k3 * quad);
                g2 += gv * k1 * lin;
                g3 -= gv * k1 * quad;
                gt[idx] += gv * k1 * k2;
                gt[t.lin.len() + idx] -= gv * k1 * k3;
            }
            grad[span.nbp + i1] += g1;
            grad[span.nbp + i2] += g2;
            grad[span.nbp + i3] += g3;
        }
        grad[span.w_p + n] += gwp;
        let go = ensure(&mut adj[obs], self.nodes[obs].adj_len);
        for (a, v) in go.iter_mut().zip(&gt) {
            *a += v;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn var_backward(
        &self,
        unit: usize,
        n: usize,
        obs: usize,
        xi: usize,
        nu: Option<usize>,
        g: &[f64],
        adj: &mut [Vec<f64>],
        grad: &mut [f64],
    ) {
        let dims = self.tables(obs).dims;
        let lay = &self.layout;
        let span = self.spans[unit];
        let th = self.nbp(unit);
        let m = dims.m;
        let xv = &self.nodes[xi].value;
        let init = -math::ln(m as f64);
        let nu_val = nu.map(|id| self.nodes[id].value.as_slice());
        let mut gxi = alloc::vec![0.0; xv.len()];
        let mut gnu = nu.map(|_| alloc::vec![0.0; dims.msg_len()]);
        let mut total = alloc::vec![0.0; m];
        let mut s = alloc::vec![0.0; m];
        let mut gtot = alloc::vec![0.0; m];
        let mut gs = alloc::vec![0.0; m];
        for k in 0..dims.k {
            total.copy_from_slice(&xv[k * m..(k + 1) * m]);
            for e in 0..dims.edges() {
                if dims.neighbor(k, e).is_none() {
                    continue;
                }
                let o = dims.msg(k, e);
                for c in 0..m {
                    total[c] += nu_val.map_or(init, |v| v[o + c]);
                }
            }
            gtot.iter_mut().for_each(|v| *v = 0.0);
            for e in 0..dims.edges() {
                if dims.neighbor(k, e).is_none() {
                    continue;
                }
                let o = dims.msg(k, e);
                for c in 0..m {
                    s[c] = total[c] - nu_val.map_or(init, |v| v[o + c]);
                }
                let wi = lay.w_v(n, k, e);
                let w = th[wi];
                weighted_shift_backward(&s, w, &g[o..o + m], &mut gs, &mut grad[span.nbp + wi]);
                for c in 0..m {
                    gtot[c] += gs[c];
                }
                if let Some(gn) = gnu.as_mut() {
                    for c in 0..m {
                        gn[o + c] -= gs[c];
                    }
                }
            }
            for c in 0..m {
                gxi[k * m + c] += gtot[c];
            }
            if let Some(gn) = gnu.as_mut() {
                for e in 0..dims.edges() {
                    if dims.neighbor(k, e).is_none() {
                        continue;
                    }
                    let o = dims.msg(k, e);
                    for c in 0..m {
                        gn[o + c] += gtot[c];
                    }
                }
            }
        }
        add_into(&mut adj[xi], self.nodes[xi].adj_len, &gxi);
        if let (Some(id), Some(gn)) = (nu, gnu) {
            add_into(&mut adj[id], self.nodes[id].adj_len, &gn);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fac_backward(&self, unit: usize, n: usize, obs: usize, mu: usize, g: &[f64], adj: &mut [Vec<f64>], grad: &mut [f64]) {
        let t = self.tables(obs);
        let dims = t.dims;
        let lay = &self.layout;
        let span = self.spans[unit];
        let th = self.nbp(unit);
        let m = dims.m;
        let mv = &self.nodes[mu].value;
        let mut gmu = alloc::vec![0.0; mv.len()];
        let mut gpair = alloc::vec![0.0; t.pair.len()];
        let mut r = alloc::vec![0.0; m];
        let mut gr = alloc::vec![0.0; m];
        let mut rows = alloc::vec![0.0; m * m];
        let mut w = alloc::vec![0.0; m];
        for k in 0..dims.k {
            for e in 0..dims.edges() {
                let Some(l) = dims.neighbor(k, e) else { continue };
                let o = dims.msg(k, e);
                let (base, lambda, transposed) = edge_pair_value(t, lay, th, n, k, e);
                let j = dims.offset(e);
                let lam_index = if j < 0 {
                    lay.lambda(n, k, (-j) as usize)
                } else {
                    lay.lambda(n, l, j as usize)
                };
                let inc = dims.msg(l, dims.reverse(e));
                let q_at = |a: usize, b: usize| {
                    if transposed {
                        base + b * m + a
                    } else {
                        base + a * m + b
                    }
                };
                for a in 0..m {
                    for b in 0..m {
                        rows[a * m + b] = lambda * t.pair[q_at(a, b)] + mv[inc + b];
                    }
                    r[a] = log_sum_exp(&rows[a * m..(a + 1) * m]);
                }
                let wi = lay.w_f(n, k, e);
                weighted_shift_backward(&r, th[wi], &g[o..o + m], &mut gr, &mut grad[span.nbp + wi]);
                let mut glam = 0.0;
                for a in 0..m {
                    if gr[a] == 0.0 {
                        continue;
                    }
                    softmax_into(&rows[a * m..(a + 1) * m], &mut w);
                    for b in 0..m {
                        let gb = gr[a] * w[b];
                        gmu[inc + b] += gb;
                        let qi = q_at(a, b);
                        glam += gb * t.pair[qi];
                        gpair[qi] += lambda * gb;
                    }
                }
                grad[span.nbp + lam_index] += glam;
            }
        }
        add_into(&mut adj[mu], self.nodes[mu].adj_len, &gmu);
        let go = ensure(&mut adj[obs], self.nodes[obs].adj_len);
        let off = t.lin.len() + t.quad.len();
        for (a, v) in go[off..].iter_mut().zip(&gpair) {
            *a += v;
        }
    }

    fn observation_backward(&self, unit: usize, tables: &FactorTables, model: &ObservationModel, g: &[f64], grad: &mut [f64]) {
        let span = self.spans[unit];
        if span.n_taps == 0 {
            return;
        }
        let gm = tables_to_model(tables, model, self.constellation, g);
        let kind = self.params.config.preprocessor;
        let zero = Complex64::new(0.0, 0.0);
        for i in 0..span.n_taps {
            let mut e = alloc::vec![zero; span.n_taps];
            e[i] = Complex64::new(1.0, 0.0);
            let pre = preprocessor_for(kind, &e);
            if let Preprocessor::Matched = pre {
                return;
            }
            let basis = linear_observation(&pre, self.ctx, self.params.config.band_policy);
            let (mut dre, mut dim) = (0.0, 0.0);
            for (b, gv) in basis.x.iter().zip(&gm.x).chain(basis.g.iter().zip(&gm.g)) {
                let p = b.conj() * gv;
                dre += p.re;
                dim += p.im;
            }
            grad[span.taps + 2 * i] += dre;
            grad[span.taps + 2 * i + 1] += dim;
        }
    }
}

/// LLR of bit `i` from a normalized log-APP row (α = 1, unclipped).
fn bit_llr(row: &[f64], cons: &Constellation, i: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(cons.bit_subset(i, 0).iter().map(|&c| row[c]));
    let zero = log_sum_exp(buf);
    buf.clear();
    buf.extend(cons.bit_subset(i, 1).iter().map(|&c| row[c]));
    let one = log_sum_exp(buf);
    if zero == one {
        0.0
    } else {
        zero - one
    }
}

fn ensure(v: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
    if v.is_empty() {
        v.resize(len, 0.0);
    }
    v
}

fn add_into(v: &mut Vec<f64>, len: usize, src: &[f64]) {
    let a = ensure(v, len);
    for (x, s) in a.iter_mut().zip(src) {
        *x += s;
    }
}

/// Backward of `out = v − ln Σ e^v` per row: `dv = g − softmax(v)·Σg`.
fn row_normalize_backward(out: &[f64], g: &[f64], m: usize, dv: &mut [f64]) {
    for k in 0..out.len() / m {
        let r = k * m..(k + 1) * m;
        let sum: f64 = g[r.clone()].iter().sum();
        for i in r {
            dv[i] = g[i] - math::exp(out[i]) * sum;
        }
    }
}

/// Backward of `out = w · max(s − max s, −C)`: writes `∂/∂s` into `gs` and adds `∂/∂w`.
fn weighted_shift_backward(s: &[f64], w: f64, g: &[f64], gs: &mut [f64], gw: &mut f64) {
    let mut arg = 0;
    for i in 1..s.len() {
        if s[i] > s[arg] {
            arg = i;
        }
    }
    let hi = s[arg];
    let mut sum = 0.0;
    for i in 0..s.len() {
        let t = s[i] - hi;
        let clamped = t <= -MESSAGE_CLAMP;
        let u = if clamped { -MESSAGE_CLAMP } else { t };
        *gw += g[i] * u;
        gs[i] = if clamped { 0.0 } else { w * g[i] };
        sum += gs[i];
    }
    gs[arg] -= sum;
}

/// Gradient with respect to the observation model (`x̃`, `G̃`) from the table
/// adjoints, as complex numbers `∂/∂re + j ∂/∂im`.
fn tables_to_model(t: &FactorTables, model: &ObservationModel, cons: &Constellation, g: &[f64]) -> ObservationModel {
    let dims: Dims = t.dims;
    let m = dims.m;
    let s2 = model.noise_var();
    let (glin, rest) = g.split_at(t.lin.len());
    let (gquad, gpair) = rest.split_at(t.quad.len());
    let mut out = model.zeros_like();
    let width = 2 * dims.band + 1;
    let gi = |k: usize, j: i64| k * width + (j + dims.band as i64) as usize;
    for k in 0..dims.k {
        let mut gx = Complex64::new(0.0, 0.0);
        let mut gd = 0.0;
        for (c, p) in cons.points().iter().enumerate() {
            gx += glin[k * m + c] * 2.0 * p / s2;
            gd += gquad[k * m + c] * p.norm_sqr() / s2;
        }
        out.x[k] += gx;
        out.g[gi(k, 0)] += gd;
        for d in 1..=dims.band.min(k) {
            let base = t.pair_base(k, d);
            let (mut g1, mut g2) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for (a, pa) in cons.points().iter().enumerate() {
                for (b, pb) in cons.points().iter().enumerate() {
                    let gp = gpair[base + a * m + b];
                    if gp == 0.0 {
                        continue;
                    }
                    let z = pb * pa.conj();
                    g1 += gp * Complex64::new(-z.re, z.im) / s2;
                    g2 += gp * Complex64::new(-z.re, -z.im) / s2;
                }
            }
            out.g[gi(k, -(d as i64))] += g1;
            out.g[gi(k - d, d as i64)] += g2;
        }
    }
    out
}

/// Per-stage penalty sums of one block and the gradient of `Σ_s weight_s · penalty_s`.
pub fn block_penalties_and_gradient(
    params: &GapParams,
    ctx: &BlockContext,
    truth: &[usize],
    constellation: &Constellation,
    stage_weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if stage_weights.len() != params.config.stages {
        return Err(Error::ShapeMismatch("one weight per stage is required".into()));
    }
    if truth.len() != ctx.block_len {
        return Err(Error::ShapeMismatch("truth length differs from block length".into()));
    }
    let mut tape = Tape::new(params, ctx, constellation)?;
    let prior = DetectorOutput::uniform(ctx.block_len, constellation.order());
    let stages = tape.record_detector(&prior)?;
    let mut seeds = Vec::new();
    let mut penalties = Vec::with_capacity(stages.len());
    for (s, &id) in stages.iter().enumerate() {
        let p = tape.penalty(id, truth);
        penalties.push(tape.value(p)[0]);
        if stage_weights[s] != 0.0 {
            seeds.push((p, stage_weights[s]));
        }
    }
    Ok((penalties, tape.backward(&seeds)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_block, reference_channel, ChannelModel};
    use crate::gap::{intermediate_outputs, GapConfig, PreprocessorKind};
    use crate::gfg::WeightTying;
    use crate::metrics::{bitwise_llr, BmiAccumulator};
    use crate::modem::{make_bpsk, make_qam};
    use crate::observation::BandPolicy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: GapConfig, cons: &Constellation, seed: u64, k: usize) -> (GapParams, BlockContext, Vec<usize>) {
        let taps = reference_channel("proakis-b").unwrap();
        let ch = ChannelModel::new(taps, 0.3).unwrap();
        let blk = random_block(k, &ch, cons, 0, seed);
        let ctx = BlockContext::new(&ch, &blk, cons);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GapParams::random_taps(cfg, k, 2, &mut rng).unwrap();
        let mut theta = p.flatten();
        for v in theta.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
        p.set_flat(&theta).unwrap();
        (p, ctx, blk.info_symbols)
    }

    fn loss_at(params: &GapParams, theta: &[f64], ctx: &BlockContext, truth: &[usize], cons: &Constellation, w: &[f64]) -> f64 {
        let mut p = params.clone();
        p.set_flat(theta).unwrap();
        let (pen, _) = block_penalties_and_gradient(&p, ctx, truth, cons, w).unwrap();
        pen.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn forward_matches_detector() {
        let cons = make_qam(4).unwrap();
        let cfg = GapConfig::gap(2, 2, 3, PreprocessorKind::Generic, 3);
        let (p, ctx, _) = setup(cfg, &cons, 4, 10);
        let mut tape = Tape::new(&p, &ctx, &cons).unwrap();
        let stages = tape.record_detector(&DetectorOutput::uniform(10, 4)).unwrap();
        let direct = intermediate_outputs(&DetectorOutput::uniform(10, 4), &p, &ctx, &cons).unwrap();
        for (id, d) in stages.iter().zip(&direct) {
            let diff = tape.value(*id).iter().zip(d.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn penalty_matches_bmi_estimator() {
        let cons = make_bpsk();
        let cfg = GapConfig::ufg(4);
        let (_, ctx, truth) = setup(cfg, &cons, 5, 12);
        let p = GapParams::identity(cfg, 12, &ctx.channel_taps).unwrap();
        let (pen, _) = block_penalties_and_gradient(&p, &ctx, &truth, &cons, &[1.0]).unwrap();
        let out = crate::gfg::ufg_detect(&ctx, &cons, 4).unwrap();
        let mut acc = BmiAccumulator::new(1);
        acc.add(&bitwise_llr(&out, &cons, 1.0), &truth, &cons).unwrap();
        assert!((pen[0] - acc.penalty).abs() < 1e-12);
    }

    fn check_gradient(cfg: GapConfig, cons: &Constellation, seed: u64, k: usize, w: &[f64]) {
        let (p, ctx, truth) = setup(cfg, cons, seed, k);
        let (_, grad) = block_penalties_and_gradient(&p, &ctx, &truth, cons, w).unwrap();
        let theta = p.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let i = rng.random_range(0..theta.len());
            let mut tp = theta.clone();
            tp[i] += h;
            let fp = loss_at(&p, &tp, &ctx, &truth, cons, w);
            tp[i] -= 2.0 * h;
            let fm = loss_at(&p, &tp, &ctx, &truth, cons, w);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(GapConfig::gap(2, 2, 2, PreprocessorKind::Generic, 2), &make_bpsk(), 1, 8, &[0.5, 0.5]);
        check_gradient(GapConfig::gfg(3, PreprocessorKind::Structured, 2), &make_qam(4).unwrap(), 2, 6, &[1.0]);
        check_gradient(
            GapConfig::gfg(2, PreprocessorKind::Generic, 4)
                .with_band_policy(BandPolicy::Full)
                .with_tying(WeightTying::Tied),
            &make_bpsk(),
            3,
            8,
            &[1.0],
        );
    }

    #[test]
    fn dead_path_has_zero_gradient() {
        // L = 0 channel with matched filter: every λ multiplies a zero band entry.
        let cons = make_bpsk();
        let ch = ChannelModel::new(alloc::vec![Complex64::new(1.0, 0.0)], 0.3).unwrap();
        let blk = random_block(6, &ch, &cons, 0, 1);
        let ctx = BlockContext::new(&ch, &blk, &cons);
        let cfg = GapConfig::gfg(2, PreprocessorKind::Generic, 2).with_band_policy(BandPolicy::Full);
        let p = GapParams::identity(cfg, 6, &ctx.channel_taps).unwrap();
        // taps (0, 1, 0): G̃ has only its diagonal, so the λ paths are dead
        let (_, grad) = block_penalties_and_gradient(&p, &ctx, &blk.info_symbols, &cons, &[1.0]).unwrap();
        let lay = p.nbp_layout();
        assert_eq!(lay.band, 1);
        for n in 0..2 {
            for k in 1..6 {
                assert_eq!(grad[lay.lambda(n, k, 1)], 0.0);
            }
        }
    }
}
