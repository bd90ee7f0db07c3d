//! Reverse-mode tape for the layer types used by the model.
//!
//! Values are flat `f64` buffers. Sparse tensors are row-major
//! `rows × channels`; dense rasters are channel-major `channels × h × w`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::bev::{max_pool, BevAssignment, PoolSpec};
use crate::error::{Error, Result};
use crate::net::sparse::Rulebook;

pub type ValueId = usize;

/// Memory layout of a feature buffer, used by batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `rows × channels`, channel fastest.
    Rows,
    /// `channels × pixels`.
    Planes,
}

impl Layout {
    fn strides(self, rows: usize, channels: usize) -> (usize, usize) {
        match self {
            Layout::Rows => (channels, 1),
            Layout::Planes => (1, rows),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current input.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased when more than one row was seen.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Conv {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        output: ValueId,
        rules: Arc<Rulebook>,
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        output: ValueId,
        layout: Layout,
        rows: usize,
        channels: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        frozen: bool,
    },
    Relu {
        input: ValueId,
        output: ValueId,
    },
    Concat {
        a: ValueId,
        b: ValueId,
        output: ValueId,
        ca: usize,
        cb: usize,
    },
    Scatter {
        input: ValueId,
        output: ValueId,
        winners: Arc<Vec<Option<u32>>>,
        channels: usize,
    },
    MaxPool {
        input: ValueId,
        output: ValueId,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        output: ValueId,
        cin: usize,
        cout: usize,
        height: usize,
        width: usize,
    },
}

/// Recorded forward computation. [`Tape::backward`] may run once.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
    params: Vec<(String, ValueId)>,
    constants: Vec<ValueId>,
    consumed: bool,
}

fn check_finite(layer: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dot product with four independent partial sums, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `out[o] += in[i] · W[k]` for every rulebook pair; `W[k]` is `cin × cout`.
fn conv_rows(input: &[f64], weight: &[f64], rules: &Rulebook, cin: usize, cout: usize, out: &mut [f64]) {
    for (k, pairs) in rules.pairs.iter().enumerate() {
        let w = &weight[k * cin * cout..(k + 1) * cin * cout];
        for &(i, o) in pairs {
            let x = &input[i as usize * cin..(i as usize + 1) * cin];
            let y = &mut out[o as usize * cout..(o as usize + 1) * cout];
            for (ci, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &w[ci * cout..(ci + 1) * cout];
                for (yv, &wv) in y.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
    }
}

/// 3×3 convolution with zero padding 1 on `cin × h × w`; weight is `cout × cin × 3 × 3`.
fn conv2d_forward(x: &[f64], w: &[f64], cin: usize, cout: usize, h: usize, wd: usize, out: &mut [f64]) {
    let plane = h * wd;
    for co in 0..cout {
        let y = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xp = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..3 {
                for dx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + dy) * 3 + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (v_lo, v_hi) = (1usize.saturating_sub(dy), (h + 1 - dy).min(h));
                    let (u_lo, u_hi) = (1usize.saturating_sub(dx), (wd + 1 - dx).min(wd));
                    for v in v_lo..v_hi {
                        let sv = v + dy - 1;
                        let yr = &mut y[v * wd + u_lo..v * wd + u_hi];
                        let xr = &xp[sv * wd + u_lo + dx - 1..sv * wd + u_hi + dx - 1];
                        for (yv, &xv) in yr.iter_mut().zip(xr) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.values[id]
    }

    fn push(&mut self, v: Vec<f64>) -> ValueId {
        self.values.push(v);
        self.values.len() - 1
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, data: Vec<f64>) -> ValueId {
        let id = self.push(data);
        self.constants.push(id);
        id
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, data: Vec<f64>) -> ValueId {
        let id = self.push(data);
        self.params.push((name.to_string(), id));
        id
    }

    /// Sparse convolution along `rules`. Weight layout is `volume × cin × cout`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        layer: &str,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        rules: Arc<Rulebook>,
        cin: usize,
        cout: usize,
    ) -> Result<ValueId> {
        let x = &self.values[input];
        let w = &self.values[weight];
        if x.len() != rules.n_in * cin || w.len() != rules.kernel_volume() * cin * cout {
            return Err(Error::validation(format!(
                "layer `{layer}`: input {} / weight {} do not fit {}×{cin} → {cout}",
                x.len(),
                w.len(),
                rules.n_in
            )));
        }
        let mut out = vec![0.0; rules.n_out * cout];
        if let Some(b) = bias {
            let b = &self.values[b];
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(b);
            }
        }
        conv_rows(x, w, &rules, cin, cout, &mut out);
        check_finite(layer, &out)?;
        let output = self.push(out);
        self.ops.push(Op::Conv {
            input,
            weight,
            bias,
            output,
            rules,
            cin,
            cout,
        });
        Ok(output)
    }

    /// Batch norm over the rows (or pixels) of each channel. Returns the output
    /// and, in training mode, the observed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        layer: &str,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        layout: Layout,
        channels: usize,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(ValueId, Option<BnBatchStats>)> {
        let x = &self.values[input];
        let rows = x.len() / channels.max(1);
        let (rs, cs) = layout.strides(rows, channels);
        let g = &self.values[gamma];
        let b = &self.values[beta];
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; channels];
        let mut stats = None;
        match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                if rows > 0 {
                    for c in 0..channels {
                        let m = (0..rows).map(|r| x[r * rs + c * cs]).sum::<f64>() / rows as f64;
                        let ss = (0..rows).map(|r| (x[r * rs + c * cs] - m).powi(2)).sum::<f64>();
                        mean[c] = m;
                        inv_std[c] = 1.0 / (ss / rows as f64 + eps).sqrt();
                        var[c] = if rows > 1 { ss / (rows - 1) as f64 } else { 0.0 };
                    }
                }
                stats = Some(BnBatchStats { mean: mean.clone(), var });
                for c in 0..channels {
                    for r in 0..rows {
                        let i = r * rs + c * cs;
                        normalized[i] = (x[i] - mean[c]) * inv_std[c];
                        out[i] = g[c] * normalized[i] + b[c];
                    }
                }
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::Usage(format!("layer `{layer}`: eval mode needs running statistics"))
                })?;
                for c in 0..channels {
                    inv_std[c] = 1.0 / (rv[c] + eps).sqrt();
                    for r in 0..rows {
                        let i = r * rs + c * cs;
                        normalized[i] = (x[i] - rm[c]) * inv_std[c];
                        out[i] = g[c] * normalized[i] + b[c];
                    }
                }
            }
        }
        check_finite(layer, &out)?;
        let output = self.push(out);
        self.ops.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            output,
            layout,
            rows,
            channels,
            normalized,
            inv_std,
            frozen: mode == BnMode::Eval,
        });
        Ok((output, stats))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = self.values[input].iter().map(|&v| v.max(0.0)).collect();
        let output = self.push(out);
        self.ops.push(Op::Relu { input, output });
        output
    }

    /// Row-wise channel concatenation `[a | b]`.
    pub fn concat(&mut self, a: ValueId, b: ValueId, ca: usize, cb: usize) -> Result<ValueId> {
        let (xa, xb) = (&self.values[a], &self.values[b]);
        if xa.len() / ca.max(1) != xb.len() / cb.max(1) {
            return Err(Error::validation("concat of tensors with different row counts"));
        }
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for (ra, rb) in xa.chunks_exact(ca).zip(xb.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let output = self.push(out);
        self.ops.push(Op::Concat {
            a,
            b,
            output,
            ca,
            cb,
        });
        Ok(output)
    }

    /// Sparse rows → dense planes through a BEV assignment.
    pub fn scatter(&mut self, input: ValueId, assignment: &BevAssignment, channels: usize) -> ValueId {
        let winners = Arc::new(assignment.winners.clone());
        let map = crate::bev::scatter_features(assignment, &self.values[input], channels);
        let output = self.push(map.data);
        self.ops.push(Op::Scatter {
            input,
            output,
            winners,
            channels,
        });
        output
    }

    pub fn max_pool(
        &mut self,
        input: ValueId,
        channels: usize,
        height: usize,
        width: usize,
        spec: PoolSpec,
    ) -> Result<(ValueId, usize, usize)> {
        let (out, argmax, oh, ow) = max_pool(&self.values[input], channels, height, width, spec)?;
        let output = self.push(out);
        self.ops.push(Op::MaxPool {
            input,
            output,
            argmax,
        });
        Ok((output, oh, ow))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        layer: &str,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        cin: usize,
        cout: usize,
        height: usize,
        width: usize,
    ) -> Result<ValueId> {
        let plane = height * width;
        let (x, w) = (&self.values[input], &self.values[weight]);
        if x.len() != cin * plane || w.len() != cout * cin * 9 {
            return Err(Error::validation(format!(
                "layer `{layer}`: input {} / weight {} do not fit {cin}×{height}×{width} → {cout}",
                x.len(),
                w.len()
            )));
        }
        let mut out = vec![0.0; cout * plane];
        if let Some(b) = bias {
            for (co, &bv) in self.values[b].iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        conv2d_forward(x, w, cin, cout, height, width, &mut out);
        check_finite(layer, &out)?;
        let output = self.push(out);
        self.ops.push(Op::Conv2d {
            input,
            weight,
            bias,
            output,
            cin,
            cout,
            height,
            width,
        });
        Ok(output)
    }

    /// Signature of every non-differentiable branch taken (ReLU signs, pooling
    /// winners). Two evaluations with equal signatures lie in the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| {
            h = crate::seed::mix64(h ^ v);
        };
        for op in &self.ops {
            match op {
                Op::Relu { input, .. } => {
                    for (i, &v) in self.values[*input].iter().enumerate() {
                        if v > 0.0 {
                            feed(i as u64);
                        }
                    }
                    feed(u64::MAX);
                }
                Op::MaxPool { argmax, .. } => {
                    argmax.iter().for_each(|&a| feed(a as u64));
                    feed(u64::MAX - 1);
                }
                _ => {}
            }
        }
        h
    }

    /// Propagates `seeds` (output value, upstream gradient) back to every
    /// parameter. Consumes the recorded activations.
    pub fn backward(&mut self, seeds: Vec<(ValueId, Vec<f64>)>) -> Result<BTreeMap<String, Vec<f64>>> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        for (id, g) in seeds {
            if g.len() != self.values[id].len() {
                return Err(Error::validation(format!(
                    "upstream gradient of length {} for a value of length {}",
                    g.len(),
                    self.values[id].len()
                )));
            }
            match &mut grads[id] {
                Some(acc) => add_into(acc, &g),
                slot => *slot = Some(g),
            }
        }
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[*id].take().unwrap_or_else(|| vec![0.0; self.values[*id].len()]);
            out.insert(name.clone(), g);
        }
        self.values.clear();
        Ok(out)
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        let zeros = |id: ValueId| vec![0.0; self.values[id].len()];
        match op {
            Op::Conv {
                input,
                weight,
                bias,
                output,
                rules,
                cin,
                cout,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let (cin, cout) = (*cin, *cout);
                let x = &self.values[*input];
                let w = &self.values[*weight];
                let mut gw = grads[*weight].take().unwrap_or_else(|| zeros(*weight));
                for (k, pairs) in rules.pairs.iter().enumerate() {
                    let gwk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                    for &(i, o) in pairs {
                        let g = &gy[o as usize * cout..(o as usize + 1) * cout];
                        let xr = &x[i as usize * cin..(i as usize + 1) * cin];
                        for (ci, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (gwv, &gv) in gwk[ci * cout..(ci + 1) * cout].iter_mut().zip(g) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                if !self.constants.contains(input) {
                    let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                    let mut wt = vec![0.0; cin * cout];
                    for (k, pairs) in rules.pairs.iter().enumerate() {
                        let wk = &w[k * cin * cout..(k + 1) * cin * cout];
                        for ci in 0..cin {
                            for co in 0..cout {
                                wt[co * cin + ci] = wk[ci * cout + co];
                            }
                        }
                        for &(i, o) in pairs {
                            let g = &gy[o as usize * cout..(o as usize + 1) * cout];
                            let gxr = &mut gx[i as usize * cin..(i as usize + 1) * cin];
                            for (co, &gv) in g.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (gxv, &wv) in gxr.iter_mut().zip(&wt[co * cin..(co + 1) * cin]) {
                                    *gxv += gv * wv;
                                }
                            }
                        }
                    }
                    grads[*input] = Some(gx);
                }
                if let Some(b) = bias {
                    let mut gb = grads[*b].take().unwrap_or_else(|| zeros(*b));
                    for row in gy.chunks_exact(cout) {
                        add_into(&mut gb, row);
                    }
                    grads[*b] = Some(gb);
                }
                grads[*weight] = Some(gw);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                output,
                layout,
                rows,
                channels,
                normalized,
                inv_std,
                frozen,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let (rows, channels) = (*rows, *channels);
                let (rs, cs) = layout.strides(rows, channels);
                let g = &self.values[*gamma];
                let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                let mut gg = grads[*gamma].take().unwrap_or_else(|| zeros(*gamma));
                let mut gb = grads[*beta].take().unwrap_or_else(|| zeros(*beta));
                for c in 0..channels {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for r in 0..rows {
                        let i = r * rs + c * cs;
                        sum_g += gy[i];
                        sum_gx += gy[i] * normalized[i];
                    }
                    gg[c] += sum_gx;
                    gb[c] += sum_g;
                    let scale = g[c] * inv_std[c];
                    if *frozen {
                        for r in 0..rows {
                            let i = r * rs + c * cs;
                            gx[i] += scale * gy[i];
                        }
                    } else if rows > 0 {
                        let n = rows as f64;
                        for r in 0..rows {
                            let i = r * rs + c * cs;
                            gx[i] += scale / n * (n * gy[i] - sum_g - normalized[i] * sum_gx);
                        }
                    }
                }
                grads[*input] = Some(gx);
                grads[*gamma] = Some(gg);
                grads[*beta] = Some(gb);
            }
            Op::Relu { input, output } => {
                let Some(gy) = grads[*output].take() else { return };
                let x = &self.values[*input];
                let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                for ((d, &g), &xv) in gx.iter_mut().zip(&gy).zip(x) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
                grads[*input] = Some(gx);
            }
            Op::Concat {
                a,
                b,
                output,
                ca,
                cb,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let mut ga = grads[*a].take().unwrap_or_else(|| zeros(*a));
                let mut gb = grads[*b].take().unwrap_or_else(|| zeros(*b));
                for (r, row) in gy.chunks_exact(ca + cb).enumerate() {
                    add_into(&mut ga[r * ca..(r + 1) * ca], &row[..*ca]);
                    add_into(&mut gb[r * cb..(r + 1) * cb], &row[*ca..]);
                }
                grads[*a] = Some(ga);
                grads[*b] = Some(gb);
            }
            Op::Scatter {
                input,
                output,
                winners,
                channels,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let plane = winners.len();
                let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                for (p, w) in winners.iter().enumerate() {
                    if let Some(w) = *w {
                        for c in 0..*channels {
                            gx[w as usize * channels + c] += gy[c * plane + p];
                        }
                    }
                }
                grads[*input] = Some(gx);
            }
            Op::MaxPool {
                input,
                output,
                argmax,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                for (&a, &g) in argmax.iter().zip(&gy) {
                    gx[a] += g;
                }
                grads[*input] = Some(gx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                output,
                cin,
                cout,
                height,
                width,
            } => {
                let Some(gy) = grads[*output].take() else { return };
                let (cin, cout, h, wd) = (*cin, *cout, *height, *width);
                let plane = h * wd;
                let x = &self.values[*input];
                let w = &self.values[*weight];
                let mut gx = grads[*input].take().unwrap_or_else(|| zeros(*input));
                let mut gw = grads[*weight].take().unwrap_or_else(|| zeros(*weight));
                for co in 0..cout {
                    let g = &gy[co * plane..(co + 1) * plane];
                    for ci in 0..cin {
                        let xp = &x[ci * plane..(ci + 1) * plane];
                        let gxp = &mut gx[ci * plane..(ci + 1) * plane];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let widx = ((co * cin + ci) * 3 + dy) * 3 + dx;
                                let wv = w[widx];
                                let (v_lo, v_hi) = (1usize.saturating_sub(dy), (h + 1 - dy).min(h));
                                let (u_lo, u_hi) = (1usize.saturating_sub(dx), (wd + 1 - dx).min(wd));
                                let mut acc = 0.0;
                                for v in v_lo..v_hi {
                                    let sv = v + dy - 1;
                                    let gr = &g[v * wd + u_lo..v * wd + u_hi];
                                    let lo = sv * wd + u_lo + dx - 1;
                                    acc += dot(gr, &xp[lo..lo + gr.len()]);
                                    for (gxv, &gv) in gxp[lo..lo + gr.len()].iter_mut().zip(gr) {
                                        *gxv += gv * wv;
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let mut gb = grads[*b].take().unwrap_or_else(|| zeros(*b));
                    for (co, gbv) in gb.iter_mut().enumerate() {
                        *gbv += gy[co * plane..(co + 1) * plane].iter().sum::<f64>();
                    }
                    grads[*b] = Some(gb);
                }
                grads[*input] = Some(gx);
                grads[*weight] = Some(gw);
            }
        }
    }
}
