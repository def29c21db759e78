//! Recurrent Q-network engine: dense layers, one LSTM layer, hand-derived
//! backpropagation through time and Adam.
//!
//! Topology: `obs -> Dense+ReLU`, `prev action -> Dense+ReLU`, concatenate,
//! `LSTM`, `Dense -> 6 Q-values`. Batched passes are time-major: row
//! `t * batch + b` of every stacked matrix belongs to step `t` of sequence `b`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Tensor2 {
            rows: 1,
            cols: data.len(),
            data: data.to_vec(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor2 { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::domain(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        gemm(self.rows, self.cols, other.cols, 1.0, &self.data, false, &other.data, false, 0.0, &mut out.data);
        Ok(out)
    }
}

const SMALL_GEMM_ROWS: usize = 4;

/// `c = alpha * op(a) · op(b) + beta * c` with `op(a)` of shape `m x k`,
/// `op(b)` of shape `k x n` and all operands row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m <= SMALL_GEMM_ROWS {
        // single-step acting: skip the packed kernel and its scratch allocations
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                row.fill(0.0);
            } else if beta != 1.0 {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let av = alpha * a[i * rsa as usize + p * csa as usize];
                if av == 0.0 {
                    continue;
                }
                if tb {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += av * b[p + j * k];
                    }
                } else {
                    for (v, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *v += av * bv;
                    }
                }
            }
        }
        return;
    }
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major blocks whose lengths are checked by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_col_sums(dst: &mut [f64], src: &[f64]) {
    for row in src.chunks_exact(dst.len()) {
        for (d, s) in dst.iter_mut().zip(row) {
            *d += s;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub weight: Tensor2,
    /// `1 x out`.
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            weight: Tensor2::uniform(input, output, bound, rng),
            bias: Tensor2::uniform(1, output, bound, rng),
            activation,
        }
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weight: Tensor2::zeros(input, output),
            bias: Tensor2::zeros(1, output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }
}

/// `input · W + b` followed by the layer activation.
pub fn dense_forward(layer: &Dense, input: &Tensor2) -> Result<Tensor2> {
    if input.cols != layer.input_dim() {
        return Err(Error::domain(format!(
            "dense layer expects {} inputs, got {}",
            layer.input_dim(),
            input.cols
        )));
    }
    let mut out = Tensor2::zeros(input.rows, layer.output_dim());
    dense_into(layer, &input.data, input.rows, &mut out.data);
    Ok(out)
}

fn dense_into(layer: &Dense, input: &[f64], rows: usize, out: &mut [f64]) {
    let (i, o) = layer.weight.shape();
    out[..rows * o].copy_from_slice(&layer.bias.data.repeat(rows));
    gemm(rows, i, o, 1.0, input, false, &layer.weight.data, false, 1.0, out);
    if layer.activation == Activation::Relu {
        for v in out[..rows * o].iter_mut() {
            *v = v.max(0.0);
        }
    }
}

/// Single LSTM layer; gate blocks are laid out `[input, forget, cell, output]`
/// along the `4 * hidden` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `input x 4H`.
    pub input_weight: Tensor2,
    /// `H x 4H`.
    pub hidden_weight: Tensor2,
    /// `1 x 4H`.
    pub bias: Tensor2,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmParams {
            input_weight: Tensor2::uniform(input, 4 * hidden, bound, rng),
            hidden_weight: Tensor2::uniform(hidden, 4 * hidden, bound, rng),
            bias: Tensor2::uniform(1, 4 * hidden, bound, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            input_weight: Tensor2::zeros(input, 4 * hidden),
            hidden_weight: Tensor2::zeros(hidden, 4 * hidden),
            bias: Tensor2::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_weight.rows
    }

    pub fn input_size(&self) -> usize {
        self.input_weight.rows
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.hidden_weight.cols != 4 * h || self.input_weight.cols != 4 * h || self.bias.shape() != (1, 4 * h) {
            return Err(Error::domain("inconsistent LSTM gate shapes"));
        }
        Ok(())
    }
}

/// Applies the gate nonlinearities in place to preactivations `z` (rows x 4H)
/// and advances the cell state; returns nothing, writing `c` and `h`.
fn lstm_cell(z: &mut [f64], c_prev: &[f64], c: &mut [f64], tanh_c: &mut [f64], h: &mut [f64], hidden: usize) {
    for (r, zr) in z.chunks_exact_mut(4 * hidden).enumerate() {
        let base = r * hidden;
        for u in 0..hidden {
            let i = sigmoid(zr[u]);
            let f = sigmoid(zr[hidden + u]);
            let g = zr[2 * hidden + u].tanh();
            let o = sigmoid(zr[3 * hidden + u]);
            zr[u] = i;
            zr[hidden + u] = f;
            zr[2 * hidden + u] = g;
            zr[3 * hidden + u] = o;
            let cn = f * c_prev[base + u] + i * g;
            let tc = cn.tanh();
            c[base + u] = cn;
            tanh_c[base + u] = tc;
            h[base + u] = o * tc;
        }
    }
}

/// One LSTM step for a batch of rows: returns `(h', c')`.
pub fn lstm_step(params: &LstmParams, x: &Tensor2, h: &Tensor2, c: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    params.check()?;
    let hid = params.hidden_size();
    if x.cols != params.input_size() || h.cols != hid || c.cols != hid || h.rows != x.rows || c.rows != x.rows {
        return Err(Error::domain(format!(
            "LSTM step shape mismatch: x {:?}, h {:?}, c {:?} for input {} hidden {hid}",
            x.shape(),
            h.shape(),
            c.shape(),
            params.input_size()
        )));
    }
    let rows = x.rows;
    let mut z = params.bias.data.repeat(rows);
    gemm(rows, x.cols, 4 * hid, 1.0, &x.data, false, &params.input_weight.data, false, 1.0, &mut z);
    gemm(rows, hid, 4 * hid, 1.0, &h.data, false, &params.hidden_weight.data, false, 1.0, &mut z);
    let mut h2 = Tensor2::zeros(rows, hid);
    let mut c2 = Tensor2::zeros(rows, hid);
    let mut tc = vec![0.0; rows * hid];
    lstm_cell(&mut z, &c.data, &mut c2.data, &mut tc, &mut h2.data, hid);
    Ok((h2, c2))
}

/// Layer sizes of a recurrent Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub obs_dim: usize,
    pub obs_embed: usize,
    pub act_embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub obs_embed: Dense,
    pub act_embed: Dense,
    pub lstm: LstmParams,
    pub head: Dense,
}

pub const BLOCK_NAMES: [&str; 9] = [
    "obs_embed.weight",
    "obs_embed.bias",
    "act_embed.weight",
    "act_embed.bias",
    "lstm.input_weight",
    "lstm.hidden_weight",
    "lstm.bias",
    "head.weight",
    "head.bias",
];

impl NetworkParams {
    pub fn new<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R) -> Self {
        NetworkParams {
            obs_embed: Dense::new(shape.obs_dim, shape.obs_embed, Activation::Relu, rng),
            act_embed: Dense::new(NUM_ACTIONS, shape.act_embed, Activation::Relu, rng),
            lstm: LstmParams::new(shape.obs_embed + shape.act_embed, shape.hidden, rng),
            head: Dense::new(shape.hidden, NUM_ACTIONS, Activation::Identity, rng),
        }
    }

    pub fn zeros(shape: NetworkShape) -> Self {
        NetworkParams {
            obs_embed: Dense::zeros(shape.obs_dim, shape.obs_embed, Activation::Relu),
            act_embed: Dense::zeros(NUM_ACTIONS, shape.act_embed, Activation::Relu),
            lstm: LstmParams::zeros(shape.obs_embed + shape.act_embed, shape.hidden),
            head: Dense::zeros(shape.hidden, NUM_ACTIONS, Activation::Identity),
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            obs_dim: self.obs_embed.input_dim(),
            obs_embed: self.obs_embed.output_dim(),
            act_embed: self.act_embed.output_dim(),
            hidden: self.lstm.hidden_size(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams::zeros(self.shape())
    }

    pub fn blocks(&self) -> [&Tensor2; 9] {
        [
            &self.obs_embed.weight,
            &self.obs_embed.bias,
            &self.act_embed.weight,
            &self.act_embed.bias,
            &self.lstm.input_weight,
            &self.lstm.hidden_weight,
            &self.lstm.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor2; 9] {
        [
            &mut self.obs_embed.weight,
            &mut self.obs_embed.bias,
            &mut self.act_embed.weight,
            &mut self.act_embed.bias,
            &mut self.lstm.input_weight,
            &mut self.lstm.hidden_weight,
            &mut self.lstm.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// Validates the dimension chain between layers.
    pub fn check(&self) -> Result<()> {
        let s = self.shape();
        self.lstm.check()?;
        if self.act_embed.input_dim() != NUM_ACTIONS || self.head.output_dim() != NUM_ACTIONS {
            return Err(Error::domain("action layers must have 6 units"));
        }
        if self.lstm.input_size() != s.obs_embed + s.act_embed || self.head.input_dim() != s.hidden {
            return Err(Error::domain("network dimension chain is broken"));
        }
        for b in self.blocks() {
            if b.data.len() != b.rows * b.cols {
                return Err(Error::domain("parameter block length mismatch"));
            }
        }
        Ok(())
    }

    /// Sum of all parameters; a cheap fingerprint for isolation checks.
    pub fn checksum(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.data.iter()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            for v in b.data.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Tensor2,
    pub c: Tensor2,
}

impl HiddenState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        HiddenState {
            h: Tensor2::zeros(rows, hidden),
            c: Tensor2::zeros(rows, hidden),
        }
    }
}

/// Everything a batched forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub steps: usize,
    pub batch: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    /// Concatenated post-ReLU embeddings, `(T*B) x (Eo+Ea)`.
    x: Vec<f64>,
    /// Activated gates, `(T*B) x 4H`.
    gates: Vec<f64>,
    /// `h_{t-1}` stacked, starting with the initial state.
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    /// Q-values, `(T*B) x 6`.
    pub q: Tensor2,
    pub final_state: HiddenState,
}

impl ForwardCache {
    pub fn q_at(&self, t: usize, b: usize) -> &[f64] {
        self.q.row(t * self.batch + b)
    }
}

/// Unrolls `net` over `steps` time steps for `batch` sequences.
///
/// `obs` is `(T*B) x obs_dim` and `prev_act` is `(T*B) x 6`, both time-major.
pub fn forward_sequences(
    net: &NetworkParams,
    obs: &Tensor2,
    prev_act: &Tensor2,
    steps: usize,
    initial: &HiddenState,
) -> Result<ForwardCache> {
    net.check()?;
    let s = net.shape();
    let batch = initial.h.rows;
    let rows = steps * batch;
    if obs.shape() != (rows, s.obs_dim) || prev_act.shape() != (rows, NUM_ACTIONS) {
        return Err(Error::domain(format!(
            "forward expects obs {:?} and actions {:?}, got {:?} and {:?}",
            (rows, s.obs_dim),
            (rows, NUM_ACTIONS),
            obs.shape(),
            prev_act.shape()
        )));
    }
    if initial.h.shape() != (batch, s.hidden) || initial.c.shape() != (batch, s.hidden) {
        return Err(Error::domain("initial hidden state shape mismatch"));
    }
    let hid = s.hidden;
    let xd = s.obs_embed + s.act_embed;

    let mut eo = vec![0.0; rows * s.obs_embed];
    dense_into(&net.obs_embed, &obs.data, rows, &mut eo);
    let mut ea = vec![0.0; rows * s.act_embed];
    dense_into(&net.act_embed, &prev_act.data, rows, &mut ea);
    let mut x = vec![0.0; rows * xd];
    for r in 0..rows {
        x[r * xd..r * xd + s.obs_embed].copy_from_slice(&eo[r * s.obs_embed..(r + 1) * s.obs_embed]);
        x[r * xd + s.obs_embed..(r + 1) * xd].copy_from_slice(&ea[r * s.act_embed..(r + 1) * s.act_embed]);
    }

    // input contribution for every step at once
    let mut gates = net.lstm.bias.data.repeat(rows);
    gemm(rows, xd, 4 * hid, 1.0, &x, false, &net.lstm.input_weight.data, false, 1.0, &mut gates);

    let mut h_prev = vec![0.0; rows * hid];
    let mut c_prev = vec![0.0; rows * hid];
    let mut h = vec![0.0; rows * hid];
    let mut c = vec![0.0; rows * hid];
    let mut tanh_c = vec![0.0; rows * hid];
    let blk = batch * hid;
    for t in 0..steps {
        let (hp, cp) = if t == 0 {
            (&initial.h.data[..], &initial.c.data[..])
        } else {
            (&h[(t - 1) * blk..t * blk], &c[(t - 1) * blk..t * blk])
        };
        h_prev[t * blk..(t + 1) * blk].copy_from_slice(hp);
        c_prev[t * blk..(t + 1) * blk].copy_from_slice(cp);
        let z = &mut gates[t * batch * 4 * hid..(t + 1) * batch * 4 * hid];
        gemm(batch, hid, 4 * hid, 1.0, &h_prev[t * blk..(t + 1) * blk], false, &net.lstm.hidden_weight.data, false, 1.0, z);
        lstm_cell(
            z,
            &c_prev[t * blk..(t + 1) * blk],
            &mut c[t * blk..(t + 1) * blk],
            &mut tanh_c[t * blk..(t + 1) * blk],
            &mut h[t * blk..(t + 1) * blk],
            hid,
        );
    }

    let mut q = Tensor2::zeros(rows, NUM_ACTIONS);
    dense_into(&net.head, &h, rows, &mut q.data);
    if !q.is_finite() {
        return Err(Error::domain("non-finite Q-values in forward pass"));
    }
    let final_state = if steps == 0 {
        initial.clone()
    } else {
        HiddenState {
            h: Tensor2::from_vec(batch, hid, h[(steps - 1) * blk..].to_vec())?,
            c: Tensor2::from_vec(batch, hid, c[(steps - 1) * blk..].to_vec())?,
        }
    };
    Ok(ForwardCache {
        steps,
        batch,
        obs: obs.data.clone(),
        act: prev_act.data.clone(),
        x,
        gates,
        h_prev,
        c_prev,
        tanh_c,
        h,
        q,
        final_state,
    })
}

/// Q-values for one sequence: `obs_seq` is `L x obs_dim`, `prev_act_seq` is
/// `L x 6`; returns `(L x 6, h_L, c_L)`.
pub fn q_forward(
    net: &NetworkParams,
    obs_seq: &Tensor2,
    prev_act_seq: &Tensor2,
    h0: &Tensor2,
    c0: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    if obs_seq.rows != prev_act_seq.rows {
        return Err(Error::domain("observation and action sequences differ in length"));
    }
    for r in 0..prev_act_seq.rows {
        let row = prev_act_seq.row(r);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if zeros != NUM_ACTIONS && !(ones == 1 && zeros == NUM_ACTIONS - 1) {
            return Err(Error::domain(format!("action row {r} is neither one-hot nor zero")));
        }
    }
    let init = HiddenState {
        h: h0.clone(),
        c: c0.clone(),
    };
    if h0.rows != 1 || c0.rows != 1 {
        return Err(Error::domain("q_forward runs a single sequence"));
    }
    let cache = forward_sequences(net, obs_seq, prev_act_seq, obs_seq.rows, &init)?;
    Ok((cache.q, cache.final_state.h, cache.final_state.c))
}

/// Regression targets for one batched forward pass, indexed like the
/// cache (`t * batch + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct TdTargets {
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Masked mean squared error between the taken-action Q-values and targets,
/// and its exact gradient with respect to every parameter.
pub fn backward(net: &NetworkParams, cache: &ForwardCache, targets: &TdTargets) -> Result<(f64, NetworkParams)> {
    let s = net.shape();
    let rows = cache.steps * cache.batch;
    if targets.actions.len() != rows || targets.targets.len() != rows || targets.mask.len() != rows {
        return Err(Error::domain(format!("targets must have {rows} entries")));
    }
    let count = targets.mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::domain("every step is masked; the loss is undefined"));
    }
    let mut loss = 0.0;
    let mut dq = vec![0.0; rows * NUM_ACTIONS];
    for r in 0..rows {
        if !targets.mask[r] {
            continue;
        }
        let a = targets.actions[r];
        if a >= NUM_ACTIONS {
            return Err(Error::domain(format!("action index {a} out of range")));
        }
        let diff = cache.q.data[r * NUM_ACTIONS + a] - targets.targets[r];
        loss += diff * diff;
        dq[r * NUM_ACTIONS + a] = 2.0 * diff / count as f64;
    }
    loss /= count as f64;
    let grads = backward_from_q(net, cache, &dq, s)?;
    Ok((loss, grads))
}

fn backward_from_q(net: &NetworkParams, cache: &ForwardCache, dq: &[f64], s: NetworkShape) -> Result<NetworkParams> {
    let (steps, batch) = (cache.steps, cache.batch);
    let rows = steps * batch;
    let hid = s.hidden;
    let xd = s.obs_embed + s.act_embed;
    let mut g = net.zeros_like();

    // head
    gemm(hid, rows, NUM_ACTIONS, 1.0, &cache.h, true, dq, false, 0.0, &mut g.head.weight.data);
    add_col_sums(&mut g.head.bias.data, dq);
    let mut dh_out = vec![0.0; rows * hid];
    gemm(rows, NUM_ACTIONS, hid, 1.0, dq, false, &net.head.weight.data, true, 0.0, &mut dh_out);

    // recurrence, newest step first
    let blk = batch * hid;
    let mut dz = vec![0.0; rows * 4 * hid];
    let mut dh_next = vec![0.0; blk];
    let mut dc_next = vec![0.0; blk];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * batch * 4 * hid..(t + 1) * batch * 4 * hid];
        let dzt = &mut dz[t * batch * 4 * hid..(t + 1) * batch * 4 * hid];
        for b in 0..batch {
            let gr = &gates[b * 4 * hid..(b + 1) * 4 * hid];
            let dzr = &mut dzt[b * 4 * hid..(b + 1) * 4 * hid];
            let base = t * blk + b * hid;
            for u in 0..hid {
                let (i, f, gg, o) = (gr[u], gr[hid + u], gr[2 * hid + u], gr[3 * hid + u]);
                let tc = cache.tanh_c[base + u];
                let dh = dh_out[base + u] + dh_next[b * hid + u];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[b * hid + u];
                let d_o = dh * tc;
                let d_i = dc * gg;
                let d_g = dc * i;
                let d_f = dc * cache.c_prev[base + u];
                dc_next[b * hid + u] = dc * f;
                dzr[u] = d_i * i * (1.0 - i);
                dzr[hid + u] = d_f * f * (1.0 - f);
                dzr[2 * hid + u] = d_g * (1.0 - gg * gg);
                dzr[3 * hid + u] = d_o * o * (1.0 - o);
            }
        }
        gemm(batch, 4 * hid, hid, 1.0, dzt, false, &net.lstm.hidden_weight.data, true, 0.0, &mut dh_next);
    }
    gemm(xd, rows, 4 * hid, 1.0, &cache.x, true, &dz, false, 0.0, &mut g.lstm.input_weight.data);
    gemm(hid, rows, 4 * hid, 1.0, &cache.h_prev, true, &dz, false, 0.0, &mut g.lstm.hidden_weight.data);
    add_col_sums(&mut g.lstm.bias.data, &dz);

    // embeddings
    let mut dx = vec![0.0; rows * xd];
    gemm(rows, 4 * hid, xd, 1.0, &dz, false, &net.lstm.input_weight.data, true, 0.0, &mut dx);
    let mut deo = vec![0.0; rows * s.obs_embed];
    let mut dea = vec![0.0; rows * s.act_embed];
    for r in 0..rows {
        for u in 0..s.obs_embed {
            if cache.x[r * xd + u] > 0.0 {
                deo[r * s.obs_embed + u] = dx[r * xd + u];
            }
        }
        for u in 0..s.act_embed {
            let k = r * xd + s.obs_embed + u;
            if cache.x[k] > 0.0 {
                dea[r * s.act_embed + u] = dx[k];
            }
        }
    }
    gemm(s.obs_dim, rows, s.obs_embed, 1.0, &cache.obs, true, &deo, false, 0.0, &mut g.obs_embed.weight.data);
    add_col_sums(&mut g.obs_embed.bias.data, &deo);
    gemm(NUM_ACTIONS, rows, s.act_embed, 1.0, &cache.act, true, &dea, false, 0.0, &mut g.act_embed.weight.data);
    add_col_sums(&mut g.act_embed.bias.data, &dea);

    for b in g.blocks() {
        if !b.is_finite() {
            return Err(Error::domain("non-finite gradient"));
        }
    }
    Ok(g)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut NetworkParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: NetworkParams,
    pub v: NetworkParams,
}

impl AdamState {
    pub fn new(like: &NetworkParams, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut NetworkParams, grads: &NetworkParams, state: &mut AdamState) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(Error::domain("Adam shapes do not match the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    let m_blocks = state.m.blocks_mut();
    let v_blocks = state.v.blocks_mut();
    for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads.blocks()).zip(m_blocks).zip(v_blocks) {
        for (((pi, gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Writes every block of `net` as `(prefix + name, rows, cols, f64 LE data)`.
pub fn write_network<W: Write>(w: &mut W, prefix: &str, net: &NetworkParams) -> Result<()> {
    for (name, block) in BLOCK_NAMES.iter().zip(net.blocks()) {
        put_str(w, &format!("{prefix}{name}"))?;
        put_u64(w, block.rows as u64)?;
        put_u64(w, block.cols as u64)?;
        put_f64s(w, &block.data)?;
    }
    Ok(())
}

/// Reads blocks written by [`write_network`] into a network of `shape`,
/// rejecting any name or shape mismatch.
pub fn read_network<R: Read>(r: &mut R, prefix: &str, shape: NetworkShape) -> Result<NetworkParams> {
    let mut net = NetworkParams::zeros(shape);
    for (name, block) in BLOCK_NAMES.iter().zip(net.blocks_mut()) {
        let expected = format!("{prefix}{name}");
        let got = get_str(r)?;
        if got != expected {
            return Err(Error::Load(format!("expected block {expected:?}, found {got:?}")));
        }
        let rows = get_u64(r)? as usize;
        let cols = get_u64(r)? as usize;
        if (rows, cols) != block.shape() {
            return Err(Error::Load(format!(
                "block {expected} has shape {:?}, checkpoint says {:?}",
                block.shape(),
                (rows, cols)
            )));
        }
        block.data = get_f64s(r, rows * cols)?;
    }
    Ok(net)
}

pub fn write_adam<W: Write>(w: &mut W, prefix: &str, state: &AdamState) -> Result<()> {
    put_u64(w, state.step)?;
    put_f64s(w, &[state.lr, state.beta1, state.beta2, state.eps])?;
    write_network(w, &format!("{prefix}m."), &state.m)?;
    write_network(w, &format!("{prefix}v."), &state.v)
}

pub fn read_adam<R: Read>(r: &mut R, prefix: &str, shape: NetworkShape) -> Result<AdamState> {
    let step = get_u64(r)?;
    let consts = get_f64s(r, 4)?;
    let m = read_network(r, &format!("{prefix}m."), shape)?;
    let v = read_network(r, &format!("{prefix}v."), shape)?;
    Ok(AdamState {
        lr: consts[0],
        beta1: consts[1],
        beta2: consts[2],
        eps: consts[3],
        step,
        m,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetworkShape {
        NetworkShape {
            obs_dim: 8,
            obs_embed: 5,
            act_embed: 3,
            hidden: 4,
        }
    }

    fn one_hot_rows(actions: &[Option<usize>]) -> Tensor2 {
        let mut t = Tensor2::zeros(actions.len(), NUM_ACTIONS);
        for (r, a) in actions.iter().enumerate() {
            if let Some(a) = a {
                t.set(r, *a, 1.0);
            }
        }
        t
    }

    #[test]
    fn gemm_paths_agree_for_every_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in [1, 3, 4, 5, 9] {
            let (k, n) = (7, 5);
            let a = Tensor2::uniform(m, k, 1.0, &mut rng).data;
            let b = Tensor2::uniform(k, n, 1.0, &mut rng).data;
            let c0 = Tensor2::uniform(m, n, 1.0, &mut rng).data;
            let mut expect = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let dot: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                    expect[i * n + j] = 0.5 * dot + 2.0 * c0[i * n + j];
                }
            }
            let at: Vec<f64> = (0..k * m).map(|r| a[(r % m) * k + r / m]).collect();
            let bt: Vec<f64> = (0..n * k).map(|r| b[(r % k) * n + r / k]).collect();
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let mut c = c0.clone();
                gemm(m, k, n, 0.5, if ta { &at } else { &a }, ta, if tb { &bt } else { &b }, tb, 2.0, &mut c);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12, "m={m} ta={ta} tb={tb}");
                }
            }
        }
    }

    #[test]
    fn dense_zero_and_identity() {
        let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let zero = Dense::zeros(3, 4, Activation::Relu);
        assert_eq!(dense_forward(&zero, &x).unwrap(), Tensor2::zeros(2, 4));
        let mut id = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            id.weight.set(i, i, 1.0);
        }
        assert_eq!(dense_forward(&id, &x).unwrap(), x);
        assert!(dense_forward(&zero, &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn dense_matches_hand_product() {
        // [1 2; 3 4] · [0.5 -1; 2 0.25] + [0.1, -0.2]
        let layer = Dense {
            weight: Tensor2::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
            bias: Tensor2::from_vec(1, 2, vec![0.1, -0.2]).unwrap(),
            activation: Activation::Identity,
        };
        let x = Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dense_forward(&layer, &x).unwrap();
        assert_eq!(y.data, vec![4.6, -0.7, 9.6, -2.2]);
        let relu = Dense {
            activation: Activation::Relu,
            ..layer
        };
        assert_eq!(dense_forward(&relu, &x).unwrap().data, vec![4.6, 0.0, 9.6, 0.0]);
    }

    #[test]
    fn lstm_zero_params_give_zero_hidden() {
        let p = LstmParams::zeros(3, 2);
        let x = Tensor2::row_vector(&[1.0, -4.0, 2.0]);
        let (h, c) = lstm_step(&p, &x, &Tensor2::zeros(1, 2), &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(h.data, vec![0.0, 0.0]);
        assert_eq!(c.data, vec![0.0, 0.0]);
    }

    #[test]
    fn lstm_single_unit_hand_computation() {
        // gates: z_i = 0.5x + 0.1h + 0.0, z_f = -0.3x + 0.2h + 1.0,
        //        z_g = 0.8x - 0.4h + 0.1, z_o = 0.25x + 0.3h - 0.2
        let p = LstmParams {
            input_weight: Tensor2::from_vec(1, 4, vec![0.5, -0.3, 0.8, 0.25]).unwrap(),
            hidden_weight: Tensor2::from_vec(1, 4, vec![0.1, 0.2, -0.4, 0.3]).unwrap(),
            bias: Tensor2::from_vec(1, 4, vec![0.0, 1.0, 0.1, -0.2]).unwrap(),
        };
        let (x, h, c) = (0.7, -0.35, 0.6);
        let (h2, c2) = lstm_step(&p, &Tensor2::row_vector(&[x]), &Tensor2::row_vector(&[h]), &Tensor2::row_vector(&[c])).unwrap();
        // evaluated independently with 30-digit arithmetic
        let want_c = 0.787_447_341_960_095_6;
        let want_h = 0.307_159_066_723_651_46;
        assert!((c2.data[0] - want_c).abs() < 1e-12, "{}", c2.data[0]);
        assert!((h2.data[0] - want_h).abs() < 1e-12, "{}", h2.data[0]);
    }

    #[test]
    fn lstm_cell_growth_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::new(3, 6, &mut rng);
        for _ in 0..200 {
            let x = Tensor2::uniform(1, 3, 50.0, &mut rng);
            let h = Tensor2::uniform(1, 6, 1.0, &mut rng);
            let c = Tensor2::uniform(1, 6, 10.0, &mut rng);
            let (h2, c2) = lstm_step(&p, &x, &h, &c).unwrap();
            assert!(h2.is_finite() && c2.is_finite());
            for (a, b) in c2.data.iter().zip(&c.data) {
                assert!(a.abs() <= b.abs() + 1.0);
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = NetworkParams::new(shape(), &mut rng);
        net.head = Dense::zeros(4, NUM_ACTIONS, Activation::Identity);
        let obs = Tensor2::uniform(5, 8, 1.0, &mut rng);
        let acts = one_hot_rows(&[None, Some(1), Some(4), Some(0), Some(5)]);
        let (q, _, _) = q_forward(&net, &obs, &acts, &Tensor2::zeros(1, 4), &Tensor2::zeros(1, 4)).unwrap();
        assert!(q.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn q_forward_is_order_sensitive_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = NetworkParams::new(shape(), &mut rng);
        let obs = Tensor2::uniform(4, 8, 1.0, &mut rng);
        let acts = one_hot_rows(&[None, Some(2), Some(3), Some(1)]);
        let mut rev_obs = Tensor2::zeros(4, 8);
        let mut rev_act = Tensor2::zeros(4, NUM_ACTIONS);
        for r in 0..4 {
            rev_obs.data[r * 8..(r + 1) * 8].copy_from_slice(obs.row(3 - r));
            rev_act.data[r * 6..(r + 1) * 6].copy_from_slice(acts.row(3 - r));
        }
        let z = Tensor2::zeros(1, 4);
        let fwd = q_forward(&net, &obs, &acts, &z, &z).unwrap();
        let again = q_forward(&net, &obs, &acts, &z, &z).unwrap();
        assert_eq!(fwd, again);
        let rev = q_forward(&net, &rev_obs, &rev_act, &z, &z).unwrap();
        assert_ne!(fwd.0, rev.0);
    }

    #[test]
    fn single_step_is_the_hand_chained_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::new(shape(), &mut rng);
        let obs = Tensor2::uniform(1, 8, 1.0, &mut rng);
        let act = one_hot_rows(&[Some(3)]);
        let h0 = Tensor2::uniform(1, 4, 0.5, &mut rng);
        let c0 = Tensor2::uniform(1, 4, 0.5, &mut rng);
        let (q, h, c) = q_forward(&net, &obs, &act, &h0, &c0).unwrap();

        let eo = dense_forward(&net.obs_embed, &obs).unwrap();
        let ea = dense_forward(&net.act_embed, &act).unwrap();
        let x = Tensor2::row_vector(&[eo.data, ea.data].concat());
        let (h2, c2) = lstm_step(&net.lstm, &x, &h0, &c0).unwrap();
        let q2 = dense_forward(&net.head, &h2).unwrap();
        for (a, b) in q.data.iter().zip(&q2.data) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(h.data.iter().zip(&h2.data).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(c.data.iter().zip(&c2.data).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn bad_action_rows_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::new(shape(), &mut rng);
        let obs = Tensor2::zeros(1, 8);
        let mut act = Tensor2::zeros(1, NUM_ACTIONS);
        act.set(0, 0, 0.5);
        let z = Tensor2::zeros(1, 4);
        assert!(q_forward(&net, &obs, &act, &z, &z).is_err());
        assert!(q_forward(&net, &Tensor2::zeros(2, 8), &Tensor2::zeros(1, 6), &z, &z).is_err());
    }

    fn batch_inputs(rng: &mut ChaCha8Rng, steps: usize, batch: usize) -> (Tensor2, Tensor2) {
        let obs = Tensor2::uniform(steps * batch, 8, 1.0, rng);
        let acts: Vec<Option<usize>> = (0..steps * batch)
            .map(|r| if r < batch { None } else { Some(rng.random_range(0..NUM_ACTIONS)) })
            .collect();
        (obs, one_hot_rows(&acts))
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = NetworkParams::new(shape(), &mut rng);
        let (obs, act) = batch_inputs(&mut rng, 3, 2);
        let cache = forward_sequences(&net, &obs, &act, 3, &HiddenState::zeros(2, 4)).unwrap();
        let actions: Vec<usize> = (0..6).map(|r| r % NUM_ACTIONS).collect();
        let targets = TdTargets {
            targets: actions.iter().enumerate().map(|(r, a)| cache.q.get(r, *a)).collect(),
            actions,
            mask: vec![true; 6],
        };
        let (loss, g) = backward(&net, &cache, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.blocks().iter().all(|b| b.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn head_bias_gradient_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = NetworkParams::new(shape(), &mut rng);
        let (obs, act) = batch_inputs(&mut rng, 1, 1);
        let cache = forward_sequences(&net, &obs, &act, 1, &HiddenState::zeros(1, 4)).unwrap();
        let y = 2.5;
        let targets = TdTargets {
            actions: vec![2],
            targets: vec![y],
            mask: vec![true],
        };
        let (_, g) = backward(&net, &cache, &targets).unwrap();
        let q = cache.q.get(0, 2);
        for a in 0..NUM_ACTIONS {
            let want = if a == 2 { 2.0 * (q - y) } else { 0.0 };
            assert_eq!(g.head.bias.data[a], want);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = NetworkParams::new(shape(), &mut rng);
        let (obs, act) = batch_inputs(&mut rng, 2, 1);
        let cache = forward_sequences(&net, &obs, &act, 2, &HiddenState::zeros(1, 4)).unwrap();
        let t = TdTargets {
            actions: vec![0, 0],
            targets: vec![1.0, 1.0],
            mask: vec![false, false],
        };
        assert!(matches!(backward(&net, &cache, &t), Err(Error::Domain(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = NetworkParams::new(shape(), &mut rng);
        let before = net.clone();
        let mut grads = net.zeros_like();
        for b in grads.blocks_mut() {
            for v in b.data.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        let mut state = AdamState::new(&net, 0.001);
        adam_update(&mut net, &grads, &mut state).unwrap();
        for ((p, p0), g) in net.blocks().iter().zip(before.blocks()).zip(grads.blocks()) {
            for ((a, b), gi) in p.data.iter().zip(&p0.data).zip(&g.data) {
                let step = a - b;
                assert!((step + 0.001 * gi.signum()).abs() < 1e-9, "{step} vs {gi}");
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = NetworkParams::new(shape(), &mut rng);
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.001);
        let zeros = net.zeros_like();
        adam_update(&mut net, &zeros, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_two_steps_match_recurrence() {
        // scalar parameter embedded in the head bias, constant gradient g = 0.3
        let mut net = NetworkParams::zeros(shape());
        net.head.bias.data[0] = 1.0;
        let mut grads = net.zeros_like();
        grads.head.bias.data[0] = 0.3;
        let mut state = AdamState::new(&net, 0.001);
        adam_update(&mut net, &grads, &mut state).unwrap();
        adam_update(&mut net, &grads, &mut state).unwrap();
        // hand iteration: m1 = 0.03, v1 = 9e-5, m2 = 0.057, v2 = 1.7991e-4;
        // both bias-corrected ratios equal 0.3/(0.3+1e-8)
        let step = 0.001 * 0.3 / (0.3 + 1e-8);
        let want = 1.0 - 2.0 * step;
        assert!((net.head.bias.data[0] - want).abs() < 1e-12, "{}", net.head.bias.data[0]);
        assert!((state.m.head.bias.data[0] - 0.057).abs() < 1e-15);
        assert!((state.v.head.bias.data[0] - 1.7991e-4).abs() < 1e-15);
    }

    #[test]
    fn clip_limits_global_norm() {
        let mut g = NetworkParams::zeros(shape());
        g.head.bias.data[0] = 3.0;
        g.lstm.bias.data[1] = 4.0;
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn network_block_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = NetworkParams::new(shape(), &mut rng);
        let mut state = AdamState::new(&net, 0.01);
        state.step = 7;
        state.m = NetworkParams::new(shape(), &mut rng);
        let mut bytes = Vec::new();
        write_network(&mut bytes, "online.", &net).unwrap();
        write_adam(&mut bytes, "adam.", &state).unwrap();
        let mut r = bytes.as_slice();
        assert_eq!(read_network(&mut r, "online.", shape()).unwrap(), net);
        assert_eq!(read_adam(&mut r, "adam.", shape()).unwrap(), state);
        let wrong = NetworkShape { hidden: 5, ..shape() };
        assert!(read_network(&mut bytes.as_slice(), "online.", wrong).is_err());
        assert!(read_network(&mut bytes.as_slice(), "target.", shape()).is_err());
    }

    /// Loss recomputed from scratch through `q_forward`, one sequence at a time.
    fn reference_loss(net: &NetworkParams, obs: &Tensor2, act: &Tensor2, steps: usize, batch: usize, t: &TdTargets) -> f64 {
        let count = t.mask.iter().filter(|m| **m).count() as f64;
        let mut total = 0.0;
        for b in 0..batch {
            let mut o = Tensor2::zeros(steps, obs.cols);
            let mut a = Tensor2::zeros(steps, NUM_ACTIONS);
            for s in 0..steps {
                o.data[s * obs.cols..(s + 1) * obs.cols].copy_from_slice(obs.row(s * batch + b));
                a.data[s * 6..(s + 1) * 6].copy_from_slice(act.row(s * batch + b));
            }
            let z = Tensor2::zeros(1, net.shape().hidden);
            let (q, _, _) = q_forward(net, &o, &a, &z, &z).unwrap();
            for s in 0..steps {
                let r = s * batch + b;
                if t.mask[r] {
                    total += (q.get(s, t.actions[r]) - t.targets[r]).powi(2);
                }
            }
        }
        total / count
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = NetworkParams::new(shape(), &mut rng);
        let (steps, batch) = (3, 2);
        let (obs, act) = batch_inputs(&mut rng, steps, batch);
        let targets = TdTargets {
            actions: (0..6).map(|_| rng.random_range(0..NUM_ACTIONS)).collect(),
            targets: (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            mask: vec![true, true, true, false, true, true],
        };
        let cache = forward_sequences(&net, &obs, &act, steps, &HiddenState::zeros(batch, 4)).unwrap();
        let (loss, grads) = backward(&net, &cache, &targets).unwrap();
        assert!((loss - reference_loss(&net, &obs, &act, steps, batch, &targets)).abs() < 1e-12);
        let delta = 1e-5;
        let mut worst = 0.0f64;
        for (bi, g) in grads.blocks().iter().enumerate() {
            for k in 0..g.data.len() {
                let mut plus = net.clone();
                plus.blocks_mut()[bi].data[k] += delta;
                let mut minus = net.clone();
                minus.blocks_mut()[bi].data[k] -= delta;
                let fd = (reference_loss(&plus, &obs, &act, steps, batch, &targets)
                    - reference_loss(&minus, &obs, &act, steps, batch, &targets))
                    / (2.0 * delta);
                let an = g.data[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{} [{k}]: analytic {an} vs numeric {fd}", BLOCK_NAMES[bi]);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn masked_garbage_does_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = NetworkParams::new(shape(), &mut rng);
        let (steps, batch) = (4, 2);
        let (obs, act) = batch_inputs(&mut rng, steps, batch);
        // sequence 1 is valid for its first two steps only
        let mask: Vec<bool> = (0..8).map(|r| r % 2 == 0 || r / 2 < 2).collect();
        let targets = TdTargets {
            actions: (0..8).map(|r| r % NUM_ACTIONS).collect(),
            targets: (0..8).map(|r| r as f64 * 0.1).collect(),
            mask: mask.clone(),
        };
        let run = |obs: &Tensor2, targets: &TdTargets| {
            let cache = forward_sequences(&net, obs, &act, steps, &HiddenState::zeros(batch, 4)).unwrap();
            backward(&net, &cache, targets).unwrap()
        };
        let clean = run(&obs, &targets);
        let mut noisy_obs = obs.clone();
        let mut noisy_t = targets.clone();
        for r in 0..8 {
            if !mask[r] {
                for v in noisy_obs.data[r * 8..(r + 1) * 8].iter_mut() {
                    *v = rng.random_range(-1e3..1e3);
                }
                noisy_t.targets[r] = 1e6;
                noisy_t.actions[r] = 5;
            }
        }
        assert_eq!(clean, run(&noisy_obs, &noisy_t));
    }
}
