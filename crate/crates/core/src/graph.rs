//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! The tape stores every intermediate value, so forward evaluation is a
//! side effect of building the graph. Kernels are shared with the
//! tape-free inference path in `tensor`, which keeps the two paths
//! numerically identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Identifier of a learnable parameter, assigned by the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var, Tensor<S>),
    Scale(Var, S),
    ScaleByScalar(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: S,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    SsruScan {
        forget: Var,
        update: Var,
    },
    CumMeanRows(Var),
    SumAll(Var),
    CrossEntropyLs {
        logits: Var,
        targets: Vec<u32>,
        eps_ls: S,
    },
    HardConcreteSample {
        log_alpha: Var,
        u: f64,
        gamma: f64,
        zeta: f64,
        beta: f64,
    },
    HardConcreteNonzero {
        log_alpha: Var,
        gamma: f64,
        zeta: f64,
        beta: f64,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    param: Option<ParamId>,
}

/// Recorded forward graph with reverse-mode gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
}

/// Accumulated gradients keyed by parameter id. Parameters with no path
/// to the loss are simply absent (their gradient is exactly zero).
#[derive(Default)]
pub struct GradMap<S: Scalar> {
    grads: HashMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `g` to the gradient stored for `id`.
    pub fn accumulate_raw(&mut self, id: ParamId, g: Tensor<S>) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(acc) => *acc = acc.add(&g)?,
            None => {
                self.grads.insert(id, g);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<S>)> {
        self.grads.iter()
    }

    /// Accumulates `other` into `self`, scaling by `w`.
    pub fn accumulate(&mut self, other: &GradMap<S>, w: S) -> Result<()> {
        for (&id, g) in other.grads.iter() {
            let scaled = g.scale(w);
            match self.grads.get_mut(&id) {
                Some(acc) => *acc = acc.add(&scaled)?,
                None => {
                    self.grads.insert(id, scaled);
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Binds a parameter tensor as a leaf. Binding the same id twice
    /// returns the same node.
    pub fn param(&mut self, id: ParamId, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, t.clone());
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(x, bias), value))
    }

    pub fn add_const(&mut self, x: Var, c: Tensor<S>) -> Result<Var> {
        let value = self.value(x).add(&c)?;
        Ok(self.push(Op::AddConst(x, c), value))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).scale(c);
        self.push(Op::Scale(x, c), value)
    }

    /// Multiplies every element of `x` by a scalar-valued node.
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by_scalar: scale must be scalar".to_string()));
        }
        let sv = self.value(s).item();
        let value = self.value(x).scale(sv);
        Ok(self.push(Op::ScaleByScalar(x, s), value))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).sigmoid();
        self.push(Op::Sigmoid(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(Op::Relu(x), value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let value = self.value(x).layer_norm(self.value(gain), self.value(bias), eps)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols { x, start, len }, value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let value = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Gated recurrence over rows with zero initial cell state:
    /// `c_t = f_t * c_{t-1} + (1 - f_t) * z_t`.
    pub fn ssru_scan(&mut self, forget: Var, update: Var) -> Result<Var> {
        let f = self.value(forget);
        let z = self.value(update);
        if f.shape() != z.shape() {
            return Err(Error::shape("ssru_scan: shape mismatch".to_string()));
        }
        let value = ssru_scan_forward(f, z);
        Ok(self.push(Op::SsruScan { forget, update }, value))
    }

    pub fn cummean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).cummean_rows();
        self.push(Op::CumMeanRows(x), value)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::SumAll(x), value)
    }

    /// Label-smoothed cross entropy, averaged over positions.
    pub fn cross_entropy_ls(&mut self, logits: Var, targets: &[u32], eps_ls: S) -> Result<Var> {
        let l = self.value(logits);
        let (n, v) = (l.rows(), l.cols());
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        for &t in targets {
            if (t as usize) >= v {
                return Err(Error::Vocab {
                    token: t,
                    vocab: v,
                    context: Some("cross_entropy target".into()),
                });
            }
        }
        let value = Tensor::scalar(cross_entropy_ls_forward(l, targets, eps_ls));
        Ok(self.push(
            Op::CrossEntropyLs {
                logits,
                targets: targets.to_vec(),
                eps_ls,
            },
            value,
        ))
    }

    /// Stretched-and-clamped concrete gate sample, differentiable in the
    /// gate parameter where the clamp is inactive.
    pub fn hard_concrete_sample(
        &mut self,
        log_alpha: Var,
        u: f64,
        gamma: f64,
        zeta: f64,
        beta: f64,
    ) -> Result<Var> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Train(format!("gate noise u={u} outside (0,1)")));
        }
        let a = self.value(log_alpha).item().as_f64();
        let g = hard_concrete_sample_value(a, u, gamma, zeta, beta);
        Ok(self.push(
            Op::HardConcreteSample {
                log_alpha,
                u,
                gamma,
                zeta,
                beta,
            },
            Tensor::scalar(S::from_f64(g)),
        ))
    }

    /// `1 - P(g = 0)` for a hard-concrete gate; the per-head term of the
    /// differentiable L0 penalty.
    pub fn hard_concrete_nonzero(
        &mut self,
        log_alpha: Var,
        gamma: f64,
        zeta: f64,
        beta: f64,
    ) -> Var {
        let a = self.value(log_alpha).item().as_f64();
        let p0 = hard_concrete_prob_zero(a, gamma, zeta, beta);
        self.push(
            Op::HardConcreteNonzero {
                log_alpha,
                gamma,
                zeta,
                beta,
            },
            Tensor::scalar(S::from_f64(1.0 - p0)),
        )
    }

    /// Recomputes every non-leaf value from its inputs and checks the
    /// result is bitwise identical to what was recorded.
    pub fn replay_check(&self) -> bool {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b)).unwrap(),
                Op::Add(a, b) => self.value(*a).add(self.value(*b)).unwrap(),
                Op::Sub(a, b) => self.value(*a).sub(self.value(*b)).unwrap(),
                Op::Mul(a, b) => self.value(*a).mul(self.value(*b)).unwrap(),
                Op::AddRow(x, bias) => self.value(*x).add_row(self.value(*bias)).unwrap(),
                Op::AddConst(x, c) => self.value(*x).add(c).unwrap(),
                Op::Scale(x, c) => self.value(*x).scale(*c),
                Op::ScaleByScalar(x, s) => self.value(*x).scale(self.value(*s).item()),
                Op::Sigmoid(x) => self.value(*x).sigmoid(),
                Op::Relu(x) => self.value(*x).relu(),
                Op::SoftmaxRows(x) => self.value(*x).softmax_rows(),
                Op::LayerNorm { x, gain, bias, eps } => self
                    .value(*x)
                    .layer_norm(self.value(*gain), self.value(*bias), *eps)
                    .unwrap(),
                Op::Transpose(x) => self.value(*x).transpose(),
                Op::SliceCols { x, start, len } => {
                    self.value(*x).slice_cols(*start, *len).unwrap()
                }
                Op::ConcatCols(parts) => {
                    let ts: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
                    Tensor::concat_cols(&ts).unwrap()
                }
                Op::Embed { table, ids } => self.value(*table).gather_rows(ids).unwrap(),
                Op::SsruScan { forget, update } => {
                    ssru_scan_forward(self.value(*forget), self.value(*update))
                }
                Op::CumMeanRows(x) => self.value(*x).cummean_rows(),
                Op::SumAll(x) => Tensor::scalar(self.value(*x).sum_all()),
                Op::CrossEntropyLs {
                    logits,
                    targets,
                    eps_ls,
                } => Tensor::scalar(cross_entropy_ls_forward(self.value(*logits), targets, *eps_ls)),
                Op::HardConcreteSample {
                    log_alpha,
                    u,
                    gamma,
                    zeta,
                    beta,
                } => Tensor::scalar(S::from_f64(hard_concrete_sample_value(
                    self.value(*log_alpha).item().as_f64(),
                    *u,
                    *gamma,
                    *zeta,
                    *beta,
                ))),
                Op::HardConcreteNonzero {
                    log_alpha,
                    gamma,
                    zeta,
                    beta,
                } => Tensor::scalar(S::from_f64(
                    1.0 - hard_concrete_prob_zero(
                        self.value(*log_alpha).item().as_f64(),
                        *gamma,
                        *zeta,
                        *beta,
                    ),
                )),
            };
            if recomputed.data() != node.value.data() {
                return false;
            }
        }
        true
    }

    /// Reverse-mode sweep from a scalar loss node. Returns gradients for
    /// every bound parameter that reaches the loss.
    pub fn backward(&self, loss: Var) -> Result<GradMap<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA = dY B^T
                    let mut da = vec![S::zero(); m * k];
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        let dar = &mut da[r * k..(r + 1) * k];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let mut s = S::zero();
                            for (d, &b1) in dyr.iter().zip(brow) {
                                s += *d * b1;
                            }
                            dar[kk] += s;
                        }
                    }
                    // dB = A^T dY
                    let mut db = vec![S::zero(); k * n];
                    for r in 0..m {
                        let arow = &av[r * k..(r + 1) * k];
                        let dyr = &dy[r * n..(r + 1) * n];
                        for (kk, &a1) in arow.iter().enumerate() {
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (o, &d) in dbrow.iter_mut().zip(dyr) {
                                *o += a1 * d;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy.iter().map(|&d| -d).collect());
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<S> = dy.iter().zip(bv).map(|(&d, &b1)| d * b1).collect();
                    let db: Vec<S> = dy.iter().zip(av).map(|(&d, &a1)| d * a1).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).numel();
                    let mut dbias = vec![S::zero(); n];
                    for row in dy.chunks(n) {
                        for (o, &d) in dbias.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    accumulate(&mut adj, *x, dy);
                    accumulate(&mut adj, *bias, dbias);
                }
                Op::AddConst(x, _) => accumulate(&mut adj, *x, dy),
                Op::Scale(x, c) => {
                    accumulate(&mut adj, *x, dy.iter().map(|&d| d * *c).collect());
                }
                Op::ScaleByScalar(x, s) => {
                    let sv = self.value(*s).item();
                    let xv = self.value(*x).data();
                    let dx: Vec<S> = dy.iter().map(|&d| d * sv).collect();
                    let ds: S = dy.iter().zip(xv).map(|(&d, &x1)| d * x1).sum();
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *s, vec![ds]);
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let dx: Vec<S> = dy
                        .iter()
                        .zip(yv)
                        .map(|(&d, &y)| d * y * (S::one() - y))
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<S> = dy
                        .iter()
                        .zip(xv)
                        .map(|(&d, &x1)| if x1 > S::zero() { d } else { S::zero() })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let yv = node.value.data();
                    let n = node.value.cols();
                    let mut dx = vec![S::zero(); yv.len()];
                    for ((dxr, dyr), yr) in
                        dx.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n))
                    {
                        let dot: S = dyr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                        for ((o, &d), &y) in dxr.iter_mut().zip(dyr).zip(yr) {
                            *o = y * (d - dot);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).data();
                    let n = xv.cols();
                    let nn = S::from_f64(n as f64);
                    let mut dx = vec![S::zero(); xv.numel()];
                    let mut dgain = vec![S::zero(); n];
                    let mut dbias = vec![S::zero(); n];
                    for (r, (xr, dyr)) in xv.data().chunks(n).zip(dy.chunks(n)).enumerate() {
                        let (mean, rstd) = crate::tensor::row_moments(xr, *eps);
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        // xhat and dxhat
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxh = dyr[j] * gv[j];
                            dgain[j] += dyr[j] * xhat;
                            dbias[j] += dyr[j];
                            m1 += dxh;
                            m2 += dxh * xhat;
                        }
                        m1 /= nn;
                        m2 /= nn;
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxh = dyr[j] * gv[j];
                            dxr[j] = rstd * (dxh - m1 - xhat * m2);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gain, dgain);
                    accumulate(&mut adj, *bias, dbias);
                }
                Op::Transpose(x) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    // node.value is [m, n]; input was [n, m]
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] = dy[i * n + j];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&dy[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = vec![S::zero(); m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut adj, p, dp);
                    }
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![S::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                            *o += g;
                        }
                    }
                    accumulate(&mut adj, *table, dt);
                }
                Op::SsruScan { forget, update } => {
                    let fv = self.value(*forget).data();
                    let zv = self.value(*update).data();
                    let cv = node.value.data();
                    let n = node.value.cols();
                    let t_len = node.value.rows();
                    let mut df = vec![S::zero(); fv.len()];
                    let mut dz = vec![S::zero(); zv.len()];
                    let mut carry = vec![S::zero(); n];
                    for t in (0..t_len).rev() {
                        let base = t * n;
                        for j in 0..n {
                            let dc = dy[base + j] + carry[j];
                            let f = fv[base + j];
                            let c_prev = if t == 0 { S::zero() } else { cv[base - n + j] };
                            df[base + j] = dc * (c_prev - zv[base + j]);
                            dz[base + j] = dc * (S::one() - f);
                            carry[j] = dc * f;
                        }
                    }
                    accumulate(&mut adj, *forget, df);
                    accumulate(&mut adj, *update, dz);
                }
                Op::CumMeanRows(x) => {
                    let n = node.value.cols();
                    let t_len = node.value.rows();
                    let mut dx = vec![S::zero(); dy.len()];
                    let mut acc = vec![S::zero(); n];
                    for t in (0..t_len).rev() {
                        let inv = S::one() / S::from_f64((t + 1) as f64);
                        for j in 0..n {
                            acc[j] += dy[t * n + j] * inv;
                            dx[t * n + j] = acc[j];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SumAll(x) => {
                    let d = dy[0];
                    accumulate(&mut adj, *x, vec![d; self.value(*x).numel()]);
                }
                Op::CrossEntropyLs {
                    logits,
                    targets,
                    eps_ls,
                } => {
                    let lv = self.value(*logits);
                    let (n, v) = (lv.rows(), lv.cols());
                    let scale = dy[0] / S::from_f64(n as f64);
                    let smooth = *eps_ls / S::from_f64(v as f64);
                    let confid = S::one() - *eps_ls;
                    let mut dl = lv.data().to_vec();
                    for (r, row) in dl.chunks_mut(v).enumerate() {
                        crate::tensor::softmax_row_inplace(row);
                        for (j, p) in row.iter_mut().enumerate() {
                            let q = if j == targets[r] as usize {
                                confid + smooth
                            } else {
                                smooth
                            };
                            *p = (*p - q) * scale;
                        }
                    }
                    accumulate(&mut adj, *logits, dl);
                }
                Op::HardConcreteSample {
                    log_alpha,
                    u,
                    gamma,
                    zeta,
                    beta,
                } => {
                    let a = self.value(*log_alpha).item().as_f64();
                    let d = hard_concrete_sample_grad(a, *u, *gamma, *zeta, *beta);
                    accumulate(&mut adj, *log_alpha, vec![dy[0] * S::from_f64(d)]);
                }
                Op::HardConcreteNonzero {
                    log_alpha,
                    gamma,
                    zeta,
                    beta,
                } => {
                    let a = self.value(*log_alpha).item().as_f64();
                    let c = *beta * (-*gamma / *zeta).ln();
                    let s = 1.0 / (1.0 + (-(c - a)).exp());
                    // d(1 - sigmoid(c - a))/da = sigmoid'(c - a)
                    let d = s * (1.0 - s);
                    accumulate(&mut adj, *log_alpha, vec![dy[0] * S::from_f64(d)]);
                }
            }
        }

        let mut grads = GradMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, adj[i].take()) {
                grads
                    .grads
                    .insert(id, Tensor::from_vec(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

pub(crate) fn ssru_scan_forward<S: Scalar>(f: &Tensor<S>, z: &Tensor<S>) -> Tensor<S> {
    let n = f.cols();
    let mut out = vec![S::zero(); f.numel()];
    let mut c = vec![S::zero(); n];
    for t in 0..f.rows() {
        let base = t * n;
        for j in 0..n {
            let ft = f.data()[base + j];
            c[j] = ft * c[j] + (S::one() - ft) * z.data()[base + j];
            out[base + j] = c[j];
        }
    }
    Tensor::from_vec(f.shape().to_vec(), out).unwrap()
}

pub(crate) fn cross_entropy_ls_forward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u32],
    eps_ls: S,
) -> S {
    let (n, v) = (logits.rows(), logits.cols());
    let smooth = eps_ls / S::from_f64(v as f64);
    let confid = S::one() - eps_ls;
    let mut total = S::zero();
    let mut row = vec![S::zero(); v];
    for r in 0..n {
        row.copy_from_slice(logits.row(r));
        // log-softmax via max subtraction
        let mut mx = row[0];
        for &x in row.iter() {
            if x > mx {
                mx = x;
            }
        }
        let lse = row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln() + mx;
        let mut loss = S::zero();
        for (j, &x) in row.iter().enumerate() {
            let q = if j == targets[r] as usize {
                confid + smooth
            } else {
                smooth
            };
            loss -= q * (x - lse);
        }
        total += loss;
    }
    total / S::from_f64(n as f64)
}

pub(crate) fn hard_concrete_sample_value(
    log_alpha: f64,
    u: f64,
    gamma: f64,
    zeta: f64,
    beta: f64,
) -> f64 {
    let s = 1.0 / (1.0 + (-((u / (1.0 - u)).ln() + log_alpha) / beta).exp());
    (s * (zeta - gamma) + gamma).clamp(0.0, 1.0)
}

fn hard_concrete_sample_grad(log_alpha: f64, u: f64, gamma: f64, zeta: f64, beta: f64) -> f64 {
    let s = 1.0 / (1.0 + (-((u / (1.0 - u)).ln() + log_alpha) / beta).exp());
    let pre = s * (zeta - gamma) + gamma;
    if pre <= 0.0 || pre >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) / beta * (zeta - gamma)
    }
}

pub(crate) fn hard_concrete_prob_zero(log_alpha: f64, gamma: f64, zeta: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-(beta * (-gamma / zeta).ln() - log_alpha)).exp())
}

/// Central-difference gradient check. Evaluates `f` with each coordinate
/// of each parameter perturbed by `±step` and compares against the
/// supplied analytic gradients (zero tensors for absent ones). Returns
/// the maximum relative error over all coordinates.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            let mut plus = p.data().to_vec();
            plus[j] = orig + step;
            work[pi] = Tensor::from_vec(p.shape().to_vec(), plus).unwrap();
            let fp = f(&work);
            let mut minus = p.data().to_vec();
            minus[j] = orig - step;
            work[pi] = Tensor::from_vec(p.shape().to_vec(), minus).unwrap();
            let fm = f(&work);
            work[pi] = p.clone();
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic[pi].data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
