//! Reverse-mode gradient tape.
//!
//! Forward calls record each result together with the operation that
//! produced it. [`Tape::backward`] walks the record in reverse and adds the
//! gradient of a scalar loss into every parameter that took part. Repeated
//! `backward` calls accumulate; clear with [`ParamStore::zero_grads`].

use rand::Rng;

use super::kernels::{self, AttentionDims, LayerNormCache, Layout};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Dropout {
        x: Var,
        keep: Tensor<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    SoftmaxRows {
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        eps: T,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Multiplicative inverted-dropout mask: each entry is `0` with
/// probability `p`, otherwise `1 / (1 - p)`.
pub fn dropout_mask<T: Real, R: Rng>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul { a, b }, &[a, b]))
    }

    /// Add a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::Shape(format!(
                "bias of length {} for rows of {n}",
                bv.len()
            )));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.push(y, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Affine map `x · w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.check_same_shape(bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale { x, c }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x }, &[x])
    }

    /// Sign of every ReLU input recorded so far, in tape order. Two
    /// forward passes with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, cache) = kernels::layer_norm_with_cache(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout with an explicit mask (see [`dropout_mask`]).
    pub fn dropout_with(&mut self, x: Var, keep: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(&keep)?;
        let data = xv.data().iter().zip(keep.data()).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Dropout { x, keep }, &[x]))
    }

    /// Inverted dropout drawing its mask from `rng`. `p == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = dropout_mask(self.value(x).shape(), p, rng);
        self.dropout_with(x, keep)
    }

    /// Scaled dot-product attention over projected `q`, `k`, `v`, with an
    /// optional dropout mask on the attention weights
    /// (`[batch, heads, seq, seq]` flattened).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        keep: Option<Vec<T>>,
    ) -> Result<Var> {
        let expect = [dims.batch * dims.seq, dims.width];
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if self.value(t).shape() != expect {
                return Err(Error::Shape(format!(
                    "attention {name} has shape {:?}, expected {:?}",
                    self.value(t).shape(),
                    expect
                )));
            }
        }
        if let Some(m) = &keep {
            if m.len() != dims.batch * dims.heads * dims.seq * dims.seq {
                return Err(Error::Shape("attention dropout mask has wrong size".into()));
            }
        }
        let (y, probs) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            dims,
            keep.as_deref(),
        );
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
                keep,
            },
            &[q, k, v],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::SoftmaxRows { x }, &[x]))
    }

    /// Stack the selected rows of a 2-D value.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Shape(format!(
                "row {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let y = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            y,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// `Σ_r w_r · −ln(max(p[r, label_r], eps))` over rows of a probability
    /// matrix.
    pub fn nll(&mut self, probs: Var, labels: &[usize], weights: &[T], eps: T) -> Result<Var> {
        let p = self.value(probs);
        if labels.len() != p.rows() || weights.len() != p.rows() {
            return Err(Error::Shape("nll needs one label and weight per row".into()));
        }
        if labels.iter().any(|&l| l >= p.cols()) {
            return Err(Error::Shape("label index out of range".into()));
        }
        let total: T = labels
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&l, &w))| -w * p.row(r)[l].max(eps).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            &[probs],
        ))
    }

    /// `Σ_r w_r · mean_j (pred[r,j] − target[r,j])²`.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>, weights: &[T]) -> Result<Var> {
        let p = self.value(pred);
        p.check_same_shape(&target)?;
        if weights.len() != p.rows() {
            return Err(Error::Shape("mse needs one weight per row".into()));
        }
        let d = T::from_usize(p.cols()).unwrap();
        let total: T = (0..p.rows())
            .map(|r| {
                let se: T = p
                    .row(r)
                    .iter()
                    .zip(target.row(r))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                weights[r] * se / d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::Mse {
                pred,
                target,
                weights: weights.to_vec(),
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `Σ c_i · x_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape("weighted_sum takes scalar terms".into()));
            }
            total += c * t.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &inputs,
        ))
    }

    /// Differentiate the scalar `loss` and add the result into the
    /// gradients of every parameter recorded on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.ensure_finite("loss")?;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| {
                if self.needs(v) {
                    match &mut grads[v.0] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul { a, b } => {
                    if self.needs(*a) {
                        send(
                            *a,
                            kernels::gemm(&g, Layout::Normal, self.value(*b), Layout::Transposed)?,
                        );
                    }
                    if self.needs(*b) {
                        send(
                            *b,
                            kernels::gemm(self.value(*a), Layout::Transposed, &g, Layout::Normal)?,
                        );
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(*bias) {
                        let n = g.cols();
                        let mut db = Tensor::zeros(self.value(*bias).shape());
                        for row in g.data().chunks(n) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        send(*bias, db);
                    }
                    send(*x, g);
                }
                Op::Add { a, b } => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul { a, b } => {
                    let prod = |other: &Tensor<T>| {
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect(),
                        )
                    };
                    if self.needs(*a) {
                        send(*a, prod(self.value(*b))?);
                    }
                    if self.needs(*b) {
                        send(*b, prod(self.value(*a))?);
                    }
                }
                Op::Scale { x, c } => send(*x, g.map(|v| v * *c)),
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(&g, self.value(*gamma), cache);
                    send(*gamma, dg);
                    send(*beta, db);
                    send(*x, dx);
                }
                Op::Dropout { x, keep } => {
                    let data = g.data().iter().zip(keep.data()).map(|(&d, &m)| d * m).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    dims,
                    probs,
                    keep,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        keep.as_deref(),
                        *dims,
                    );
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::SoftmaxRows { x } => {
                    let p = &node.value;
                    let n = p.cols();
                    let mut dx = Tensor::zeros(p.shape());
                    for ((pr, gr), dr) in p
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(dx.data_mut().chunks_mut(n))
                    {
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    send(*x, dx);
                }
                Op::Nll {
                    probs,
                    labels,
                    weights,
                    eps,
                } => {
                    let p = self.value(*probs);
                    let up = g.item();
                    let mut dp = Tensor::zeros(p.shape());
                    for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                        let pv = p.row(r)[l];
                        if pv > *eps {
                            dp.row_mut(r)[l] = -up * w / pv;
                        }
                    }
                    send(*probs, dp);
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                } => {
                    let p = self.value(*pred);
                    let up = g.item();
                    let two_over_d = T::from_f64_lossy(2.0) / T::from_usize(p.cols()).unwrap();
                    let mut dp = Tensor::zeros(p.shape());
                    for (r, &w) in weights.iter().enumerate() {
                        let c = up * w * two_over_d;
                        for ((d, &a), &b) in dp.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                            *d = c * (a - b);
                        }
                    }
                    send(*pred, dp);
                }
                Op::Sum { x } => {
                    send(*x, Tensor::full(self.value(*x).shape(), g.item()));
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        send(v, Tensor::scalar(g.item() * c));
                    }
                }
            }
        }
        Ok(())
    }
}
