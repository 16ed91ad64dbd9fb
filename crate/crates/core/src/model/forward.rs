use super::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, AttentionDims, ParamId, Real, Tape, Tensor, Var};
use crate::rng::Rng;

impl<T: Real> ModelParams<T> {
    fn p(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(&self.store, id)
    }

    /// Run the encoder stack on `batch` stacked inputs (`batch·positions ×
    /// d_model`, already masked and position-encoded). Dropout is active
    /// iff `rng` is given.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        batch: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let positions = cfg.positions();
        if x.shape() != [batch * positions, cfg.d_model] {
            return Err(Error::Shape(format!(
                "encoder input {:?} does not hold {batch} inputs of {positions}×{}",
                x.shape(),
                cfg.d_model
            )));
        }
        let dims = AttentionDims::new(batch, positions, cfg.d_model, cfg.n_heads)?;
        let p_drop = cfg.dropout_p;
        let eps = T::from_f64_lossy(cfg.ln_eps);
        let mut h = tape.constant(x);
        for ids in &self.layers {
            let proj = |tape: &mut Tape<T>, w, b| -> Result<Var> {
                let (w, b) = (self.p(tape, w), self.p(tape, b));
                tape.linear(h, w, b)
            };
            let q = proj(tape, ids.wq, ids.bq)?;
            let k = proj(tape, ids.wk, ids.bk)?;
            let v = proj(tape, ids.wv, ids.bv)?;
            let att_keep = match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => {
                    let n = batch * cfg.n_heads * positions * positions;
                    Some(dropout_mask::<T, _>(&[n], p_drop, r).into_data())
                }
                _ => None,
            };
            let a = tape.attention(q, k, v, dims, att_keep)?;
            let (wo, bo) = (self.p(tape, ids.wo), self.p(tape, ids.bo));
            let mut o = tape.linear(a, wo, bo)?;
            if let Some(r) = rng.as_deref_mut() {
                o = tape.dropout(o, p_drop, r)?;
            }
            let res = tape.add(h, o)?;
            let (g1, b1) = (self.p(tape, ids.ln1_gamma), self.p(tape, ids.ln1_beta));
            h = tape.layer_norm(res, g1, b1, eps)?;

            let (w1, fb1) = (self.p(tape, ids.ff_w1), self.p(tape, ids.ff_b1));
            let f = tape.linear(h, w1, fb1)?;
            let f = tape.relu(f);
            let (w2, fb2) = (self.p(tape, ids.ff_w2), self.p(tape, ids.ff_b2));
            let mut f = tape.linear(f, w2, fb2)?;
            if let Some(r) = rng.as_deref_mut() {
                f = tape.dropout(f, p_drop, r)?;
            }
            let res = tape.add(h, f)?;
            let (g2, b2) = (self.p(tape, ids.ln2_gamma), self.p(tape, ids.ln2_beta));
            h = tape.layer_norm(res, g2, b2, eps)?;
        }
        Ok(h)
    }

    /// CLS rows of an encoded batch.
    pub fn cls_rows(&self, tape: &mut Tape<T>, hidden: Var, batch: usize) -> Result<Var> {
        let p = self.config.positions();
        let rows: Vec<usize> = (0..batch).map(|b| b * p).collect();
        tape.gather_rows(hidden, &rows)
    }

    /// Output block 1 on `[n, d]` CLS vectors: two affine maps, then
    /// softmax over (No, Yes).
    pub fn ntp_probs(&self, tape: &mut Tape<T>, cls: Var) -> Result<Var> {
        let h = self.heads;
        let (w1, b1) = (self.p(tape, h.b1_w1), self.p(tape, h.b1_b1));
        let z = tape.linear(cls, w1, b1)?;
        let (w2, b2) = (self.p(tape, h.b1_w2), self.p(tape, h.b1_b2));
        let z = tape.linear(z, w2, b2)?;
        tape.softmax_rows(z)
    }

    /// Output block 2 on `[n, d]` encoder rows: ReLU layer, then linear.
    pub fn reconstruct(&self, tape: &mut Tape<T>, rows: Var) -> Result<Var> {
        let h = self.heads;
        let (w1, b1) = (self.p(tape, h.b2_w1), self.p(tape, h.b2_b1));
        let z = tape.linear(rows, w1, b1)?;
        let z = tape.relu(z);
        let (w2, b2) = (self.p(tape, h.b2_w2), self.p(tape, h.b2_b2));
        tape.linear(z, w2, b2)
    }

    /// Output block 3 on `[n, d]` CLS vectors: one affine map, then softmax.
    pub fn sg_probs(&self, tape: &mut Tape<T>, cls: Var) -> Result<Var> {
        let h = self.heads;
        let (w, b) = (self.p(tape, h.b3_w), self.p(tape, h.b3_b));
        let z = tape.linear(cls, w, b)?;
        tape.softmax_rows(z)
    }
}

/// Encoder output for stacked inputs, without recording gradients.
pub fn encoder_forward<T: Real>(
    params: &ModelParams<T>,
    x: Tensor<T>,
    batch: usize,
    rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let h = params.encode(&mut tape, x, batch, rng)?;
    Ok(tape.value(h).clone())
}

fn block<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&ModelParams<T>, &mut Tape<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let d = params.config.d_model;
    if x.cols() != d || x.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "output block input {:?} is not [n, {d}]",
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(params, &mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// `[n, d]` → `[n, 2]` next-sequence probabilities.
pub fn output_block1<T: Real>(params: &ModelParams<T>, cls: &Tensor<T>) -> Result<Tensor<T>> {
    block(params, cls, |p, t, v| p.ntp_probs(t, v))
}

/// `[n, d]` → `[n, d]` reconstructions.
pub fn output_block2<T: Real>(params: &ModelParams<T>, rows: &Tensor<T>) -> Result<Tensor<T>> {
    block(params, rows, |p, t, v| p.reconstruct(t, v))
}

/// `[n, d]` → `[n, 2]` same-genre probabilities.
pub fn output_block3<T: Real>(params: &ModelParams<T>, cls: &Tensor<T>) -> Result<Tensor<T>> {
    block(params, cls, |p, t, v| p.sg_probs(t, v))
}
