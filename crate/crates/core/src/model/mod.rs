//! The paired-sequence transformer: token layout, positional encoding,
//! post-LN encoder stack and the three output blocks.
//!
//! Inputs go straight from token assembly (and masking) through additive
//! positional encoding into the first encoder layer. There is no learned
//! input projection.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use forward::{encoder_forward, output_block1, output_block2, output_block3};
pub use params::{HeadIds, LayerIds, ModelParams};

use crate::dataset::FiveSeq;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::TOKEN_DIMS;

/// One-hot token dims.
pub mod token {
    pub const CLS: usize = 0;
    pub const SEP: usize = 1;
    pub const MSK: usize = 2;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image width, token dims included.
    pub d_model: usize,
    /// Images per sequence.
    pub seq_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub forward_expansion: usize,
    pub dropout_p: f64,
    /// Hidden width of the reconstruction block.
    pub mbm_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 420,
            seq_len: 5,
            n_layers: 3,
            n_heads: 2,
            forward_expansion: 4,
            dropout_p: 0.1,
            mbm_hidden: 840,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// CLS, seq1, SEP, seq2.
    pub fn positions(&self) -> usize {
        2 * self.seq_len + 2
    }

    pub fn sep_position(&self) -> usize {
        self.seq_len + 1
    }

    /// Positions holding data images.
    pub fn data_positions(&self) -> Vec<usize> {
        (1..=self.seq_len)
            .chain(self.seq_len + 2..self.positions())
            .collect()
    }

    pub fn ff_hidden(&self) -> usize {
        self.d_model * self.forward_expansion
    }

    pub fn ntp_hidden(&self) -> usize {
        self.d_model / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model <= TOKEN_DIMS || self.d_model < 2 {
            return bad(format!(
                "d_model {} leaves no room for data beyond the {TOKEN_DIMS} token dims",
                self.d_model
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.seq_len == 0 || self.n_layers == 0 {
            return bad("seq_len and n_layers must be at least 1".into());
        }
        if self.forward_expansion == 0 || self.mbm_hidden == 0 {
            return bad("forward_expansion and mbm_hidden must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Whether two configs produce identically shaped parameters.
    pub fn same_shapes(&self, other: &Self) -> bool {
        (self.d_model, self.seq_len, self.n_layers, self.n_heads)
            == (other.d_model, other.seq_len, other.n_layers, other.n_heads)
            && (self.forward_expansion, self.mbm_hidden)
                == (other.forward_expansion, other.mbm_hidden)
    }

    /// Parameter count derived from the layer shapes alone.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ff_hidden();
        let per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
        let h1 = self.ntp_hidden();
        let block1 = d * h1 + h1 + h1 * 2 + 2;
        let h2 = self.mbm_hidden;
        let block2 = d * h2 + h2 + h2 * d + d;
        let block3 = d * 2 + 2;
        self.n_layers * per_layer + block1 + block2 + block3
    }
}

pub fn token_vector<T: Real>(d_model: usize, dim: usize) -> Vec<T> {
    let mut v = vec![T::zero(); d_model];
    v[dim] = T::one();
    v
}

/// `[CLS, seq1…, SEP, seq2…]` as a `positions × d_model` matrix.
pub fn assemble_input<T: Real>(cfg: &ModelConfig, seq1: &FiveSeq, seq2: &FiveSeq) -> Result<Tensor<T>> {
    let d = cfg.d_model;
    let mut data = Vec::with_capacity(cfg.positions() * d);
    data.extend(token_vector::<T>(d, token::CLS));
    for (i, s) in [seq1, seq2].into_iter().enumerate() {
        if s.width != d || s.images.len() != cfg.seq_len * d {
            return Err(Error::Shape(format!(
                "sequence {} has {} images of width {}, expected {} of width {d}",
                i + 1,
                s.images.len() / s.width.max(1),
                s.width,
                cfg.seq_len
            )));
        }
        if i == 1 {
            data.extend(token_vector::<T>(d, token::SEP));
        }
        data.extend(s.images.iter().map(|&v| T::from_f32(v).unwrap()));
    }
    Tensor::new(vec![cfg.positions(), d], data)
}

/// Fixed sinusoidal table: `sin(pos / 10000^(2i/d))` in even dims and the
/// matching cosine in odd dims.
pub fn positional_table<T: Real>(positions: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[positions, d], |k| {
        let (pos, j) = (k / d, k % d);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Add the positional table to every `positions`-row block of `x`.
pub fn positional_encode<T: Real>(x: &mut Tensor<T>, positions: usize) -> Result<()> {
    let d = x.cols();
    if x.rows() % positions != 0 {
        return Err(Error::Shape(format!(
            "{} rows do not split into blocks of {positions} positions",
            x.rows()
        )));
    }
    let pe = positional_table::<T>(positions, d);
    for block in x.data_mut().chunks_mut(positions * d) {
        for (v, &p) in block.iter_mut().zip(pe.data()) {
            *v += p;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
