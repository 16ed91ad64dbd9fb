//! Masked-image corruption of assembled inputs, applied before positional
//! encoding.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::FiveSeq;
use crate::error::{Error, Result};
use crate::model::{token, ModelConfig};
use crate::numerics::{Real, Tensor};
use crate::rng::Rng;

pub const P_TWO_POSITIONS: f64 = 0.5;
pub const P_MSK: f64 = 0.8;
pub const P_RANDOM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAction {
    Msk,
    Random,
    Keep,
}

/// One image of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub seq: usize,
    pub image: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSlot {
    /// Row of the assembled input; never CLS or SEP.
    pub position: usize,
    pub action: MaskAction,
}

/// Positions chosen for corruption, without duplicates, in draw order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub slots: Vec<MaskSlot>,
}

impl MaskPlan {
    pub fn positions(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.position).collect()
    }
}

/// Choose one or two (equally likely) data positions uniformly without
/// replacement; each becomes MSK, a random image or stays as is with
/// probabilities 0.8 / 0.1 / 0.1.
pub fn plan_mask(cfg: &ModelConfig, rng: &mut Rng) -> MaskPlan {
    let data = cfg.data_positions();
    let count = 1 + usize::from(rng.gen::<f64>() < P_TWO_POSITIONS);
    let slots = index::sample(rng, data.len(), count)
        .into_iter()
        .map(|k| {
            let u: f64 = rng.gen();
            let action = if u < P_MSK {
                MaskAction::Msk
            } else if u < P_MSK + P_RANDOM {
                MaskAction::Random
            } else {
                MaskAction::Keep
            };
            MaskSlot {
                position: data[k],
                action,
            }
        })
        .collect();
    MaskPlan { slots }
}

/// Images that random replacement may draw from.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    entries: Vec<ImageRef>,
}

impl ImagePool {
    /// Every image of the listed sequences.
    pub fn from_seqs(seqs: &[FiveSeq], pool: &[usize]) -> Self {
        let entries = pool
            .iter()
            .flat_map(|&s| {
                let n = seqs[s].images.len() / seqs[s].width;
                (0..n).map(move |image| ImageRef { seq: s, image })
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, r: &ImageRef) -> bool {
        self.entries.contains(r)
    }

    fn draw(&self, rng: &mut Rng) -> Result<ImageRef> {
        if self.entries.is_empty() {
            return Err(Error::Pool(
                "random replacement drawn but the image pool is empty".into(),
            ));
        }
        Ok(self.entries[rng.gen_range(0..self.entries.len())])
    }
}

/// What [`apply_mask`] changed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome<T> {
    /// Pre-corruption rows at the plan's positions, `[slots, d]`.
    pub targets: Tensor<T>,
    /// For random replacements, which pool image was written.
    pub sources: Vec<Option<ImageRef>>,
}

/// Corrupt `x` (`positions × d`) in place according to `plan`.
pub fn apply_mask<T: Real>(
    x: &mut Tensor<T>,
    plan: &MaskPlan,
    pool: &ImagePool,
    seqs: &[FiveSeq],
    rng: &mut Rng,
) -> Result<MaskOutcome<T>> {
    let d = x.cols();
    let mut targets = Vec::with_capacity(plan.slots.len() * d);
    let mut sources = Vec::with_capacity(plan.slots.len());
    for slot in &plan.slots {
        if slot.position >= x.rows() {
            return Err(Error::Shape(format!(
                "mask position {} outside {} rows",
                slot.position,
                x.rows()
            )));
        }
        targets.extend_from_slice(x.row(slot.position));
    }
    for slot in &plan.slots {
        let row = x.row_mut(slot.position);
        let source = match slot.action {
            MaskAction::Msk => {
                row.fill(T::zero());
                row[token::MSK] = T::one();
                None
            }
            MaskAction::Random => {
                let r = pool.draw(rng)?;
                let s = &seqs[r.seq];
                if s.width != d {
                    return Err(Error::Shape(format!(
                        "pool image width {} for inputs of width {d}",
                        s.width
                    )));
                }
                for (v, &src) in row.iter_mut().zip(s.image(r.image)) {
                    *v = T::from_f32(src).unwrap();
                }
                Some(r)
            }
            MaskAction::Keep => None,
        };
        sources.push(source);
    }
    Ok(MaskOutcome {
        targets: Tensor::new(vec![plan.slots.len(), d], targets)?,
        sources,
    })
}
