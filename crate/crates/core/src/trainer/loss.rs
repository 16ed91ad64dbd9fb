//! Per-sample losses, and their batched form on a tape.

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::Rng;

/// Probability floor inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

fn class(label: Label) -> Result<usize> {
    label
        .class_index()
        .ok_or_else(|| Error::State("cross-entropy needs a defined label".into()))
}

/// `−ln p[label]` with `p` clamped below at [`PROB_EPS`].
pub fn ntp_loss(probs: &[f64], label: Label) -> Result<f64> {
    Ok(-probs[class(label)?].max(PROB_EPS).ln())
}

pub fn sg_loss(probs: &[f64], label: Label) -> Result<f64> {
    ntp_loss(probs, label)
}

/// Mean squared error per (reconstruction, target) pair, averaged over
/// the one or two pairs.
pub fn mbm_loss(recons: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
    if recons.is_empty() || recons.len() != targets.len() {
        return Err(Error::Shape(
            "reconstruction loss needs matching, non-empty pair lists".into(),
        ));
    }
    let mut total = 0.0;
    for (r, t) in recons.iter().zip(targets) {
        if r.len() != t.len() {
            return Err(Error::Shape("reconstruction and target widths differ".into()));
        }
        total += r.iter().zip(*t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64;
    }
    Ok(total / recons.len() as f64)
}

pub fn multitask_loss(e_ntp: f64, e_mbm: f64, alpha1: f64, alpha2: f64) -> Result<f64> {
    if (alpha1 + alpha2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "loss weights must sum to 1, got {alpha1} + {alpha2}"
        )));
    }
    Ok(alpha1 * e_ntp + alpha2 * e_mbm)
}

/// A batch ready for the encoder.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `batch·positions × d`, masked (if at all) and position-encoded.
    pub x: Tensor<T>,
    pub size: usize,
    /// Class index per sample for the active classification head.
    pub labels: Vec<usize>,
    /// Encoder rows fed to the reconstruction block, with their targets
    /// and the weight that turns the sum into a per-sample mean.
    pub mbm_rows: Vec<usize>,
    pub mbm_targets: Option<Tensor<T>>,
    pub mbm_weights: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub enum Head {
    Ntp,
    Sg,
}

/// Loss terms recorded on a tape. Every value is a batch mean of
/// per-sample losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub class_loss: Option<Var>,
    pub mbm: Option<Var>,
    pub probs: Option<Var>,
}

/// Weights of the classification and reconstruction terms. A zero weight
/// leaves its head off the tape entirely.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub head: Head,
    pub class_weight: f64,
    pub mbm_weight: f64,
}

pub fn batch_loss<T: Real>(
    params: &ModelParams<T>,
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    objective: Objective,
    rng: Option<&mut Rng>,
) -> Result<LossVars> {
    let hidden = params.encode(tape, batch.x.clone(), batch.size, rng)?;
    let inv_b = T::from_f64_lossy(1.0 / batch.size as f64);
    let mut terms = Vec::new();
    let (mut class_loss, mut probs, mut mbm) = (None, None, None);
    if objective.class_weight > 0.0 {
        let cls = params.cls_rows(tape, hidden, batch.size)?;
        let p = match objective.head {
            Head::Ntp => params.ntp_probs(tape, cls)?,
            Head::Sg => params.sg_probs(tape, cls)?,
        };
        let l = tape.nll(
            p,
            &batch.labels,
            &vec![inv_b; batch.size],
            T::from_f64_lossy(PROB_EPS),
        )?;
        terms.push((l, T::from_f64_lossy(objective.class_weight)));
        class_loss = Some(l);
        probs = Some(p);
    }
    if objective.mbm_weight > 0.0 {
        let targets = batch
            .mbm_targets
            .clone()
            .ok_or_else(|| Error::State("reconstruction loss requested on an unmasked batch".into()))?;
        let rows = tape.gather_rows(hidden, &batch.mbm_rows)?;
        let recon = params.reconstruct(tape, rows)?;
        let l = tape.mse(recon, targets, &batch.mbm_weights)?;
        terms.push((l, T::from_f64_lossy(objective.mbm_weight)));
        mbm = Some(l);
    }
    if terms.is_empty() {
        return Err(Error::Config("objective has no active loss term".into()));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossVars {
        total,
        class_loss,
        mbm,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((ntp_loss(&[0.5, 0.5], Label::Yes).unwrap() - ln2).abs() < 1e-12);
        assert!((ntp_loss(&[0.5, 0.5], Label::No).unwrap() - ln2).abs() < 1e-12);
        assert!(ntp_loss(&[0.0, 1.0], Label::Yes).unwrap().abs() < 1e-12);
        assert!((ntp_loss(&[1.0, 0.0], Label::Yes).unwrap() - 12.0 * 10f64.ln()).abs() < 1e-9);
        assert!((ntp_loss(&[0.2, 0.8], Label::No).unwrap() - 1.6094379124341003).abs() < 1e-12);
        assert!((sg_loss(&[0.3, 0.7], Label::Yes).unwrap() + 0.7f64.ln()).abs() < 1e-12);
        assert!(ntp_loss(&[0.5, 0.5], Label::Undefined).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let t = vec![0.5; 420];
        assert_eq!(mbm_loss(&[&t], &[&t]).unwrap(), 0.0);
        let r: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((mbm_loss(&[&r], &[&t]).unwrap() - 1.0).abs() < 1e-12);
        // per-pair losses 0.2 and 0.4
        let a: Vec<f64> = vec![0.2f64.sqrt(); 4];
        let b: Vec<f64> = vec![0.4f64.sqrt(); 4];
        let z = vec![0.0; 4];
        assert!((mbm_loss(&[&a, &b], &[&z, &z]).unwrap() - 0.3).abs() < 1e-12);
        assert!(mbm_loss(&[], &[]).is_err());
    }

    #[test]
    fn multitask_examples() {
        assert!((multitask_loss(0.7, 0.4, 0.1, 0.9).unwrap() - 0.43).abs() < 1e-12);
        assert_eq!(multitask_loss(0.7, 0.4, 1.0, 0.0).unwrap(), 0.7);
        assert_eq!(multitask_loss(1.0, 3.0, 0.5, 0.5).unwrap(), 2.0);
        assert!(matches!(
            multitask_loss(1.0, 1.0, 0.5, 0.6),
            Err(Error::Config(_))
        ));
    }
}
