//! Central finite-difference checks of the tape's gradients, at 64-bit.
//!
//! Each check builds a scalar loss from a parameter store. Inputs that are
//! not model weights (layer inputs, attention projections) are registered
//! as parameters so the same machinery covers them. Element-wise outputs
//! are reduced against a fixed random projection so no gradient is
//! uniform.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AttentionDims, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::trainer::{batch_loss, Batch, Head, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates per tensor; smaller tensors are checked exhaustively.
    pub samples: usize,
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to rounding compare by absolute difference.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-5,
            samples: 100,
            floor: 1e-3,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.tolerance >= 0.0 && self.floor > 0.0) || self.samples == 0 {
            return Err(Error::Config(
                "grad-check step, floor and samples must be positive and tolerance non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome for one tensor of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub check: String,
    pub tensor: String,
    pub coordinates: usize,
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type LossFn<'a> = dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var> + 'a;

fn evaluate(store: &ParamStore<f64>, f: &LossFn) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let v = f(store, &mut tape)?;
    Ok((tape.value(v).item(), tape.relu_pattern()))
}

/// Compare backward against central differences on every tensor of
/// `store`. Coordinates are visited in a seeded random order until
/// `samples` are checked. A coordinate whose ±step evaluations flip any
/// ReLU is skipped: the difference quotient then straddles a kink and
/// measures neither one-sided slope.
pub fn check_store(
    name: &str,
    store: &mut ParamStore<f64>,
    f: &LossFn,
    cfg: &GradCheckConfig,
) -> Result<Vec<TensorReport>> {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let base_pattern = tape.relu_pattern();
    let mut pick = rng::stream(cfg.seed, &[tag_of(name)]);
    let ids: Vec<_> = store.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut pick);
        let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
        for i in order {
            if checked == cfg.samples {
                break;
            }
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.step;
            let (up, p_up) = evaluate(store, f)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.step;
            let (down, p_down) = evaluate(store, f)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if p_up != base_pattern || p_down != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = store.grad(id).data()[i];
            worst = worst.max(relative_error(analytic, numeric, cfg.floor));
            checked += 1;
        }
        reports.push(TensorReport {
            check: name.to_string(),
            tensor: store.get(id).name.clone(),
            coordinates: checked,
            kinks_skipped: skipped,
            max_rel_error: worst,
            passed: checked > 0 && worst < cfg.tolerance,
        });
    }
    Ok(reports)
}

fn tag_of(name: &str) -> u64 {
    name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64))
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, so a ReLU never sees a kink within one
/// finite-difference step.
fn away_from_zero(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ R` with a fixed random `R`.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn param(tape: &mut Tape<f64>, store: &ParamStore<f64>, name: &str) -> Var {
    tape.param(store, store.find(name).expect("registered above"))
}

fn layer_checks(cfg: &GradCheckConfig) -> Result<Vec<TensorReport>> {
    let mut r = rng::stream(cfg.seed, &[1]);
    let mut out = Vec::new();

    // linear: [6,5]·[5,4] + [4]
    let mut s = ParamStore::new();
    s.add("x", uniform(&mut r, &[6, 5], -1.0, 1.0));
    s.add("w", uniform(&mut r, &[5, 4], -1.0, 1.0));
    s.add("b", uniform(&mut r, &[4], -1.0, 1.0));
    let proj = uniform(&mut r, &[6, 4], -1.0, 1.0);
    out.extend(check_store(
        "linear",
        &mut s,
        &|st, t| {
            let (x, w, b) = (param(t, st, "x"), param(t, st, "w"), param(t, st, "b"));
            let y = t.linear(x, w, b)?;
            project(t, y, &proj)
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    s.add("x", away_from_zero(&mut r, &[8, 16]));
    let proj = uniform(&mut r, &[8, 16], -1.0, 1.0);
    out.extend(check_store(
        "relu",
        &mut s,
        &|st, t| {
            let x = param(t, st, "x");
            let y = t.relu(x);
            project(t, y, &proj)
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    // Normalization is scale-invariant, so the quotient's relative
    // truncation error falls as (step / row sd)²; a ramp keeps every row's
    // sd near 4.
    let noise = uniform(&mut r, &[5, 12], -3.0, 3.0);
    s.add("x", Tensor::from_fn(&[5, 12], |i| noise.data()[i] + (i % 12) as f64));
    s.add("gamma", uniform(&mut r, &[12], 0.5, 1.5));
    s.add("beta", uniform(&mut r, &[12], -0.5, 0.5));
    let proj = uniform(&mut r, &[5, 12], -1.0, 1.0);
    out.extend(check_store(
        "layer_norm",
        &mut s,
        &|st, t| {
            let (x, g, b) = (param(t, st, "x"), param(t, st, "gamma"), param(t, st, "beta"));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            project(t, y, &proj)
        },
        cfg,
    )?);

    // scaled dot-product attention, 2 sequences × 2 heads, with a fixed
    // dropout mask on the attention weights
    let dims = AttentionDims::new(2, 4, 6, 2)?;
    let mut s = ParamStore::new();
    for n in ["q", "k", "v"] {
        s.add(n, uniform(&mut r, &[8, 6], -1.0, 1.0));
    }
    let proj = uniform(&mut r, &[8, 6], -1.0, 1.0);
    let keep: Vec<f64> = (0..2 * 2 * 4 * 4)
        .map(|_| if r.gen_bool(0.8) { 1.25 } else { 0.0 })
        .collect();
    for (name, mask) in [("attention", None), ("attention_dropout", Some(keep))] {
        out.extend(check_store(
            name,
            &mut s,
            &|st, t| {
                let (q, k, v) = (param(t, st, "q"), param(t, st, "k"), param(t, st, "v"));
                let y = t.attention(q, k, v, dims, mask.clone())?;
                project(t, y, &proj)
            },
            cfg,
        )?);
    }

    // multi-head self-attention with its four projections
    let mut s = ParamStore::new();
    s.add("x", uniform(&mut r, &[8, 6], -1.0, 1.0));
    for n in ["wq", "wk", "wv", "wo"] {
        s.add(n, uniform(&mut r, &[6, 6], -0.3, 0.3));
    }
    for n in ["bq", "bk", "bv", "bo"] {
        s.add(n, uniform(&mut r, &[6], -0.2, 0.2));
    }
    let proj = uniform(&mut r, &[8, 6], -1.0, 1.0);
    out.extend(check_store(
        "multi_head_attention",
        &mut s,
        &|st, t| {
            let x = param(t, st, "x");
            let lin = |t: &mut Tape<f64>, input: Var, w: &str, b: &str| {
                let (w, b) = (param(t, st, w), param(t, st, b));
                t.linear(input, w, b)
            };
            let q = lin(t, x, "wq", "bq")?;
            let k = lin(t, x, "wk", "bk")?;
            let v = lin(t, x, "wv", "bv")?;
            let a = t.attention(q, k, v, dims, None)?;
            let y = lin(t, a, "wo", "bo")?;
            project(t, y, &proj)
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    s.add("logits", uniform(&mut r, &[6, 2], -2.0, 2.0));
    let labels = vec![0, 1, 1, 0, 1, 0];
    out.extend(check_store(
        "softmax_nll",
        &mut s,
        &|st, t| {
            let z = param(t, st, "logits");
            let p = t.softmax_rows(z)?;
            t.nll(p, &labels, &[1.0 / 6.0; 6], 1e-12)
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    s.add("pred", uniform(&mut r, &[3, 7], -1.0, 1.0));
    let target = uniform(&mut r, &[3, 7], -1.0, 1.0);
    out.extend(check_store(
        "mse",
        &mut s,
        &|st, t| {
            let p = param(t, st, "pred");
            t.mse(p, target.clone(), &[0.5, 0.25, 0.25])
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    s.add("x", uniform(&mut r, &[4, 9], -1.0, 1.0));
    let keep = Tensor::from_fn(&[4, 9], |_| if r.gen_bool(0.9) { 1.0 / 0.9 } else { 0.0 });
    let proj = uniform(&mut r, &[4, 9], -1.0, 1.0);
    out.extend(check_store(
        "dropout",
        &mut s,
        &|st, t| {
            let x = param(t, st, "x");
            let y = t.dropout_with(x, keep.clone())?;
            project(t, y, &proj)
        },
        cfg,
    )?);

    let mut s = ParamStore::new();
    s.add("x", uniform(&mut r, &[6, 4], -1.0, 1.0));
    let proj = uniform(&mut r, &[4, 4], -1.0, 1.0);
    out.extend(check_store(
        "gather_rows",
        &mut s,
        &|st, t| {
            let x = param(t, st, "x");
            let y = t.gather_rows(x, &[5, 0, 0, 3])?;
            project(t, y, &proj)
        },
        cfg,
    )?);
    Ok(out)
}

/// The one-layer model the composed checks run on.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        seq_len: 2,
        n_layers: 1,
        n_heads: 2,
        forward_expansion: 2,
        dropout_p: 0.0,
        mbm_hidden: 20,
        ln_eps: 1e-5,
    }
}

fn model_checks(cfg: &GradCheckConfig) -> Result<Vec<TensorReport>> {
    let mc = check_model_config();
    let mut params = ModelParams::<f64>::init(&mc, cfg.seed)?;
    let mut r = rng::stream(cfg.seed, &[2]);
    let (b, p, d) = (3, mc.positions(), mc.d_model);
    let batch = Batch {
        x: uniform(&mut r, &[b * p, d], -1.0, 1.0),
        size: b,
        labels: vec![1, 0, 1],
        mbm_rows: vec![1, p + 2, p + 4, 2 * p + 1],
        mbm_targets: Some(uniform(&mut r, &[4, d], -1.0, 1.0)),
        mbm_weights: vec![1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0],
    };
    let mut out = Vec::new();
    for (name, objective) in [
        (
            "model_multitask",
            Objective {
                head: Head::Ntp,
                class_weight: 0.3,
                mbm_weight: 0.7,
            },
        ),
        (
            "model_sg",
            Objective {
                head: Head::Sg,
                class_weight: 1.0,
                mbm_weight: 0.0,
            },
        ),
    ] {
        let config = params.config.clone();
        let (layers, heads) = (params.layers.clone(), params.heads.clone());
        out.extend(check_store(
            name,
            &mut params.store,
            &|st, t| {
                let view = ModelParams {
                    config: config.clone(),
                    store: st.clone(),
                    layers: layers.clone(),
                    heads: heads.clone(),
                };
                Ok(batch_loss(&view, t, &batch, objective, None)?.total)
            },
            cfg,
        )?);
    }
    Ok(out)
}

/// Every layer type, then the composed one-layer model under both the
/// multitask and the same-genre objective.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<TensorReport>> {
    cfg.validate()?;
    let mut out = layer_checks(cfg)?;
    out.extend(model_checks(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-4) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_oracle() {
        // loss = Σ w² / 2, gradient w
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let reports = check_store(
            "quadratic",
            &mut s,
            &|st, t| {
                let w = param(t, st, "w");
                let sq = t.mul(w, w)?;
                let h = t.scale(sq, 0.5);
                Ok(t.sum(h))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(s.grad(s.find("w").unwrap()).data(), &[1.0, -2.0]);
        assert!(reports[0].passed && reports[0].coordinates == 2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // loss = Σ w · c with c = w read off as a constant: the true slope
        // is 2w but backward only sees w
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let reports = check_store(
            "hidden",
            &mut s,
            &|st, t| {
                let w = param(t, st, "w");
                let c = t.constant(t.value(w).clone());
                let p = t.mul(w, c)?;
                Ok(t.sum(p))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!reports[0].passed);
        assert!((reports[0].max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kink_straddling_coordinates_are_skipped() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![3], vec![0.0, 0.5, -0.5]).unwrap());
        let reports = check_store(
            "kink",
            &mut s,
            &|st, t| {
                let x = param(t, st, "x");
                let y = t.relu(x);
                Ok(t.sum(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!((reports[0].coordinates, reports[0].kinks_skipped), (2, 1));
        assert!(reports[0].passed);
    }

    #[test]
    fn zero_tolerance_fails() {
        let cfg = GradCheckConfig {
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(run_all(&cfg).unwrap().iter().any(|r| !r.passed));
    }

    #[test]
    fn all_checks_pass() {
        let cfg = GradCheckConfig::default();
        let reports = run_all(&cfg).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert!((1..=cfg.samples).contains(&r.coordinates));
        }
        let checks: std::collections::BTreeSet<&str> =
            reports.iter().map(|r| r.check.as_str()).collect();
        assert_eq!(checks.len(), 12);
    }
}
