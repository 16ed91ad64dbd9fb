use rand::Rng as _;

use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Real, Tensor};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    /// Next-sequence block: `d → d/2 → 2`.
    pub b1_w1: ParamId,
    pub b1_b1: ParamId,
    pub b1_w2: ParamId,
    pub b1_b2: ParamId,
    /// Reconstruction block: `d → mbm_hidden → d`.
    pub b2_w1: ParamId,
    pub b2_b1: ParamId,
    pub b2_w2: ParamId,
    pub b2_b2: ParamId,
    /// Same-genre block: `d → 2`.
    pub b3_w: ParamId,
    pub b3_b: ParamId,
}

/// Every learnable tensor of the model, weights stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layers: Vec<LayerIds>,
    pub heads: HeadIds,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
}

impl<T: Real> Builder<'_, T> {
    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::full(&[n], T::one()))
    }
}

impl<T: Real> ModelParams<T> {
    /// Allocate all tensors (zeros, unit layer-norm gains) in a fixed order.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ff_hidden();
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                wq: b.zeros(p("attn.wq"), &[d, d]),
                bq: b.zeros(p("attn.bq"), &[d]),
                wk: b.zeros(p("attn.wk"), &[d, d]),
                bk: b.zeros(p("attn.bk"), &[d]),
                wv: b.zeros(p("attn.wv"), &[d, d]),
                bv: b.zeros(p("attn.bv"), &[d]),
                wo: b.zeros(p("attn.wo"), &[d, d]),
                bo: b.zeros(p("attn.bo"), &[d]),
                ln1_gamma: b.ones(p("ln1.gamma"), d),
                ln1_beta: b.zeros(p("ln1.beta"), &[d]),
                ff_w1: b.zeros(p("ff.w1"), &[d, f]),
                ff_b1: b.zeros(p("ff.b1"), &[f]),
                ff_w2: b.zeros(p("ff.w2"), &[f, d]),
                ff_b2: b.zeros(p("ff.b2"), &[d]),
                ln2_gamma: b.ones(p("ln2.gamma"), d),
                ln2_beta: b.zeros(p("ln2.beta"), &[d]),
            });
        }
        let h1 = config.ntp_hidden();
        let h2 = config.mbm_hidden;
        let heads = HeadIds {
            b1_w1: b.zeros("block1.w1".into(), &[d, h1]),
            b1_b1: b.zeros("block1.b1".into(), &[h1]),
            b1_w2: b.zeros("block1.w2".into(), &[h1, 2]),
            b1_b2: b.zeros("block1.b2".into(), &[2]),
            b2_w1: b.zeros("block2.w1".into(), &[d, h2]),
            b2_b1: b.zeros("block2.b1".into(), &[h2]),
            b2_w2: b.zeros("block2.w2".into(), &[h2, d]),
            b2_b2: b.zeros("block2.b2".into(), &[d]),
            b3_w: b.zeros("block3.w".into(), &[d, 2]),
            b3_b: b.zeros("block3.b".into(), &[2]),
        };
        Ok(Self {
            config: config.clone(),
            store,
            layers,
            heads,
        })
    }

    /// Linear weights and biases ~ U(±1/√fan_in); layer norms at γ=1, β=0.
    /// The same-genre block draws from its own stream so it can be redrawn
    /// alone (see [`Self::reinit_sg_head`]).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeroed(config)?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let d = config.d_model;
        let f = config.ff_hidden();
        let layers = p.layers.clone();
        for ids in &layers {
            for (w, b, fan_in) in [
                (ids.wq, ids.bq, d),
                (ids.wk, ids.bk, d),
                (ids.wv, ids.bv, d),
                (ids.wo, ids.bo, d),
                (ids.ff_w1, ids.ff_b1, d),
                (ids.ff_w2, ids.ff_b2, f),
            ] {
                p.fill_uniform(w, fan_in, &mut rng);
                p.fill_uniform(b, fan_in, &mut rng);
            }
        }
        let h = p.heads;
        for (w, b, fan_in) in [
            (h.b1_w1, h.b1_b1, d),
            (h.b1_w2, h.b1_b2, config.ntp_hidden()),
            (h.b2_w1, h.b2_b1, d),
            (h.b2_w2, h.b2_b2, config.mbm_hidden),
        ] {
            p.fill_uniform(w, fan_in, &mut rng);
            p.fill_uniform(b, fan_in, &mut rng);
        }
        p.reinit_sg_head(seed);
        Ok(p)
    }

    fn fill_uniform(&mut self, id: ParamId, fan_in: usize, rng: &mut rng::Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = &mut self.store.get_mut(id).value;
        for v in t.data_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    }

    /// Fresh same-genre block; also clears its optimizer state.
    pub fn reinit_sg_head(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, &[tag::SG_HEAD]);
        let d = self.config.d_model;
        let (w, b) = (self.heads.b3_w, self.heads.b3_b);
        self.fill_uniform(w, d, &mut rng);
        self.fill_uniform(b, d, &mut rng);
        for id in [w, b] {
            let v = self.store.value(id).clone();
            self.store.get_mut(id).reset(v);
        }
    }

    /// Encoder tensors, i.e. everything outside the output blocks.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.get(id).name.starts_with("layer"))
            .collect()
    }

    pub fn block_ids(&self, block: usize) -> Vec<ParamId> {
        let prefix = format!("block{block}.");
        self.store
            .ids()
            .filter(|&id| self.store.get(id).name.starts_with(&prefix))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
            heads: self.heads,
        }
    }
}
