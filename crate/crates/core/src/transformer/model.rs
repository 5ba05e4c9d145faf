use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{multi_head_graph, MhaVars};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{init, Bound, Checkpoint, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::seed;

/// One sequence of `l` latents with its position indices.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a, T = f32> {
    /// `l × d` row-major latents.
    pub latents: &'a [T],
    /// Slot index of every frame token; `None` means `1..=l`.
    pub slots: Option<&'a [usize]>,
    pub seq_index: usize,
    pub seg_index: usize,
}

impl<'a, T> SequenceInput<'a, T> {
    pub fn new(latents: &'a [T], seq_index: usize, seg_index: usize) -> Self {
        Self { latents, slots: None, seq_index, seg_index }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    cls: ParamId,
    pos_p: ParamId,
    pos_m: ParamId,
    pos_s: ParamId,
    layers: Vec<LayerIds>,
    head: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Transformer<T: Scalar = f32> {
    config: TransformerConfig,
    params: ParamSet<T>,
    ids: Ids,
}

/// Inference-mode internals of one batch.
#[derive(Clone, Debug)]
pub struct TransformerTrace<T> {
    /// `[B, 2]` class probabilities (NC, MCI).
    pub probs: Tensor<T>,
    /// Per layer, `[B·heads, l+1, l+1]` attention weights.
    pub attention: Vec<Tensor<T>>,
    /// `[B, d]` final hidden state of the class slot.
    pub class_token: Tensor<T>,
}

pub(crate) struct Forward {
    pub probs: Var,
    pub attention: Vec<Var>,
    pub class_token: Var,
}

fn linear<T: Scalar>(params: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = params.add(format!("{name}.w"), init::linear_weight(rng, fan_in, fan_out));
    let b = params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    (w, b)
}

fn norm<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize) -> (ParamId, ParamId) {
    (params.add(format!("{name}.g"), Tensor::ones(vec![d])), params.add(format!("{name}.b"), Tensor::zeros(vec![d])))
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = seed::rng(seed, "transformer.init");
        let mut params = ParamSet::new();
        let cls = params.add("cls", init::embedding(&mut rng, 1, d));
        let pos_p = params.add("pos.slot", init::embedding(&mut rng, config.max_positions, d));
        let pos_m = params.add("pos.sequence", init::embedding(&mut rng, config.max_sequences, d));
        let pos_s = params.add("pos.segment", init::embedding(&mut rng, config.max_segments, d));
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let n = |s: &str| format!("layer{i}.{s}");
            let (wq, bq) = linear(&mut params, &mut rng, &n("q"), d, d);
            let (wk, bk) = linear(&mut params, &mut rng, &n("k"), d, d);
            let (wv, bv) = linear(&mut params, &mut rng, &n("v"), d, d);
            let (wo, bo) = linear(&mut params, &mut rng, &n("o"), d, d);
            let ln1 = norm(&mut params, &n("ln1"), d);
            let ff1 = linear(&mut params, &mut rng, &n("ff1"), d, d * config.ff_mult);
            let ff2 = linear(&mut params, &mut rng, &n("ff2"), d * config.ff_mult, d);
            let ln2 = norm(&mut params, &n("ln2"), d);
            layers.push(LayerIds { wq, bq, wk, bk, wv, bv, wo, bo, ln1, ff1, ff2, ln2 });
        }
        let mut head = Vec::new();
        let mut fan_in = d;
        for (i, &w) in config.mlp_head_dims.iter().enumerate() {
            head.push(linear(&mut params, &mut rng, &format!("head{i}"), fan_in, w));
            fan_in = w;
        }
        Ok(Self { config, params, ids: Ids { cls, pos_p, pos_m, pos_s, layers, head } })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn class_token_id(&self) -> ParamId {
        self.ids.cls
    }

    pub fn slot_table_id(&self) -> ParamId {
        self.ids.pos_p
    }

    pub fn sequence_table_id(&self) -> ParamId {
        self.ids.pos_m
    }

    pub fn segment_table_id(&self) -> ParamId {
        self.ids.pos_s
    }

    fn tokens_of(&self, batch: &[SequenceInput<T>]) -> Result<usize> {
        let d = self.config.hidden_dim;
        let first = batch.first().ok_or_else(|| Error::Data("empty sequence batch".into()))?;
        if first.latents.is_empty() || first.latents.len() % d != 0 {
            return Err(Error::Shape(format!("sequence of {} values is not a multiple of {d}", first.latents.len())));
        }
        let l = first.latents.len() / d;
        for s in batch {
            if s.latents.len() != l * d {
                return Err(Error::Shape("sequences in a batch must share one length".into()));
            }
            if s.slots.is_some_and(|p| p.len() != l) {
                return Err(Error::Shape(format!("slot list must have {l} entries")));
            }
        }
        Ok(l)
    }

    /// Clipped `(p, M, S)` row indices for every token of the batch.
    fn indices(&self, batch: &[SequenceInput<T>], l: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let c = &self.config;
        let clip = |i: usize, cap: usize| i.min(cap - 1);
        let tokens = batch.len() * (l + 1);
        let (mut p, mut m, mut s) = (Vec::with_capacity(tokens), Vec::with_capacity(tokens), Vec::with_capacity(tokens));
        for seq in batch {
            for t in 0..=l {
                let slot = match (t, seq.slots) {
                    (0, _) => 0,
                    (_, Some(slots)) => slots[t - 1],
                    (_, None) => t,
                };
                p.push(clip(slot, c.max_positions));
                m.push(clip(seq.seq_index, c.max_sequences));
                s.push(clip(seq.seg_index, c.max_segments));
            }
        }
        (p, m, s)
    }

    /// `Z = z + P` for the whole batch, `[B·(l+1), d]`.
    fn embed(&self, g: &mut Graph<T>, bound: &Bound, batch: &[SequenceInput<T>]) -> Result<Var> {
        let d = self.config.hidden_dim;
        let l = self.tokens_of(batch)?;
        let rows = batch.len() * (l + 1);
        let mut raw = vec![T::zero(); rows * d];
        let mut is_cls = vec![T::zero(); rows];
        for (b, seq) in batch.iter().enumerate() {
            let base = b * (l + 1);
            is_cls[base] = T::one();
            raw[(base + 1) * d..(base + 1 + l) * d].copy_from_slice(seq.latents);
        }
        let (p, m, s) = self.indices(batch, l);
        let x = g.constant(Tensor::new(vec![rows, d], raw)?);
        let onehot = g.constant(Tensor::new(vec![rows, 1], is_cls)?);
        let cls = g.matmul(onehot, bound.var(self.ids.cls))?;
        let mut z = g.add(x, cls)?;
        let pp = g.embedding(bound.var(self.ids.pos_p), p)?;
        z = g.add(z, pp)?;
        if self.config.positions.uses_sequence() {
            let pm = g.embedding(bound.var(self.ids.pos_m), m)?;
            z = g.add(z, pm)?;
        }
        if self.config.positions.uses_segment() {
            let ps = g.embedding(bound.var(self.ids.pos_s), s)?;
            z = g.add(z, ps)?;
        }
        Ok(z)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut seed::Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn linear(g: &mut Graph<T>, bound: &Bound, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let y = g.matmul(x, bound.var(w))?;
        g.add_bias(y, bound.var(b))
    }

    /// Full forward pass. Dropout is active exactly when `rng` is given.
    pub(crate) fn forward(&self, g: &mut Graph<T>, bound: &Bound, batch: &[SequenceInput<T>], mut rng: Option<&mut seed::Rng>) -> Result<Forward> {
        let c = &self.config;
        let n = batch.len();
        let l = self.tokens_of(batch)?;
        let z = self.embed(g, bound, batch)?;
        let mut x = self.dropout(g, z, &mut rng)?;
        let mut attention = Vec::with_capacity(c.num_layers);
        for ids in &self.ids.layers {
            let mha = MhaVars {
                wq: bound.var(ids.wq),
                bq: bound.var(ids.bq),
                wk: bound.var(ids.wk),
                bk: bound.var(ids.bk),
                wv: bound.var(ids.wv),
                bv: bound.var(ids.bv),
                wo: bound.var(ids.wo),
                bo: bound.var(ids.bo),
            };
            let (a, w) = multi_head_graph(g, x, x, x, &mha, n, c.num_heads)?;
            attention.push(w);
            let a = self.dropout(g, a, &mut rng)?;
            let h = g.add(x, a)?;
            let h = g.layer_norm(h, bound.var(ids.ln1.0), bound.var(ids.ln1.1), c.ln_eps)?;
            let f = Self::linear(g, bound, h, ids.ff1)?;
            let f = g.gelu(f);
            let f = Self::linear(g, bound, f, ids.ff2)?;
            let f = self.dropout(g, f, &mut rng)?;
            let y = g.add(h, f)?;
            x = g.layer_norm(y, bound.var(ids.ln2.0), bound.var(ids.ln2.1), c.ln_eps)?;
        }
        let x = g.reshape(x, &[n, l + 1, c.hidden_dim])?;
        let x = g.narrow(x, 1, 0, 1)?;
        let class_token = g.reshape(x, &[n, c.hidden_dim])?;
        let mut h = class_token;
        for (i, &ids) in self.ids.head.iter().enumerate() {
            h = Self::linear(g, bound, h, ids)?;
            if i + 1 < self.ids.head.len() {
                h = g.relu(h);
            }
        }
        let probs = g.softmax(h)?;
        Ok(Forward { probs, attention, class_token })
    }

    /// Embedded inputs of one sequence, `[(l+1), d]`.
    pub fn embed_inputs(&self, seq: &SequenceInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let z = self.embed(&mut g, &bound, std::slice::from_ref(seq))?;
        Ok(g.value(z).clone())
    }

    /// Inference-mode probabilities and attention maps.
    pub fn trace(&self, batch: &[SequenceInput<T>]) -> Result<TransformerTrace<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let f = self.forward(&mut g, &bound, batch, None)?;
        Ok(TransformerTrace {
            probs: g.value(f.probs).clone(),
            attention: f.attention.iter().map(|&w| g.value(w).clone()).collect(),
            class_token: g.value(f.class_token).clone(),
        })
    }

    /// Dropout-free weighted BCE of `batch` against `labels`, recorded on `g`
    /// with the parameters bound in `bound`.
    pub fn loss_on_graph(&self, g: &mut Graph<T>, bound: &Bound, batch: &[SequenceInput<T>], labels: Vec<T>, beta: T) -> Result<Var> {
        let f = self.forward(g, bound, batch, None)?;
        let p = g.narrow(f.probs, 1, 1, 1)?;
        let p = g.reshape(p, &[batch.len()])?;
        g.weighted_bce(p, labels, beta)
    }

    /// Inference-mode `[B, 2]` probabilities.
    pub fn forward_eval(&self, batch: &[SequenceInput<T>]) -> Result<Tensor<T>> {
        Ok(self.trace(batch)?.probs)
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::to_string(&Header { kind: KIND.into(), config: self.config.clone() })?;
        Ok(Checkpoint::new(header, self.params.cast::<f32>().named()))
    }
}

const KIND: &str = "transformer";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: TransformerConfig,
}

impl Transformer<f32> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: Header = ck.config_json()?;
        if header.kind != KIND {
            return Err(Error::Format(format!("checkpoint holds a {:?} model, not a transformer", header.kind)));
        }
        let mut model = Transformer::new(header.config, 0)?;
        model.params.load_named(&ck.tensors)?;
        Ok(model)
    }
}
