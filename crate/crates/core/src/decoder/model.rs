use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{TokenKind, TokenSequence};
use super::vocab::{Vocab, EOS};
use crate::adapter::{AdapterConfig, SelfAttentionAdapter, SlotAdapter, SlotAttentionOutput};
use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Slot,
    SelfAttention,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    /// Width of the incoming visual features.
    pub feature_dim: usize,
    pub max_positions: usize,
    /// 1-based layer numbers carrying an adapter; must be a prefix `1..=k`.
    pub adapter_layers: Vec<usize>,
    /// 1-based layer numbers whose projections get LoRA deltas.
    pub lora_layers: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_decode_len: usize,
    pub frames_per_video: usize,
    pub n_query_words: usize,
    pub adapter_kind: AdapterKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            model_dim: 128,
            n_heads: 4,
            mlp_dim: 512,
            feature_dim: 16,
            max_positions: 1600,
            adapter_layers: vec![1, 2],
            lora_layers: vec![3, 4, 5, 6],
            lora_rank: 16,
            lora_alpha: 64.0,
            max_decode_len: 16,
            frames_per_video: 20,
            n_query_words: 8,
            adapter_kind: AdapterKind::Slot,
        }
    }
}

impl DecoderConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_query_words)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("n_layers", self.n_layers),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("mlp_dim", self.mlp_dim),
            ("feature_dim", self.feature_dim),
            ("max_positions", self.max_positions),
            ("max_decode_len", self.max_decode_len),
            ("frames_per_video", self.frames_per_video),
            ("n_query_words", self.n_query_words),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide model_dim {}", self.n_heads, self.model_dim),
            ));
        }
        for (key, layers) in [("adapter_layers", &self.adapter_layers), ("lora_layers", &self.lora_layers)] {
            if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.n_layers) {
                return Err(Error::config(key, format!("layer {bad} outside 1..={}", self.n_layers)));
            }
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::config(key, "duplicate layer"));
            }
        }
        if let Some(l) = self.adapter_layers.iter().find(|l| self.lora_layers.contains(l)) {
            return Err(Error::config("lora_layers", format!("layer {l} also carries an adapter")));
        }
        let mut a = self.adapter_layers.clone();
        a.sort_unstable();
        if a.iter().enumerate().any(|(i, &l)| l != i + 1) {
            return Err(Error::config("adapter_layers", "must be an early prefix 1..=k"));
        }
        if !self.lora_layers.is_empty() {
            if self.lora_rank == 0 || self.lora_rank > self.model_dim.min(self.mlp_dim) {
                return Err(Error::config(
                    "lora_rank",
                    format!("must be in 1..={}", self.model_dim.min(self.mlp_dim)),
                ));
            }
            if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
                return Err(Error::config("lora_alpha", "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn is_adapter_layer(&self, layer: usize) -> bool {
        self.adapter_kind != AdapterKind::None && self.adapter_layers.contains(&layer)
    }

    pub fn is_lora_layer(&self, layer: usize) -> bool {
        self.lora_layers.contains(&layer)
    }

    /// Last adapter-bearing layer, or the last layer of the adapter prefix
    /// when adapters are disabled.
    pub fn probe_layer(&self) -> usize {
        self.adapter_layers.iter().copied().max().unwrap_or(1)
    }
}

/// `W + (alpha / r) B A` for a base `W` of shape `[m, n]`, `A: [r, n]`,
/// `B: [m, r]`.
pub fn lora_apply<'g>(base: Var<'g>, a: Var<'g>, b: Var<'g>, alpha: f64, rank: usize) -> Result<Var<'g>> {
    let (ws, as_, bs) = (base.shape(), a.shape(), b.shape());
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 {
        return Err(Error::Dimension("lora_apply expects matrices".into()));
    }
    if rank == 0 || rank > ws[0].min(ws[1]) {
        return Err(Error::config(
            "lora_rank",
            format!("rank {rank} invalid for a {}x{} weight", ws[0], ws[1]),
        ));
    }
    if as_ != [rank, ws[1]] || bs != [ws[0], rank] {
        return Err(Error::Dimension(format!(
            "lora factors {as_:?}, {bs:?} do not fit weight {ws:?} at rank {rank}"
        )));
    }
    base.add(b.matmul(a)?.scale(alpha / rank as f64)?)
}

pub fn ce_loss<'g>(logits: Var<'g>, labels: &[Option<usize>]) -> Result<Var<'g>> {
    logits.cross_entropy(labels)
}

/// Everything a forward pass exposes beyond the logits.
pub struct DecoderOutput<'g> {
    /// `[L, V]`
    pub logits: Var<'g>,
    /// Slot internals of every slot-adapter layer, in layer order.
    pub slot_outputs: Vec<SlotAttentionOutput<'g>>,
    /// `[T, N, D]` visual hidden states leaving the probe layer.
    pub probe_hidden: Option<Var<'g>>,
    /// Per-layer `[L, D]` attention keys and values.
    pub layer_kv: Vec<(Var<'g>, Var<'g>)>,
}

enum LayerAdapter {
    Slot(SlotAdapter),
    SelfAttention(SelfAttentionAdapter),
}

const PROJECTIONS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

/// Toy pre-norm causal transformer with learned positions. Base weights live
/// under `base.`, adapters under `adapter.l{k}.`, LoRA factors under
/// `lora.l{k}.`.
pub struct GroundingDecoder {
    pub cfg: DecoderConfig,
    pub adapter_cfg: AdapterConfig,
    adapters: Vec<(usize, LayerAdapter)>,
    vocab: Vocab,
}

impl GroundingDecoder {
    pub fn new(cfg: DecoderConfig, adapter_cfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let adapter_cfg = AdapterConfig {
            model_dim: cfg.model_dim,
            ..adapter_cfg
        };
        let mut adapters = Vec::new();
        if cfg.adapter_kind != AdapterKind::None {
            adapter_cfg.validate()?;
            for &l in &cfg.adapter_layers {
                let prefix = format!("adapter.l{l}.");
                let a = match cfg.adapter_kind {
                    AdapterKind::Slot => LayerAdapter::Slot(SlotAdapter::new(adapter_cfg.clone(), prefix)?),
                    _ => LayerAdapter::SelfAttention(SelfAttentionAdapter::new(adapter_cfg.clone(), prefix)?),
                };
                adapters.push((l, a));
            }
            adapters.sort_by_key(|(l, _)| *l);
        }
        let vocab = cfg.vocab();
        Ok(Self {
            cfg,
            adapter_cfg,
            adapters,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn proj_shape(&self, name: &str) -> [usize; 2] {
        let (d, h) = (self.cfg.model_dim, self.cfg.mlp_dim);
        match name {
            "w1" => [d, h],
            "w2" => [h, d],
            _ => [d, d],
        }
    }

    /// Frozen-base weights (all trainable until the caller freezes them).
    pub fn init_base(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let c = &self.cfg;
        let d = c.model_dim;
        let mut ps = ParamSet::new();
        ps.insert("base.tok", Tensor::randn(&[self.vocab.size(), d], 0.02, rng))?;
        ps.insert("base.pos", Tensor::randn(&[c.max_positions, d], 0.02, rng))?;
        ps.insert("base.vis.w", Tensor::xavier(c.feature_dim, d, rng))?;
        ps.insert("base.vis.b", Tensor::zeros(&[d]))?;
        for l in 1..=c.n_layers {
            for ln in ["ln1", "ln2"] {
                ps.insert(format!("base.l{l}.{ln}.g"), Tensor::full(&[d], 1.0))?;
                ps.insert(format!("base.l{l}.{ln}.b"), Tensor::zeros(&[d]))?;
            }
            for p in PROJECTIONS {
                let [m, n] = self.proj_shape(p);
                ps.insert(format!("base.l{l}.{p}"), Tensor::xavier(m, n, rng))?;
            }
            ps.insert(format!("base.l{l}.b1"), Tensor::zeros(&[c.mlp_dim]))?;
            ps.insert(format!("base.l{l}.b2"), Tensor::zeros(&[d]))?;
        }
        ps.insert("base.ln_f.g", Tensor::full(&[d], 1.0))?;
        ps.insert("base.ln_f.b", Tensor::zeros(&[d]))?;
        ps.insert("base.head", Tensor::xavier(d, self.vocab.size(), rng))?;
        Ok(ps)
    }

    /// Fresh adapter and LoRA parameters: `W_up = 0` and `B = 0`.
    pub fn init_tuning(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for (_, a) in &self.adapters {
            ps.extend(match a {
                LayerAdapter::Slot(s) => s.init_params(rng)?,
                LayerAdapter::SelfAttention(s) => s.init_params(rng)?,
            })?;
        }
        let r = self.cfg.lora_rank;
        for &l in &self.cfg.lora_layers {
            for p in PROJECTIONS {
                let [m, n] = self.proj_shape(p);
                let std = 1.0 / (r as f64).sqrt();
                ps.insert(format!("lora.l{l}.{p}.a"), Tensor::randn(&[r, n], std, rng))?;
                ps.insert(format!("lora.l{l}.{p}.b"), Tensor::zeros(&[m, r]))?;
            }
        }
        Ok(ps)
    }

    fn weight<'g>(&self, g: &'g Graph, ps: &ParamSet, layer: usize, name: &str, lora: bool) -> Result<Var<'g>> {
        let w = g.param(ps, &format!("base.l{layer}.{name}"))?;
        if !lora || !self.cfg.is_lora_layer(layer) {
            return Ok(w);
        }
        let a = g.param(ps, &format!("lora.l{layer}.{name}.a"))?;
        let b = g.param(ps, &format!("lora.l{layer}.{name}.b"))?;
        lora_apply(w, a, b, self.cfg.lora_alpha, self.cfg.lora_rank)
    }

    fn embed<'g>(&self, g: &'g Graph, ps: &ParamSet, frames: &Tensor, seq: &TokenSequence) -> Result<Var<'g>> {
        let len = seq.len();
        if len > self.cfg.max_positions {
            return Err(Error::config(
                "max_positions",
                format!("sequence of {len} tokens exceeds {}", self.cfg.max_positions),
            ));
        }
        let s = frames.shape();
        if s.len() != 3 || s[0] != seq.n_frames || s[1] != seq.tokens_per_frame || s[2] != self.cfg.feature_dim {
            return Err(Error::Dimension(format!(
                "frames {:?} do not match sequence layout {}x{}x{}",
                s, seq.n_frames, seq.tokens_per_frame, self.cfg.feature_dim
            )));
        }
        let tok = g.param(ps, "base.tok")?.gather_rows(&seq.ids)?;
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = g.param(ps, "base.pos")?.gather_rows(&pos_ids)?;
        let vis = g
            .constant(frames.clone().reshape(&[s[0] * s[1], s[2]])?)
            .matmul(g.param(ps, "base.vis.w")?)?
            .add(g.param(ps, "base.vis.b")?)?;
        tok.scatter_rows(vis, &seq.visual_positions())?.add(pos)
    }

    /// Returns the attention output and the layer's keys and values.
    fn attention<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        layer: usize,
        x: Var<'g>,
        lora: bool,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let h = self.cfg.n_heads;
        let scale = 1.0 / ((self.cfg.model_dim / h) as f64).sqrt();
        let q = x.matmul(self.weight(g, ps, layer, "wq", lora)?)?;
        let k = x.matmul(self.weight(g, ps, layer, "wk", lora)?)?;
        let v = x.matmul(self.weight(g, ps, layer, "wv", lora)?)?;
        let out = q
            .causal_attention(k, v, h, scale)?
            .matmul(self.weight(g, ps, layer, "wo", lora)?)?;
        Ok((out, k, v))
    }

    fn block<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        layer: usize,
        h: Var<'g>,
        lora: bool,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let p = |n: &str| g.param(ps, &format!("base.l{layer}.{n}"));
        let x = h.layer_norm(p("ln1.g")?, p("ln1.b")?, LN_EPS)?;
        let (a, k, v) = self.attention(g, ps, layer, x, lora)?;
        let h = h.add(a)?;
        let x = h.layer_norm(p("ln2.g")?, p("ln2.b")?, LN_EPS)?;
        let m = x
            .matmul(self.weight(g, ps, layer, "w1", lora)?)?
            .add(p("b1")?)?
            .gelu()?
            .matmul(self.weight(g, ps, layer, "w2", lora)?)?
            .add(p("b2")?)?;
        Ok((h.add(m)?, k, v))
    }

    /// Full forward pass over one sequence.
    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamSet, frames: &Tensor, seq: &TokenSequence) -> Result<DecoderOutput<'g>> {
        self.run(g, ps, frames, seq, true)
    }

    /// The frozen base alone: adapters and LoRA deltas skipped.
    pub fn forward_base<'g>(&self, g: &'g Graph, ps: &ParamSet, frames: &Tensor, seq: &TokenSequence) -> Result<DecoderOutput<'g>> {
        self.run(g, ps, frames, seq, false)
    }

    fn run<'g>(&self, g: &'g Graph, ps: &ParamSet, frames: &Tensor, seq: &TokenSequence, tuned: bool) -> Result<DecoderOutput<'g>> {
        let (t, n, d) = (seq.n_frames, seq.tokens_per_frame, self.cfg.model_dim);
        let vpos = seq.visual_positions();
        let mut h = self.embed(g, ps, frames, seq)?;
        let mut slot_outputs = Vec::new();
        let mut probe_hidden = None;
        let mut layer_kv = Vec::with_capacity(self.cfg.n_layers);
        for layer in 1..=self.cfg.n_layers {
            if tuned {
                if let Some((_, a)) = self.adapters.iter().find(|(l, _)| *l == layer) {
                    let vis = h.gather_rows(&vpos)?.reshape(&[t, n, d])?;
                    let out = match a {
                        LayerAdapter::Slot(s) => {
                            let (out, sa) = s.forward(g, ps, vis)?;
                            slot_outputs.push(sa);
                            out
                        }
                        LayerAdapter::SelfAttention(s) => s.forward(g, ps, vis)?,
                    };
                    h = h.scatter_rows(out.reshape(&[t * n, d])?, &vpos)?;
                }
            }
            let (next, k, v) = self.block(g, ps, layer, h, tuned)?;
            h = next;
            layer_kv.push((k, v));
            if layer == self.cfg.probe_layer() {
                probe_hidden = Some(h.gather_rows(&vpos)?.reshape(&[t, n, d])?);
            }
        }
        let h = h.layer_norm(g.param(ps, "base.ln_f.g")?, g.param(ps, "base.ln_f.b")?, LN_EPS)?;
        let logits = h.matmul(g.param(ps, "base.head")?)?;
        Ok(DecoderOutput {
            logits,
            slot_outputs,
            probe_hidden,
            layer_kv,
        })
    }

    /// Greedy decoding after the query by re-running the whole sequence for
    /// every generated token. Reference for [`GroundingDecoder::greedy_decode`].
    pub fn greedy_decode_uncached(&self, ps: &ParamSet, frames: &Tensor, prefix: &TokenSequence) -> Result<Vec<usize>> {
        let mut seq = prefix.clone();
        greedy_decode_with(
            |generated| {
                seq.ids.truncate(prefix.len());
                seq.kinds.truncate(prefix.len());
                seq.frame_index.truncate(prefix.len());
                for &id in generated {
                    seq.push_target(id);
                }
                let g = Graph::new();
                let out = self.forward(&g, ps, frames, &seq)?;
                Ok(last_row(&out.logits.value()))
            },
            self.cfg.max_decode_len,
        )
    }

    /// Greedy decoding after the query; returns the generated ids without
    /// the terminating EOS. The prefix runs once and later tokens reuse its
    /// keys and values (generated tokens are text, so no adapter applies).
    pub fn greedy_decode(&self, ps: &ParamSet, frames: &Tensor, prefix: &TokenSequence) -> Result<Vec<usize>> {
        if prefix.len() + self.cfg.max_decode_len > self.cfg.max_positions {
            return Err(Error::config(
                "max_positions",
                format!(
                    "prefix of {} plus {} decode steps exceeds {}",
                    prefix.len(),
                    self.cfg.max_decode_len,
                    self.cfg.max_positions
                ),
            ));
        }
        let g = Graph::new();
        let out = self.forward(&g, ps, frames, prefix)?;
        let mut cache = DecodeCache::new(self, ps, &out)?;
        let mut pending = Some(last_row(&out.logits.value()));
        drop(out);
        greedy_decode_with(
            |generated| {
                if let Some(first) = pending.take() {
                    return Ok(first);
                }
                let &id = generated.last().expect("non-empty after the first step");
                cache.step(id)
            },
            self.cfg.max_decode_len,
        )
    }
}

fn last_row(logits: &Tensor) -> Vec<f64> {
    let (rows, v) = (logits.shape()[0], logits.shape()[1]);
    logits.data()[(rows - 1) * v..].to_vec()
}

struct LayerWeights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
    b1: Vec<f64>,
    b2: Vec<f64>,
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Plain-f64 single-token forward against cached keys and values.
struct DecodeCache {
    layers: Vec<LayerWeights>,
    tok: Tensor,
    pos: Tensor,
    ln_f: (Vec<f64>, Vec<f64>),
    head: Tensor,
    next_pos: usize,
    n_heads: usize,
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let xi = x[i];
        for (o, &wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
            *o += xi * wv;
        }
    }
    out
}

fn layer_norm_row(x: &[f64], (g, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let dim = x.len() as f64;
    let mean = x.iter().sum::<f64>() / dim;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim;
    let is = 1.0 / (var + LN_EPS).sqrt();
    x.iter().enumerate().map(|(c, v)| (v - mean) * is * g[c] + b[c]).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl DecodeCache {
    fn new(dec: &GroundingDecoder, ps: &ParamSet, out: &DecoderOutput<'_>) -> Result<Self> {
        let g = Graph::new();
        let konst = |name: &str| -> Result<Tensor> { Ok(ps.get(name)?.clone()) };
        let vecp = |name: &str| -> Result<Vec<f64>> { Ok(ps.get(name)?.data().to_vec()) };
        let mut layers = Vec::with_capacity(dec.cfg.n_layers);
        for (i, (k, v)) in out.layer_kv.iter().enumerate() {
            let l = i + 1;
            let w = |n: &str| -> Result<Tensor> {
                Ok(dec.weight(&g, ps, l, n, true)?.to_tensor())
            };
            layers.push(LayerWeights {
                wq: w("wq")?,
                wk: w("wk")?,
                wv: w("wv")?,
                wo: w("wo")?,
                w1: w("w1")?,
                w2: w("w2")?,
                b1: vecp(&format!("base.l{l}.b1"))?,
                b2: vecp(&format!("base.l{l}.b2"))?,
                ln1: (vecp(&format!("base.l{l}.ln1.g"))?, vecp(&format!("base.l{l}.ln1.b"))?),
                ln2: (vecp(&format!("base.l{l}.ln2.g"))?, vecp(&format!("base.l{l}.ln2.b"))?),
                keys: k.value().data().to_vec(),
                values: v.value().data().to_vec(),
            });
        }
        let next_pos = out.logits.shape()[0];
        Ok(Self {
            layers,
            tok: konst("base.tok")?,
            pos: konst("base.pos")?,
            ln_f: (vecp("base.ln_f.g")?, vecp("base.ln_f.b")?),
            head: konst("base.head")?,
            next_pos,
            n_heads: dec.cfg.n_heads,
        })
    }

    fn step(&mut self, id: usize) -> Result<Vec<f64>> {
        let d = self.tok.shape()[1];
        if id >= self.tok.shape()[0] || self.next_pos >= self.pos.shape()[0] {
            return Err(Error::Value(format!("cannot decode token {id} at position {}", self.next_pos)));
        }
        let p = self.next_pos;
        let mut h: Vec<f64> = (0..d)
            .map(|c| self.tok.data()[id * d + c] + self.pos.data()[p * d + c])
            .collect();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for lw in &mut self.layers {
            let x = layer_norm_row(&h, &lw.ln1);
            let q = vec_mat(&x, &lw.wq);
            lw.keys.extend(vec_mat(&x, &lw.wk));
            lw.values.extend(vec_mat(&x, &lw.wv));
            let rows = p + 1;
            let mut att = vec![0.0; d];
            for hd in 0..self.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..rows)
                    .map(|j| {
                        let kj = &lw.keys[j * d..(j + 1) * d];
                        q[cols.clone()].iter().zip(&kj[cols.clone()]).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let w: Vec<f64> = scores.iter().map(|s| ((s - max) * scale).exp()).collect();
                let z: f64 = w.iter().sum();
                for (j, wj) in w.iter().enumerate() {
                    let vj = &lw.values[j * d..(j + 1) * d];
                    for c in cols.clone() {
                        att[c] += wj / z * vj[c];
                    }
                }
            }
            let a = vec_mat(&att, &lw.wo);
            h.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            let x = layer_norm_row(&h, &lw.ln2);
            let mut m = vec_mat(&x, &lw.w1);
            m.iter_mut().zip(&lw.b1).for_each(|(v, b)| *v = gelu(*v + b));
            let m = vec_mat(&m, &lw.w2);
            h.iter_mut().zip(m.iter().zip(&lw.b2)).for_each(|(x, (y, b))| *x += y + b);
        }
        self.next_pos += 1;
        let logits = vec_mat(&layer_norm_row(&h, &self.ln_f), &self.head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("decode_step"));
        }
        Ok(logits)
    }
}

/// Greedy loop over an arbitrary next-token scorer. `next_logits` receives
/// the tokens generated so far; decoding stops at EOS or after `max_len`
/// tokens. Ties pick the lowest id.
pub fn greedy_decode_with(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = next_logits(&out)?;
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best == EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

/// Positions of a sequence that are text (bypass the adapters).
pub fn text_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.len()).filter(|&p| seq.kinds[p] != TokenKind::Visual).collect()
}
