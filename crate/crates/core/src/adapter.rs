//! Slot adapter: project visual tokens into a bottleneck, let a few slots
//! compete for them over several attention rounds, rebuild the tokens from
//! the slots and add the result back through a zero-initialised projection.
//!
//! All tensors are frame-major: tokens `[T, N, ·]`, slots `[T, N_s, ·]`,
//! attention `[T, N, N_s]` (token rows, slot columns).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_axis, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// Tokens query the slots with single-head cross-attention.
    CrossAttention,
    /// Each slot is repeated `N / N_s` times, then linearly projected.
    RepeatProject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Host hidden size `D`.
    pub model_dim: usize,
    /// Bottleneck size `d`.
    pub bottleneck_dim: usize,
    pub n_slots: usize,
    pub n_iters: usize,
    pub n_heads: usize,
    pub recon_mode: ReconMode,
    /// Guard in the token-axis renormalisation of the attention.
    pub eps_token_norm: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            model_dim: 2048,
            bottleneck_dim: 512,
            n_slots: 4,
            n_iters: 3,
            n_heads: 8,
            recon_mode: ReconMode::CrossAttention,
            eps_token_norm: 1e-8,
        }
    }
}

impl AdapterConfig {
    pub fn head_dim(&self) -> usize {
        self.bottleneck_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("n_slots", self.n_slots),
            ("n_iters", self.n_iters),
            ("slot_heads", self.n_heads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.bottleneck_dim % self.n_heads != 0 {
            return Err(Error::config(
                "bottleneck_dim",
                format!(
                    "{} is not divisible by slot_heads = {}",
                    self.bottleneck_dim, self.n_heads
                ),
            ));
        }
        if !(self.eps_token_norm > 0.0 && self.eps_token_norm.is_finite()) {
            return Err(Error::config("eps_token_norm", "must be a positive finite number"));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

/// Slot-attention internals exposed for the alignment loss and diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct SlotAttentionOutput<'g> {
    /// `[T, N_s, d]`, slots after the last iteration.
    pub slots: Var<'g>,
    /// `[T, N, N_s]`, slot-axis softmax of the last iteration (head mean).
    pub attn: Var<'g>,
    /// `[T, N, N_s]`, token-axis renormalised `attn` (head mean).
    pub attn_hat: Var<'g>,
}

/// Result of a single attention round.
#[derive(Clone, Copy, Debug)]
pub struct SlotStep<'g> {
    /// `[T, N_s, d]`, GRU-updated slots.
    pub slots: Var<'g>,
    /// `[T, N, N_s]`, head-mean slot-axis softmax.
    pub attn: Var<'g>,
    /// `[T, N, N_s]`, head-mean token-axis renormalisation.
    pub attn_hat: Var<'g>,
    /// `[T, N_s, d]`, weighted-mean token values fed to the GRU (heads concatenated).
    pub updates: Var<'g>,
}

/// Per-iteration projections of the tokens, computed once per forward.
struct TokenProjections<'g> {
    normed: Var<'g>,
    keys: Vec<Var<'g>>,
    values: Vec<Var<'g>>,
}

/// Parameter names are `{prefix}{field}`; the adapter itself is stateless.
#[derive(Clone, Debug)]
pub struct SlotAdapter {
    pub cfg: AdapterConfig,
    prefix: String,
}

fn ones(n: usize) -> Tensor {
    Tensor::full(&[n], 1.0)
}

impl SlotAdapter {
    pub fn new(cfg: AdapterConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, field: &str) -> String {
        format!("{}{}", self.prefix, field)
    }

    fn p<'g>(&self, g: &'g Graph, ps: &ParamSet, field: &str) -> Result<Var<'g>> {
        g.param(ps, &self.name(field))
    }

    /// Fresh parameters: seeded N(0, 0.02^2) slot queries, Xavier-uniform
    /// projections, zero GRU biases, unit layer norms and `w_up = 0`.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let (dm, d, ns) = (self.cfg.model_dim, self.cfg.bottleneck_dim, self.cfg.n_slots);
        let mut ps = ParamSet::new();
        let gate3 = |rng: &mut dyn rand::RngCore| -> Result<Tensor> {
            // three d x d gate blocks side by side: [reset | update | candidate]
            let blocks: Vec<Tensor> = (0..3).map(|_| Tensor::xavier(d, d, rng)).collect();
            let mut data = vec![0.0; d * 3 * d];
            for (b, blk) in blocks.iter().enumerate() {
                for r in 0..d {
                    data[r * 3 * d + b * d..r * 3 * d + (b + 1) * d]
                        .copy_from_slice(&blk.data()[r * d..(r + 1) * d]);
                }
            }
            Tensor::new(&[d, 3 * d], data)
        };
        ps.insert(self.name("w_down"), Tensor::xavier(dm, d, rng))?;
        ps.insert(self.name("slots_init"), Tensor::randn(&[ns, d], 0.02, rng))?;
        ps.insert(self.name("ln_in.g"), ones(d))?;
        ps.insert(self.name("ln_in.b"), Tensor::zeros(&[d]))?;
        ps.insert(self.name("ln_slots.g"), ones(d))?;
        ps.insert(self.name("ln_slots.b"), Tensor::zeros(&[d]))?;
        ps.insert(self.name("w_q"), Tensor::xavier(d, d, rng))?;
        ps.insert(self.name("w_k"), Tensor::xavier(d, d, rng))?;
        ps.insert(self.name("w_v"), Tensor::xavier(d, d, rng))?;
        ps.insert(self.name("gru.w_in"), gate3(rng)?)?;
        ps.insert(self.name("gru.w_hid"), gate3(rng)?)?;
        ps.insert(self.name("gru.b_in"), Tensor::zeros(&[3 * d]))?;
        ps.insert(self.name("gru.b_hid"), Tensor::zeros(&[3 * d]))?;
        match self.cfg.recon_mode {
            ReconMode::CrossAttention => {
                ps.insert(self.name("recon.w_q"), Tensor::xavier(d, d, rng))?;
                ps.insert(self.name("recon.w_k"), Tensor::xavier(d, d, rng))?;
                ps.insert(self.name("recon.w_v"), Tensor::xavier(d, d, rng))?;
            }
            ReconMode::RepeatProject => {
                ps.insert(self.name("recon.w_proj"), Tensor::xavier(d, d, rng))?;
            }
        }
        ps.insert(self.name("w_up"), Tensor::zeros(&[d, dm]))?;
        Ok(ps)
    }

    fn check_tokens(&self, x: &Var<'_>, last: usize, what: &str) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != last {
            return Err(Error::Dimension(format!(
                "{what}: expected [T, N, {last}], got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `X_down = X W_down`, per frame.
    pub fn down_project<'g>(&self, g: &'g Graph, ps: &ParamSet, x: Var<'g>) -> Result<Var<'g>> {
        self.check_tokens(&x, self.cfg.model_dim, "down_project")?;
        x.matmul(self.p(g, ps, "w_down")?)
    }

    fn project_tokens<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        x_down: Var<'g>,
    ) -> Result<TokenProjections<'g>> {
        self.check_tokens(&x_down, self.cfg.bottleneck_dim, "slot attention")?;
        let normed = x_down.layer_norm(
            self.p(g, ps, "ln_in.g")?,
            self.p(g, ps, "ln_in.b")?,
            LN_EPS,
        )?;
        let h = self.cfg.n_heads;
        let keys = normed.matmul(self.p(g, ps, "w_k")?)?.chunk(2, h)?;
        let values = normed.matmul(self.p(g, ps, "w_v")?)?.chunk(2, h)?;
        Ok(TokenProjections {
            normed,
            keys,
            values,
        })
    }

    fn step_with<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        slots: Var<'g>,
        tokens: &TokenProjections<'g>,
    ) -> Result<SlotStep<'g>> {
        let d = self.cfg.bottleneck_dim;
        let h = self.cfg.n_heads;
        let ss = slots.shape();
        if ss.len() != 3 || ss[2] != d || ss[1] != self.cfg.n_slots {
            return Err(Error::Dimension(format!(
                "slot_attention_step: slots {ss:?}, expected [T, {}, {d}]",
                self.cfg.n_slots
            )));
        }
        let normed = slots.layer_norm(
            self.p(g, ps, "ln_slots.g")?,
            self.p(g, ps, "ln_slots.b")?,
            LN_EPS,
        )?;
        let queries = normed.matmul(self.p(g, ps, "w_q")?)?.chunk(2, h)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut updates = Vec::with_capacity(h);
        let mut attn_sum: Option<Var<'g>> = None;
        let mut hat_sum: Option<Var<'g>> = None;
        for head in 0..h {
            // M = K Q^T / sqrt(d_h): [T, N, N_s]
            let logits = tokens.keys[head]
                .matmul(queries[head].transpose_last2()?)?
                .scale(scale)?;
            let attn = logits.softmax_axis(2)?;
            let attn_hat = attn.normalize_sum_axis(1, self.cfg.eps_token_norm)?;
            // Z = Â^T V: [T, N_s, d_h]
            updates.push(attn_hat.transpose_last2()?.matmul(tokens.values[head])?);
            attn_sum = Some(match attn_sum {
                Some(acc) => acc.add(attn)?,
                None => attn,
            });
            hat_sum = Some(match hat_sum {
                Some(acc) => acc.add(attn_hat)?,
                None => attn_hat,
            });
        }
        let z = if h == 1 { updates[0] } else { concat_axis(&updates, 2)? };
        let next = self.gru(g, ps, z, slots)?;
        let inv_h = 1.0 / h as f64;
        let mean = |v: Option<Var<'g>>| -> Result<Var<'g>> {
            let v = v.expect("n_heads >= 1");
            if h == 1 {
                Ok(v)
            } else {
                v.scale(inv_h)
            }
        };
        Ok(SlotStep {
            slots: next,
            attn: mean(attn_sum)?,
            attn_hat: mean(hat_sum)?,
            updates: z,
        })
    }

    /// Standard GRU cell applied row-wise to `[T, N_s, d]` input/hidden.
    fn gru<'g>(&self, g: &'g Graph, ps: &ParamSet, input: Var<'g>, hidden: Var<'g>) -> Result<Var<'g>> {
        let d = self.cfg.bottleneck_dim;
        let gi = input
            .matmul(self.p(g, ps, "gru.w_in")?)?
            .add(self.p(g, ps, "gru.b_in")?)?
            .split_axis(2, &[d, d, d])?;
        let gh = hidden
            .matmul(self.p(g, ps, "gru.w_hid")?)?
            .add(self.p(g, ps, "gru.b_hid")?)?
            .split_axis(2, &[d, d, d])?;
        let reset = gi[0].add(gh[0])?.sigmoid()?;
        let update = gi[1].add(gh[1])?.sigmoid()?;
        let candidate = gi[2].add(reset.mul(gh[2])?)?.tanh()?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        candidate.add(update.mul(hidden.sub(candidate)?)?)
    }

    /// One round of competitive attention followed by the GRU update.
    pub fn slot_attention_step<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        slots: Var<'g>,
        x_down: Var<'g>,
    ) -> Result<SlotStep<'g>> {
        let tokens = self.project_tokens(g, ps, x_down)?;
        self.step_with(g, ps, slots, &tokens)
    }

    /// Learned slot queries, broadcast to every frame.
    pub fn initial_slots<'g>(&self, g: &'g Graph, ps: &ParamSet, frames: usize) -> Result<Var<'g>> {
        let (ns, d) = (self.cfg.n_slots, self.cfg.bottleneck_dim);
        g.constant(Tensor::zeros(&[frames, ns, d]))
            .add(self.p(g, ps, "slots_init")?)
    }

    /// `n_iters` shared-weight iterations from the learned initial slots.
    pub fn run_slot_attention<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        x_down: Var<'g>,
    ) -> Result<SlotAttentionOutput<'g>> {
        let tokens = self.project_tokens(g, ps, x_down)?;
        let frames = x_down.shape()[0];
        let mut slots = self.initial_slots(g, ps, frames)?;
        let mut last = None;
        for _ in 0..self.cfg.n_iters {
            let step = self.step_with(g, ps, slots, &tokens)?;
            slots = step.slots;
            last = Some((step.attn, step.attn_hat));
        }
        let (attn, attn_hat) = last.ok_or_else(|| Error::config("n_iters", "must be >= 1"))?;
        Ok(SlotAttentionOutput {
            slots,
            attn,
            attn_hat,
        })
    }

    /// Rebuilds `[T, N, d]` tokens from `[T, N_s, d]` slots.
    pub fn reconstruct<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        x_down: Var<'g>,
        slots: Var<'g>,
    ) -> Result<Var<'g>> {
        let (_, n) = self.check_tokens(&x_down, self.cfg.bottleneck_dim, "reconstruct")?;
        let normed = x_down.layer_norm(
            self.p(g, ps, "ln_in.g")?,
            self.p(g, ps, "ln_in.b")?,
            LN_EPS,
        )?;
        self.reconstruct_from(g, ps, normed, slots, n)
    }

    fn reconstruct_from<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        queries: Var<'g>,
        slots: Var<'g>,
        n_tokens: usize,
    ) -> Result<Var<'g>> {
        let ns = self.cfg.n_slots;
        match self.cfg.recon_mode {
            ReconMode::CrossAttention => {
                let q = queries.matmul(self.p(g, ps, "recon.w_q")?)?;
                let k = slots.matmul(self.p(g, ps, "recon.w_k")?)?;
                let v = slots.matmul(self.p(g, ps, "recon.w_v")?)?;
                let scale = 1.0 / (self.cfg.bottleneck_dim as f64).sqrt();
                let weights = q.matmul(k.transpose_last2()?)?.scale(scale)?.softmax_axis(2)?;
                weights.matmul(v)
            }
            ReconMode::RepeatProject => {
                if n_tokens % ns != 0 {
                    return Err(Error::config(
                        "recon_mode",
                        format!("repeat_project needs N ({n_tokens}) divisible by n_slots ({ns})"),
                    ));
                }
                let reps = n_tokens / ns;
                let per_slot = if ns == 1 { vec![slots] } else { slots.chunk(1, ns)? };
                let repeated: Vec<Var<'g>> = per_slot
                    .iter()
                    .flat_map(|s| std::iter::repeat(*s).take(reps))
                    .collect();
                let tiled = if repeated.len() == 1 {
                    repeated[0]
                } else {
                    concat_axis(&repeated, 1)?
                };
                tiled.matmul(self.p(g, ps, "recon.w_proj")?)
            }
        }
    }

    /// `X_out = X + X̂ W_up`. Identity while `w_up` is zero.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamSet,
        x: Var<'g>,
    ) -> Result<(Var<'g>, SlotAttentionOutput<'g>)> {
        let (_, n) = self.check_tokens(&x, self.cfg.model_dim, "adapter_forward")?;
        let x_down = self.down_project(g, ps, x)?;
        let tokens = self.project_tokens(g, ps, x_down)?;
        let frames = x.shape()[0];
        let mut slots = self.initial_slots(g, ps, frames)?;
        let mut last = None;
        for _ in 0..self.cfg.n_iters {
            let step = self.step_with(g, ps, slots, &tokens)?;
            slots = step.slots;
            last = Some((step.attn, step.attn_hat));
        }
        let (attn, attn_hat) = last.expect("validated n_iters >= 1");
        let recon = self.reconstruct_from(g, ps, tokens.normed, slots, n)?;
        let out = x.add(recon.matmul(self.p(g, ps, "w_up")?)?)?;
        Ok((
            out,
            SlotAttentionOutput {
                slots,
                attn,
                attn_hat,
            },
        ))
    }
}

/// Ablation: same bottleneck and zero-init residual, but tokens attend to
/// each other within a frame instead of competing for slots.
#[derive(Clone, Debug)]
pub struct SelfAttentionAdapter {
    pub cfg: AdapterConfig,
    prefix: String,
}

impl SelfAttentionAdapter {
    pub fn new(cfg: AdapterConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn p<'g>(&self, g: &'g Graph, ps: &ParamSet, field: &str) -> Result<Var<'g>> {
        g.param(ps, &format!("{}{}", self.prefix, field))
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let (dm, d) = (self.cfg.model_dim, self.cfg.bottleneck_dim);
        let mut ps = ParamSet::new();
        let name = |f: &str| format!("{}{}", self.prefix, f);
        ps.insert(name("w_down"), Tensor::xavier(dm, d, rng))?;
        ps.insert(name("ln_in.g"), ones(d))?;
        ps.insert(name("ln_in.b"), Tensor::zeros(&[d]))?;
        ps.insert(name("w_q"), Tensor::xavier(d, d, rng))?;
        ps.insert(name("w_k"), Tensor::xavier(d, d, rng))?;
        ps.insert(name("w_v"), Tensor::xavier(d, d, rng))?;
        ps.insert(name("w_up"), Tensor::zeros(&[d, dm]))?;
        Ok(ps)
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamSet, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.cfg.model_dim {
            return Err(Error::Dimension(format!(
                "self-attention adapter: expected [T, N, {}], got {s:?}",
                self.cfg.model_dim
            )));
        }
        let h = self.cfg.n_heads;
        let normed = x
            .matmul(self.p(g, ps, "w_down")?)?
            .layer_norm(self.p(g, ps, "ln_in.g")?, self.p(g, ps, "ln_in.b")?, LN_EPS)?;
        let q = normed.matmul(self.p(g, ps, "w_q")?)?.chunk(2, h)?;
        let k = normed.matmul(self.p(g, ps, "w_k")?)?.chunk(2, h)?;
        let v = normed.matmul(self.p(g, ps, "w_v")?)?.chunk(2, h)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let w = q[i].matmul(k[i].transpose_last2()?)?.scale(scale)?.softmax_axis(2)?;
            heads.push(w.matmul(v[i])?);
        }
        let mixed = if h == 1 { heads[0] } else { concat_axis(&heads, 2)? };
        x.add(mixed.matmul(self.p(g, ps, "w_up")?)?)
    }
}

#[cfg(test)]
mod tests;
