use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{feature_affinity, sa_loss, slot_similarity, total_loss, FeatureStack, SaOptions, SaPlacement};
use crate::autodiff::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamSet, Tensor, Var};
use crate::decoder::{build_sequence, ce_loss, parse_window, GroundingDecoder, VideoSample};
use crate::diagnostics::{pool_video_repr, Grounder};
use crate::metrics::{sample_ious, GroundingMetrics, Prediction, Window};
use crate::rng::stream;
use crate::synth::split_video;
use crate::{Error, Result};

use super::config::{RunConfig, SaTarget};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    /// Alignment loss; `None` when the model has no slot adapter.
    pub sa: Option<f64>,
    pub total: f64,
}

pub fn build_decoder(cfg: &RunConfig) -> Result<GroundingDecoder> {
    GroundingDecoder::new(cfg.decoder.clone(), cfg.adapter.clone())
}

/// Fresh base weights (trainable) from the `init.base` stream.
pub fn init_base(cfg: &RunConfig, dec: &GroundingDecoder) -> Result<ParamSet> {
    dec.init_base(&mut stream(cfg.seed, "init.base"))
}

/// Freezes `base.*` (unless `full_finetune`) and adds fresh tuning weights
/// from the `init.tuning` stream.
pub fn attach_tuning(cfg: &RunConfig, dec: &GroundingDecoder, mut base: ParamSet) -> Result<ParamSet> {
    if !cfg.full_finetune {
        base.freeze_prefix("base.");
    }
    base.extend(dec.init_tuning(&mut stream(cfg.seed, "init.tuning"))?)?;
    Ok(base)
}

fn sa_target(cfg: &RunConfig, sample: &VideoSample) -> Result<crate::alignment::AffinityMatrix> {
    match cfg.sa_target {
        SaTarget::Planted => sample
            .target_affinity
            .clone()
            .ok_or_else(|| Error::Value(format!("sample `{}` has no target affinity", sample.id))),
        SaTarget::Features => feature_affinity(&FeatureStack::new(sample.frames.clone())?),
    }
}

/// CE, alignment term and their weighted sum for one sample.
pub struct SampleLoss<'g> {
    pub ce: Var<'g>,
    pub sa: Option<Var<'g>>,
    pub total: Var<'g>,
}

pub fn sample_loss<'g>(
    g: &'g Graph,
    dec: &GroundingDecoder,
    ps: &ParamSet,
    cfg: &RunConfig,
    sample: &VideoSample,
) -> Result<SampleLoss<'g>> {
    let seq = build_sequence(sample, dec.vocab(), true)?;
    let out = dec.forward(g, ps, &sample.frames, &seq)?;
    let ce = ce_loss(out.logits, &seq.target_labels())?;
    let used: Vec<_> = match cfg.sa_placement {
        SaPlacement::LastLayer => out.slot_outputs.last().into_iter().collect(),
        SaPlacement::AllLayers => out.slot_outputs.iter().collect(),
    };
    if used.is_empty() {
        return Ok(SampleLoss { ce, sa: None, total: ce });
    }
    let target = sa_target(cfg, sample)?;
    let opts = SaOptions {
        mask_diagonal: cfg.mask_diagonal,
    };
    let mut sa = sa_loss(slot_similarity(used[0].attn)?, &target, opts)?;
    for s in &used[1..] {
        sa = sa.add(sa_loss(slot_similarity(s.attn)?, &target, opts)?)?;
    }
    if used.len() > 1 {
        sa = sa.scale(1.0 / used.len() as f64)?;
    }
    let total = total_loss(ce, sa, cfg.lambda)?;
    Ok(SampleLoss { ce, sa: Some(sa), total })
}

/// Accumulates the mean loss gradient of `batch` and takes one AdamW step.
pub fn train_step(
    dec: &GroundingDecoder,
    ps: &mut ParamSet,
    opt: &mut OptimizerState,
    cfg: &RunConfig,
    batch: &[&VideoSample],
    step: usize,
) -> Result<StepLog> {
    ps.zero_grad();
    let w = 1.0 / batch.len() as f64;
    let (mut ce, mut sa, mut total, mut has_sa) = (0.0, 0.0, 0.0, false);
    for s in batch {
        let g = Graph::new();
        let l = sample_loss(&g, dec, ps, cfg, s)?;
        ce += w * l.ce.item()?;
        if let Some(v) = l.sa {
            sa += w * v.item()?;
            has_sa = true;
        }
        total += w * l.total.item()?;
        g.backward_into(l.total, ps, w)?;
    }
    adamw_step(ps, opt)?;
    Ok(StepLog {
        step,
        ce,
        sa: has_sa.then_some(sa),
        total,
    })
}

pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub optimizer: OptimizerState,
}

/// `cfg.epochs` passes over `data` in seeded shuffled order. `on_step` sees
/// each log line together with the updated parameters. On a failed step the
/// parameters are restored to their last good values before the error is
/// returned.
pub fn train(
    dec: &GroundingDecoder,
    ps: &mut ParamSet,
    cfg: &RunConfig,
    data: &[VideoSample],
    mut on_step: impl FnMut(&StepLog, &ParamSet, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Value("empty training set".into()));
    }
    if ps.trainable_count() == 0 {
        return Err(Error::config("decoder.adapter_kind", "no trainable parameters"));
    }
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &data[i]).collect();
            let last_good = ps.clone();
            match train_step(dec, ps, &mut opt, cfg, &batch, step) {
                Ok(entry) => {
                    on_step(&entry, ps, &opt)?;
                    log.push(entry);
                }
                Err(e) => {
                    *ps = last_good;
                    return Err(e);
                }
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { log, optimizer: opt })
}

/// Trains the base model alone (adapters and LoRA bypassed) on a fresh
/// synthetic stream, one new batch per step.
pub fn pretrain_base(
    dec: &GroundingDecoder,
    base: &mut ParamSet,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: cfg.pretrain_lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let spec = crate::synth::SynthSpec {
        seed: cfg.synth.seed,
        ..cfg.synth.clone()
    };
    let split = format!("pretrain-{}", cfg.seed);
    let mut log = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        base.zero_grad();
        let w = 1.0 / cfg.batch_size as f64;
        let mut ce = 0.0;
        for b in 0..cfg.batch_size {
            let v = split_video(&spec, &split, step * cfg.batch_size + b)?;
            let seq = build_sequence(&v.sample, dec.vocab(), true)?;
            let g = Graph::new();
            let out = dec.forward_base(&g, base, &v.sample.frames, &seq)?;
            let l = ce_loss(out.logits, &seq.target_labels())?;
            ce += w * l.item()?;
            g.backward_into(l, base, w)?;
        }
        adamw_step(base, &mut opt)?;
        let entry = StepLog { step, ce, sa: None, total: ce };
        on_step(&entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Per-sample evaluation record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub text: String,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    pub parse_ok: bool,
    pub gt_start: f64,
    pub gt_end: f64,
    pub duration: f64,
    pub iou: f64,
}

impl EvalRecord {
    pub fn prediction(&self) -> Prediction {
        match (self.t_start, self.t_end) {
            (Some(start), Some(end)) if self.parse_ok => Prediction::Window(Window { start, end }),
            _ => Prediction::ParseFailure {
                reason: self.text.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: GroundingMetrics,
    pub records: Vec<EvalRecord>,
}

/// Recomputes summary metrics from per-sample records.
pub fn metrics_from_records(records: &[EvalRecord]) -> Result<GroundingMetrics> {
    let preds: Vec<Prediction> = records.iter().map(EvalRecord::prediction).collect();
    let gts = records
        .iter()
        .map(|r| Window::new(r.gt_start, r.gt_end))
        .collect::<Result<Vec<_>>>()?;
    let durations: Vec<f64> = records.iter().map(|r| r.duration).collect();
    GroundingMetrics::compute(&preds, &gts, Some(&durations))
}

/// Greedy decoding of one sample.
pub fn predict(dec: &GroundingDecoder, ps: &ParamSet, sample: &VideoSample, clamp_inverted: bool) -> Result<(String, Prediction)> {
    let prefix = build_sequence(sample, dec.vocab(), false)?;
    let ids = dec.greedy_decode(ps, &sample.frames, &prefix)?;
    let text = dec.vocab().decode(&ids);
    let pred = parse_window(&text, clamp_inverted);
    Ok((text, pred))
}

pub fn evaluate(dec: &GroundingDecoder, ps: &ParamSet, samples: &[VideoSample], clamp_inverted: bool) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Value("empty evaluation set".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let (text, pred) = predict(dec, ps, s, clamp_inverted)?;
        let iou = sample_ious(std::slice::from_ref(&pred), &[s.gt_window], Some(&[s.duration]))?[0];
        let w = pred.window();
        records.push(EvalRecord {
            sample_id: s.id.clone(),
            text,
            t_start: w.map(|w| w.start),
            t_end: w.map(|w| w.end),
            parse_ok: w.is_some(),
            gt_start: s.gt_window.start,
            gt_end: s.gt_window.end,
            duration: s.duration,
            iou,
        });
    }
    Ok(EvalReport {
        metrics: metrics_from_records(&records)?,
        records,
    })
}

/// Decoder plus weights, usable wherever a [`Grounder`] is expected.
pub struct DecoderGrounder<'a> {
    pub decoder: &'a GroundingDecoder,
    pub params: &'a ParamSet,
    pub clamp_inverted: bool,
}

impl Grounder for DecoderGrounder<'_> {
    fn predict(&self, sample: &VideoSample) -> Result<Prediction> {
        predict(self.decoder, self.params, sample, self.clamp_inverted).map(|(_, p)| p)
    }
}

/// Slot attention `[T, N, N_s]` of the last slot-adapter layer on the
/// query prefix.
pub fn slot_attention(dec: &GroundingDecoder, ps: &ParamSet, sample: &VideoSample) -> Result<Tensor> {
    let seq = build_sequence(sample, dec.vocab(), false)?;
    let g = Graph::new();
    let out = dec.forward(&g, ps, &sample.frames, &seq)?;
    out.slot_outputs
        .last()
        .map(|s| s.attn.to_tensor())
        .ok_or_else(|| Error::config("decoder.adapter_kind", "model has no slot adapter"))
}

/// Mean visual hidden state after the last adapter layer.
pub fn pooled_repr(dec: &GroundingDecoder, ps: &ParamSet, sample: &VideoSample) -> Result<Vec<f64>> {
    let seq = build_sequence(sample, dec.vocab(), false)?;
    let g = Graph::new();
    let out = dec.forward(&g, ps, &sample.frames, &seq)?;
    let h = out
        .probe_hidden
        .ok_or_else(|| Error::config("decoder.adapter_layers", "no probe layer"))?;
    pool_video_repr(&h.value())
}
