use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapter::AdapterConfig;
use crate::alignment::{feature_affinity, sa_loss, slot_similarity, total_loss, FeatureStack};
use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, ParamSet, Tensor};
use crate::decoder::{build_sequence, ce_loss, AdapterKind, DecoderConfig, GroundingDecoder, VideoSample};
use crate::diagnostics::{mmd2, perturb_eval, pool_video_repr, simrank_split, PerturbMode, PerturbSpec, ReprSet};
use crate::rng::stream;
use crate::synth::{gen_split, slot_assignment, SynthSpec, SynthVideo};
use crate::{Error, Result};

use super::config::RunConfig;
use super::io::{read_svtf, write_svtf, Checkpoint};
use super::train::{
    attach_tuning, build_decoder, evaluate, init_base, pooled_repr, pretrain_base, slot_attention, train,
    DecoderGrounder,
};

#[derive(Debug, Parser)]
#[command(name = "slot-ground", version, about = "Slot-adapter temporal grounding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the toy base, then train adapters and LoRA on synthetic videos.
    Train(TrainArgs),
    /// Greedy-decode an evaluation split and score it.
    Eval(EvalArgs),
    /// MMD between pooled representations (feature files or a checkpoint's ID/OOD splits).
    DiagMmd(MmdArgs),
    /// Noise-perturbation experiment on a checkpoint.
    DiagPerturb(PerturbArgs),
    /// Rank OOD samples by similarity to the training set.
    DiagSimrank(SimrankArgs),
    /// Write per-frame argmax slot maps as PGM images plus a CSV.
    ExportSlots(ExportArgs),
    /// Finite-difference check of the full composed loss.
    Gradcheck(GradcheckArgs),
    /// Write synthetic videos as SVTF feature files with a manifest.
    GenData(GenDataArgs),
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file: a JSON object or `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point before the file and overrides: `default` or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key=value` override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            require_file(path, "--config")?;
            cfg = RunConfig::from_file(cfg, path)?;
        }
        let cfg = cfg.with_overrides(&self.sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reuse the `base.*` weights of this checkpoint instead of pretraining.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Id,
    Ood,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "id")]
    pub split: SplitKind,
    /// Number of videos (defaults to the checkpoint's `n_eval`).
    #[arg(long)]
    pub n: Option<usize>,
    /// Directory for `metrics.json` and `predictions.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MmdArgs {
    /// SVTF files of the first set (one video each).
    #[arg(long, num_args = 1..)]
    pub a: Vec<PathBuf>,
    /// SVTF files of the second set.
    #[arg(long, num_args = 1..)]
    pub b: Vec<PathBuf>,
    /// Compare a checkpoint's ID and OOD eval representations instead.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Gt,
    Random,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "id")]
    pub split: SplitKind,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimrankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[arg(long)]
    pub n: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "id")]
    pub split: SplitKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long)]
    pub ood: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(flag, format!("{} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, GroundingDecoder)> {
    require_file(path, "--checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let dec = build_decoder(&ckpt.config)?;
    Ok((ckpt, dec))
}

/// Held-out videos of a run: the `eval` split, shifted for OOD.
pub fn eval_split(cfg: &RunConfig, split: SplitKind, n: usize) -> Result<Vec<SynthVideo>> {
    gen_split(&cfg.synth, "eval", n, split == SplitKind::Ood)
}

fn samples(videos: Vec<SynthVideo>) -> Vec<VideoSample> {
    videos.into_iter().map(|v| v.sample).collect()
}

fn append_jsonl<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Files written by [`run_train`].
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
}

/// Full training run: config echo, pretraining (or a reused base), tuning,
/// logs and checkpoints under the output directory.
pub fn run_train(cfg: &RunConfig, out: &Path, base_from: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
    let dec = build_decoder(cfg)?;

    let base = match base_from {
        Some(path) => {
            require_file(path, "--base")?;
            let ckpt = Checkpoint::load(path)?;
            let mut base = ParamSet::new();
            for (name, t) in ckpt.params.iter().filter(|(n, _)| n.starts_with("base.")) {
                let mut t = t.clone();
                t.set_requires_grad(true);
                base.insert(name.clone(), t)?;
            }
            base
        }
        None => {
            let mut base = init_base(cfg, &dec)?;
            let mut log = BufWriter::new(File::create(out.join("pretrain.jsonl"))?);
            pretrain_base(&dec, &mut base, cfg, |entry| append_jsonl(&mut log, entry))?;
            log.flush()?;
            base
        }
    };
    let mut ps = attach_tuning(cfg, &dec, base)?;

    let data = samples(gen_split(&cfg.synth, "train", cfg.n_train, false)?);
    let mut log = BufWriter::new(File::create(out.join("train.jsonl"))?);
    let result = train(&dec, &mut ps, cfg, &data, |entry, params, opt| {
        append_jsonl(&mut log, entry)?;
        if cfg.checkpoint_every > 0 && (entry.step + 1) % cfg.checkpoint_every == 0 {
            log.flush()?;
            Checkpoint {
                config: cfg.clone(),
                params: params.clone(),
                optimizer: Some(opt.clone()),
            }
            .save(&out.join("last-good.ckpt"))?;
        }
        Ok(())
    });
    log.flush()?;
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            // parameters were rolled back to the last good step
            Checkpoint {
                config: cfg.clone(),
                params: ps,
                optimizer: None,
            }
            .save(&out.join("last-good.ckpt"))?;
            return Err(e);
        }
    };
    Checkpoint {
        config: cfg.clone(),
        params: ps,
        optimizer: Some(outcome.optimizer),
    }
    .save(&out.join("checkpoint.ckpt"))?;
    Ok(TrainSummary {
        out_dir: out.to_path_buf(),
        steps: outcome.log.len(),
        first_total: outcome.log.first().map_or(f64::NAN, |l| l.total),
        last_total: outcome.log.last().map_or(f64::NAN, |l| l.total),
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, dec) = load_checkpoint(&args.checkpoint)?;
    let n = args.n.unwrap_or(ckpt.config.n_eval);
    let data = samples(eval_split(&ckpt.config, args.split, n)?);
    let report = evaluate(&dec, &ckpt.params, &data, ckpt.config.clamp_inverted)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let mut w = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
        for r in &report.records {
            append_jsonl(&mut w, r)?;
        }
        w.flush()?;
        write_json(&out.join("metrics.json"), &report.metrics)?;
    }
    print_json(&report.metrics)
}

fn svtf_reprs(paths: &[PathBuf], label: &str) -> Result<ReprSet> {
    let mut v = Vec::with_capacity(paths.len());
    for p in paths {
        require_file(p, label)?;
        v.push(pool_video_repr(&read_svtf(p)?)?);
    }
    ReprSet::new(label, v)
}

/// Pooled post-adapter representations of the first `n` eval videos.
pub fn split_reprs(dec: &GroundingDecoder, ps: &ParamSet, videos: &[SynthVideo], label: &str) -> Result<ReprSet> {
    let v = videos
        .iter()
        .map(|s| pooled_repr(dec, ps, &s.sample))
        .collect::<Result<Vec<_>>>()?;
    ReprSet::new(label, v)
}

fn cmd_mmd(args: &MmdArgs) -> Result<()> {
    let (x, y) = match &args.checkpoint {
        Some(path) => {
            let (ckpt, dec) = load_checkpoint(path)?;
            let n = args.n.unwrap_or(ckpt.config.n_eval);
            let id = eval_split(&ckpt.config, SplitKind::Id, n)?;
            let ood = eval_split(&ckpt.config, SplitKind::Ood, n)?;
            (
                split_reprs(&dec, &ckpt.params, &id, "id")?,
                split_reprs(&dec, &ckpt.params, &ood, "ood")?,
            )
        }
        None => {
            if args.a.is_empty() || args.b.is_empty() {
                return Err(Error::config("--a/--b", "give two sets of SVTF files or --checkpoint"));
            }
            (svtf_reprs(&args.a, "--a")?, svtf_reprs(&args.b, "--b")?)
        }
    };
    print_json(&mmd2(&x, &y)?)
}

fn cmd_perturb(args: &PerturbArgs) -> Result<()> {
    let (ckpt, dec) = load_checkpoint(&args.checkpoint)?;
    let n = args.n.unwrap_or(ckpt.config.n_eval);
    let data = samples(eval_split(&ckpt.config, args.split, n)?);
    let spec = PerturbSpec {
        mode: match args.mode {
            ModeArg::Gt => PerturbMode::GtWindow,
            ModeArg::Random => PerturbMode::RandomWindow,
        },
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    let model = DecoderGrounder {
        decoder: &dec,
        params: &ckpt.params,
        clamp_inverted: ckpt.config.clamp_inverted,
    };
    let report = perturb_eval(&model, &data, &spec, args.tau)?;
    if report.overlap_fallbacks > 0 {
        eprintln!(
            "warning: {} samples had no room for a non-overlapping random window",
            report.overlap_fallbacks
        );
    }
    print_json(&report)
}

fn cmd_simrank(args: &SimrankArgs) -> Result<()> {
    let (ckpt, dec) = load_checkpoint(&args.checkpoint)?;
    let n = args.n.unwrap_or(ckpt.config.n_eval);
    let train = gen_split(&ckpt.config.synth, "train", n, false)?;
    let test = eval_split(&ckpt.config, SplitKind::Ood, n)?;
    let split = simrank_split(
        &split_reprs(&dec, &ckpt.params, &train, "train")?,
        &split_reprs(&dec, &ckpt.params, &test, "ood")?,
        args.fraction,
    )?;
    let mut csv = String::from("set,index,sample_id,score\n");
    for (set, ids) in [("top", &split.top), ("bottom", &split.bottom)] {
        for &i in ids {
            csv.push_str(&format!("{set},{i},{},{}\n", test[i].sample.id, split.scores[i]));
        }
    }
    match &args.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Binary PGM (`P5`) of a square label grid, labels spread over 0..=255.
pub fn slot_map_pgm(labels: &[usize], side: usize, n_labels: usize) -> Result<Vec<u8>> {
    if labels.len() != side * side {
        return Err(Error::Dimension(format!("{} labels for a {side}x{side} map", labels.len())));
    }
    let step = if n_labels > 1 { 255 / (n_labels - 1) } else { 0 };
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(labels.iter().map(|&l| (l * step).min(255) as u8));
    Ok(out)
}

/// Writes `{id}_f{frame}.pgm` per frame and appends rows
/// `sample_id,frame,token,slot,planted` to `csv`.
pub fn export_slot_maps(
    dir: &Path,
    sample_id: &str,
    attn: &Tensor,
    planted: Option<&[usize]>,
    csv: &mut impl Write,
) -> Result<Vec<usize>> {
    let assign = slot_assignment(attn)?;
    let (t, n, s) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Dimension(format!("{n} tokens do not form a square grid")));
    }
    for f in 0..t {
        let frame = &assign[f * n..(f + 1) * n];
        fs::write(dir.join(format!("{sample_id}_f{f:03}.pgm")), slot_map_pgm(frame, side, s)?)?;
        for (i, slot) in frame.iter().enumerate() {
            let p = planted.map_or(String::new(), |p| p[f * n + i].to_string());
            writeln!(csv, "{sample_id},{f},{i},{slot},{p}")?;
        }
    }
    Ok(assign)
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let (ckpt, dec) = load_checkpoint(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    let mut csv = BufWriter::new(File::create(args.out.join("slots.csv"))?);
    writeln!(csv, "sample_id,frame,token,slot,planted")?;
    for v in eval_split(&ckpt.config, args.split, args.n)? {
        let attn = slot_attention(&dec, &ckpt.params, &v.sample)?;
        export_slot_maps(&args.out, &v.sample.id, &attn, Some(&v.planted_labels), &mut csv)?;
    }
    csv.flush()?;
    Ok(())
}

/// Composed CE + SA loss through decoder, slot adapter and LoRA on a
/// T=2, N=16, two-slot instance. Tuning weights are perturbed off their
/// zero init so every path carries gradient.
pub fn composed_gradcheck(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let synth = SynthSpec {
        seed,
        n_frames: 2,
        n_tokens: 16,
        n_types: 4,
        feature_dim: 6,
        min_window_frames: 1,
        max_window_frames: 2,
        ..SynthSpec::default()
    };
    let cfg = DecoderConfig {
        n_layers: 3,
        model_dim: 8,
        n_heads: 2,
        mlp_dim: 16,
        feature_dim: 6,
        max_positions: 128,
        adapter_layers: vec![1],
        lora_layers: vec![2, 3],
        lora_rank: 2,
        lora_alpha: 4.0,
        max_decode_len: 14,
        frames_per_video: 2,
        n_query_words: 4,
        adapter_kind: AdapterKind::Slot,
    };
    let acfg = AdapterConfig {
        model_dim: 8,
        bottleneck_dim: 4,
        n_slots: 2,
        n_iters: 2,
        n_heads: 2,
        ..AdapterConfig::default()
    };
    let dec = GroundingDecoder::new(cfg, acfg)?;
    let mut rng = stream(seed, "gradcheck");
    let mut ps = dec.init_base(&mut rng)?;
    ps.freeze_prefix("base.");
    ps.extend(dec.init_tuning(&mut rng)?)?;
    let zero_init: Vec<String> = ps
        .names()
        .filter(|n| n.ends_with("w_up") || (n.starts_with("lora.") && n.ends_with(".b")))
        .cloned()
        .collect();
    for name in zero_init {
        let shape = ps.get(&name)?.shape().to_vec();
        *ps.get_mut(&name)? = Tensor::randn(&shape, 0.3, &mut rng).with_grad();
    }
    let video = crate::synth::gen_video(&synth)?;
    let sample = video.sample;
    let target = feature_affinity(&FeatureStack::new(sample.frames.clone())?)?;
    let seq = build_sequence(&sample, dec.vocab(), true)?;
    let labels = seq.target_labels();
    let opts = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    check_gradients(&ps, opts, |g, ps| {
        let out = dec.forward(g, ps, &sample.frames, &seq)?;
        let ce = ce_loss(out.logits, &labels)?;
        let attn = out.slot_outputs.last().expect("slot adapter present").attn;
        let sa = sa_loss(slot_similarity(attn)?, &target, Default::default())?;
        total_loss(ce, sa, 0.1)
    })
}

/// The slot-query LayerNorm bias shifts every slot query equally, which the
/// slot softmax cancels, so its true gradient is zero up to rounding.
pub fn gradcheck_passed(report: &GradCheckReport) -> bool {
    report
        .params
        .iter()
        .all(|p| p.passed || (p.name.ends_with("ln_slots.b") && p.analytic_norm < 1e-10))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = composed_gradcheck(args.seed, args.tolerance)?;
    for p in &report.params {
        println!(
            "{:<28} entries {:>4}  |g| {:>10.3e}  rel err {:>10.3e}  {}",
            p.name,
            p.checked,
            p.analytic_norm,
            p.rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    if gradcheck_passed(&report) {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Error::Numeric {
            op: format!("gradcheck (worst relative error {:.3e})", report.worst()),
        })
    }
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    id: &'a str,
    file: String,
    times: &'a [f64],
    duration: f64,
    query: &'a [usize],
    gt_start: f64,
    gt_end: f64,
    target_type: usize,
}

pub fn write_dataset(videos: &[SynthVideo], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut manifest = BufWriter::new(File::create(out.join("manifest.jsonl"))?);
    for v in videos {
        let file = format!("{}.svtf", v.sample.id);
        write_svtf(&out.join(&file), &v.sample.frames)?;
        append_jsonl(
            &mut manifest,
            &ManifestEntry {
                id: &v.sample.id,
                file,
                times: &v.sample.times,
                duration: v.sample.duration,
                query: &v.sample.query,
                gt_start: v.sample.gt_window.start,
                gt_end: v.sample.gt_window.end,
                target_type: v.target_type,
            },
        )?;
    }
    manifest.flush()?;
    Ok(())
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.config.load()?;
            if let Some(out) = &a.out {
                cfg.output_dir = Some(out.display().to_string());
            }
            let out = PathBuf::from(
                cfg.output_dir
                    .clone()
                    .ok_or_else(|| Error::config("output_dir", "train needs --out or output_dir"))?,
            );
            let summary = run_train(&cfg, &out, a.base.as_deref())?;
            print_json(&summary)
        }
        Command::Eval(a) => cmd_eval(&a),
        Command::DiagMmd(a) => cmd_mmd(&a),
        Command::DiagPerturb(a) => cmd_perturb(&a),
        Command::DiagSimrank(a) => cmd_simrank(&a),
        Command::ExportSlots(a) => cmd_export(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::GenData(a) => {
            let cfg = a.config.load()?;
            write_dataset(&gen_split(&cfg.synth, &a.split, a.n, a.ood)?, &a.out)
        }
    }
}

/// Process exit code for a command result: 0 success, 2 usage or
/// configuration problems, 1 anything else.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config { .. }) => 2,
        Err(_) => 1,
    }
}
