use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cli::{composed_gradcheck, export_slot_maps, gradcheck_passed, slot_map_pgm};
use super::*;
use crate::alignment::SaPlacement;
use crate::autodiff::{adamw_step, AdamWConfig, OptimizerState, ParamSet, Tensor};
use crate::decoder::AdapterKind;
use crate::synth::{gen_split, gen_video, SynthSpec};
use crate::Error;

fn key_of(r: crate::Result<RunConfig>) -> String {
    match r {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_config_gives_published_defaults() {
    let c = RunConfig::parse_onto(RunConfig::default(), "").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.adapter.bottleneck_dim, 512);
    assert_eq!(c.adapter.n_slots, 4);
    assert_eq!(c.adapter.n_iters, 3);
    assert_eq!(c.adapter.n_heads, 8);
    assert_eq!(c.lambda, 0.1);
    assert_eq!(c.epochs, 5);
    assert_eq!(c.lr, 5e-5);
    assert_eq!((c.decoder.lora_rank, c.decoder.lora_alpha), (16, 64.0));
    assert_eq!(c.sa_placement, SaPlacement::LastLayer);
    c.validate().unwrap();
    RunConfig::desk().validate().unwrap();
}

#[test]
fn overrides_and_file_forms() {
    let c = RunConfig::default().with_overrides(&["lambda=0.2"]).unwrap();
    assert_eq!(c.lambda, 0.2);
    let text = "# comment\nlambda = 0.2\nadapter.n_slots = 6  # trailing\nsa_placement = all_layers\ndecoder.adapter_kind = none\n";
    let c = RunConfig::parse_onto(RunConfig::default(), text).unwrap();
    assert_eq!((c.lambda, c.adapter.n_slots), (0.2, 6));
    assert_eq!(c.sa_placement, SaPlacement::AllLayers);
    assert_eq!(c.decoder.adapter_kind, AdapterKind::None);
    let json = r#"{"lambda": 0.3, "adapter": {"n_iters": 2}, "synth.separation": 2.5}"#;
    let c = RunConfig::parse_onto(RunConfig::default(), json).unwrap();
    assert_eq!((c.lambda, c.adapter.n_iters, c.synth.separation), (0.3, 2, 2.5));
    let c = RunConfig::default().with_overrides(&["synth.domain_shift=null"]).unwrap();
    assert!(c.synth.domain_shift.is_none());
    let c = c.with_overrides(&["synth.domain_shift.bias=2"]).unwrap();
    assert_eq!(c.synth.domain_shift.unwrap().bias, 2.0);
    assert_eq!(c.synth.domain_shift.unwrap().angle, crate::synth::DomainShift::default().angle);
}

#[test]
fn config_errors_name_the_key() {
    let d = RunConfig::default;
    assert_eq!(key_of(d().with_overrides(&["adapter.n_slots=0"])), "adapter.n_slots");
    assert_eq!(key_of(d().with_overrides(&["lamda=0.1"])), "lamda");
    assert_eq!(key_of(d().with_overrides(&["adapter.bogus=1"])), "adapter.bogus");
    assert_eq!(key_of(d().with_overrides(&["epochs=many"])), "epochs");
    assert_eq!(key_of(d().with_overrides(&["lambda=-1"])), "lambda");
    assert_eq!(key_of(d().with_overrides(&["lr=0"])), "lr");
    assert_eq!(key_of(d().with_overrides(&["synth.n_tokens=10"])), "synth.n_tokens");
    assert_eq!(key_of(d().with_overrides(&["decoder.model_dim=64"])), "adapter.model_dim");
    assert_eq!(key_of(d().with_overrides(&["noequals"])), "noequals");
    assert_eq!(
        key_of(d().with_overrides(&["decoder.adapter_kind=none", "decoder.lora_layers=[]"])),
        "decoder.adapter_kind"
    );
    assert_eq!(key_of(RunConfig::preset("huge")), "preset");
}

#[test]
fn config_echo_reparses_equal() {
    let c = RunConfig::desk()
        .with_overrides(&["lambda=0.25", "seed=17", "output_dir=\"runs/x\"", "synth.domain_shift=null"])
        .unwrap();
    let echoed = c.to_json().unwrap();
    assert_eq!(RunConfig::parse_onto(RunConfig::default(), &echoed).unwrap(), c);
    assert_eq!(RunConfig::parse_onto(RunConfig::desk(), &echoed).unwrap(), c);
}

fn some_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    ps.insert_frozen("base.x", Tensor::randn(&[5], 1e-300, &mut rng)).unwrap();
    ps.insert("s", Tensor::scalar(-0.0)).unwrap();
    ps
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut ps = some_params(1);
    let mut opt = OptimizerState::new(AdamWConfig::default());
    ps.get_mut("a.w").unwrap().accumulate_grad(&[0.5; 12], 1.0).unwrap();
    ps.get_mut("s").unwrap().accumulate_grad(&[1.0], 1.0).unwrap();
    adamw_step(&mut ps, &mut opt).unwrap();
    ps.zero_grad();
    let ck = Checkpoint {
        config: RunConfig::desk(),
        params: ps.clone(),
        optimizer: Some(opt),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (name, t) in ps.iter() {
        let u = back.params.get(name).unwrap();
        assert_eq!(t.shape(), u.shape());
        assert_eq!(t.requires_grad(), u.requires_grad());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(u), "{name}");
    }
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.config, ck.config);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);

    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn svtf_round_trip_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
    let bytes = svtf_to_bytes(&x).unwrap();
    assert_eq!(&bytes[..4], b"SVTF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
    assert_eq!(bytes.len(), 20 + 4 * 60);
    // element (1, 2, 3) sits at row-major offset 1*20 + 2*5 + 3
    let off = 20 + 4 * (20 + 10 + 3);
    assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), x.at(&[1, 2, 3]) as f32);

    let y = svtf_from_bytes(&bytes).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(*a as f32, *b as f32);
    }
    // f32-representable data survives exactly, in both directions
    assert_eq!(svtf_to_bytes(&y).unwrap(), bytes);
    assert_eq!(svtf_from_bytes(&svtf_to_bytes(&y).unwrap()).unwrap(), y);

    assert!(svtf_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut nan = bytes.clone();
    nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(svtf_from_bytes(&nan).is_err());
    assert!(svtf_to_bytes(&Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn pgm_and_slot_export() {
    let pgm = slot_map_pgm(&[0, 1, 2, 3], 2, 4).unwrap();
    assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
    assert_eq!(&pgm[11..], &[0, 85, 170, 255]);

    let spec = SynthSpec {
        n_tokens: 16,
        n_frames: 3,
        min_window_frames: 1,
        max_window_frames: 2,
        ..SynthSpec::default()
    };
    let v = gen_video(&spec).unwrap();
    // one-hot attention that puts each planted type in its own slot
    let mut types: Vec<usize> = v.planted_labels.clone();
    types.sort_unstable();
    types.dedup();
    let slot_of = |l: usize| types.iter().position(|&t| t == l).unwrap();
    let s = types.len();
    let attn = Tensor::from_fn(&[3, 16, s], |i| if i % s == slot_of(v.planted_labels[i / s]) { 1.0 } else { 0.0 });
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    let assign = export_slot_maps(dir.path(), "v", &attn, Some(&v.planted_labels), &mut csv).unwrap();
    assert_eq!(crate::synth::ari(&assign, &v.planted_labels, 16).unwrap(), 1.0);
    let frame0 = std::fs::read(dir.path().join("v_f000.pgm")).unwrap();
    let body = &frame0[frame0.len() - 16..];
    for i in 0..16 {
        assert_eq!(body[i] as usize, slot_of(v.planted_labels[i]) * (255 / (s - 1)));
    }
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 48);
}

#[test]
fn composed_gradcheck_passes_on_small_instance() {
    let report = composed_gradcheck(0, 1e-4).unwrap();
    assert!(gradcheck_passed(&report), "{:?}", report.params);
    assert!(report.params.iter().any(|p| p.name.starts_with("lora.")));
    assert!(report.params.iter().any(|p| p.name.starts_with("adapter.")));
}

fn tiny_run() -> RunConfig {
    RunConfig::desk()
        .with_overrides(&[
            "synth.n_frames=4",
            "decoder.frames_per_video=4",
            "synth.min_window_frames=1",
            "synth.max_window_frames=3",
            "decoder.model_dim=16",
            "adapter.model_dim=16",
            "adapter.bottleneck_dim=8",
            "decoder.n_layers=2",
            "decoder.lora_layers=[2]",
            "n_train=6",
            "n_eval=4",
            "batch_size=3",
            "epochs=2",
            "pretrain_steps=3",
        ])
        .unwrap()
}

#[test]
fn zero_lambda_total_equals_ce() {
    let cfg = tiny_run().with_overrides(&["lambda=0"]).unwrap();
    let dec = build_decoder(&cfg).unwrap();
    let base = init_base(&cfg, &dec).unwrap();
    let mut ps = attach_tuning(&cfg, &dec, base).unwrap();
    let data: Vec<_> = gen_split(&cfg.synth, "train", 6, false).unwrap().into_iter().map(|v| v.sample).collect();
    let out = train(&dec, &mut ps, &cfg, &data, |_, _, _| Ok(())).unwrap();
    assert_eq!(out.log.len(), 4);
    for l in &out.log {
        assert_eq!(l.total, l.ce);
        assert!(l.sa.unwrap() > 0.0);
    }
}

#[test]
fn only_tuning_parameters_move() {
    let cfg = tiny_run();
    let dec = build_decoder(&cfg).unwrap();
    let base = init_base(&cfg, &dec).unwrap();
    let mut ps = attach_tuning(&cfg, &dec, base).unwrap();
    let before = ps.clone();
    let data: Vec<_> = gen_split(&cfg.synth, "train", 6, false).unwrap().into_iter().map(|v| v.sample).collect();
    train(&dec, &mut ps, &cfg, &data, |_, _, _| Ok(())).unwrap();
    for (name, t) in ps.iter() {
        let old = before.get(name).unwrap();
        if name.starts_with("base.") {
            assert_eq!(t.data(), old.data(), "{name}");
            assert!(!t.requires_grad());
        }
    }
    assert!(ps.get("adapter.l1.w_up").unwrap().data() != before.get("adapter.l1.w_up").unwrap().data());
    assert!(ps.get("lora.l2.wq.b").unwrap().data() != before.get("lora.l2.wq.b").unwrap().data());
}

#[test]
fn full_run_writes_reproducible_artifacts() {
    let cfg = tiny_run();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = cli::run_train(&cfg, a.path(), None).unwrap();
    cli::run_train(&cfg, b.path(), None).unwrap();
    assert_eq!(sa.steps, 4);
    for f in ["config.json", "pretrain.jsonl", "train.jsonl", "checkpoint.ckpt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.path().join("train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "ce", "sa", "total"] {
        assert!(first.get(k).is_some(), "{k}");
    }
    let echoed = std::fs::read_to_string(a.path().join("config.json")).unwrap();
    assert_eq!(RunConfig::parse_onto(RunConfig::default(), &echoed).unwrap(), cfg);

    let ck = Checkpoint::load(&a.path().join("checkpoint.ckpt")).unwrap();
    let dec = build_decoder(&ck.config).unwrap();
    let data: Vec<_> = gen_split(&cfg.synth, "eval", 4, false).unwrap().into_iter().map(|v| v.sample).collect();
    let r1 = evaluate(&dec, &ck.params, &data, false).unwrap();
    let r2 = evaluate(&dec, &ck.params, &data, false).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(metrics_from_records(&r1.records).unwrap(), r1.metrics);
    assert!(evaluate(&dec, &ck.params, &[], false).is_err());

    // reusing the pretrained base skips pretraining but trains identically
    let c = tempfile::tempdir().unwrap();
    cli::run_train(&cfg, c.path(), Some(&a.path().join("checkpoint.ckpt"))).unwrap();
    assert!(!c.path().join("pretrain.jsonl").exists());
    assert_eq!(
        std::fs::read(a.path().join("train.jsonl")).unwrap(),
        std::fs::read(c.path().join("train.jsonl")).unwrap()
    );
}

#[test]
fn untrainable_configuration_is_rejected() {
    let r = RunConfig::desk().with_overrides(&["decoder.adapter_kind=none", "decoder.lora_layers=[]"]);
    assert_eq!(key_of(r), "decoder.adapter_kind");
}
