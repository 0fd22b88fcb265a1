use mcsh::moe::{MoEConfig, MoEModel, ParamId};
use mcsh::otp::{median_ratio_thresholds, RandomPruner, RouterSet, RulePruner};
use mcsh::pipeline::{
    accounting, evaluate, quantize_model, EvalSet, PackedModelFile, Quantizer, Report, RunConfig,
    Stage,
};
use mcsh::Error;
use std::path::Path;
use std::process::Command;

fn toy_config() -> MoEConfig {
    MoEConfig {
        num_layers: 2,
        hidden: 16,
        ffn_inner: 24,
        num_experts: 4,
        top_k: 2,
        vocab: 32,
        num_shared_experts: 1,
        seed: 3,
    }
}

fn eval_set() -> EvalSet {
    let seqs: Vec<Vec<usize>> = (0..6)
        .map(|s| (0..20).map(|i| (i * 7 + s * 3) % 32).collect())
        .collect();
    EvalSet::from_sequences(&seqs)
}

fn packed_file(bits: u8, backbone: Option<u8>, routers: Option<RouterSet>) -> PackedModelFile {
    let model = MoEModel::random(&toy_config()).unwrap();
    let alloc = vec![vec![bits; 4]; 2];
    PackedModelFile {
        quantized: quantize_model(&model, &alloc, Quantizer::Rtn, None, 8, backbone).unwrap(),
        routers,
        config_hash: "abc".into(),
    }
}

#[test]
fn file_round_trip_reproduces_eval_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mcsh");
    let f = packed_file(2, Some(4), Some(RouterSet::random(2, 16, 2, 0.3, 1)));
    f.save(&path).unwrap();
    let g = PackedModelFile::load(&path).unwrap();
    assert_eq!(g.config_hash, "abc");
    assert_eq!(g.routers, f.routers);
    assert_eq!(g.quantized.packed, f.quantized.packed);
    let set = eval_set();
    let run = |file: &PackedModelFile| {
        let mut m = mcsh::otp::OtpMasker::inference(file.routers.as_ref().unwrap());
        evaluate(&file.quantized.model, &set, Some(&mut m))
            .unwrap()
            .0
    };
    let (a, b) = (run(&f), run(&g));
    assert_eq!(a.nll.to_bits(), b.nll.to_bits());
    assert_eq!(a.pruning_ratio, b.pruning_ratio);
    assert_eq!(f.to_bytes().unwrap(), g.to_bytes().unwrap());
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = packed_file(3, None, None).to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let err = PackedModelFile::from_bytes(&flipped).unwrap_err();
    assert!(
        matches!(err, Error::Format(ref m) if m.contains("checksum")),
        "{err}"
    );
    assert!(PackedModelFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(PackedModelFile::from_bytes(b"MCSH").is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(PackedModelFile::from_bytes(&magic).is_err());
}

#[test]
fn missing_file_is_missing_input() {
    let err = PackedModelFile::load(Path::new("/nonexistent/model.mcsh")).unwrap_err();
    assert!(matches!(err, Error::MissingInput(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn config_validation_and_hashes() {
    let base = RunConfig::default();
    base.validate().unwrap();
    let cfg = RunConfig::from_json(&base.to_json().unwrap()).unwrap();
    assert_eq!(cfg, base);

    for bad in [
        r#"{"b_avg": 4.0}"#,
        r#"{"alpha": -1}"#,
        r#"{"unknown": 1}"#,
        r#"{"otp": {"lambda": -2}}"#,
    ] {
        let err = RunConfig::from_json(bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        assert_eq!(err.exit_code(), 2);
    }

    let other = RunConfig {
        b_avg: 2.5,
        ..base.clone()
    };
    assert_eq!(
        base.stage_hash(Stage::Calibrate),
        other.stage_hash(Stage::Calibrate)
    );
    assert_ne!(
        base.stage_hash(Stage::Allocate),
        other.stage_hash(Stage::Allocate)
    );
    assert_ne!(base.stage_hash(Stage::Eval), other.stage_hash(Stage::Eval));
    let moved = RunConfig {
        out_dir: "elsewhere".into(),
        ..base.clone()
    };
    assert_eq!(base.stage_hash(Stage::Eval), moved.stage_hash(Stage::Eval));
    assert_ne!(
        base.clone().with_seed(1).stage_hash(Stage::Gen),
        base.stage_hash(Stage::Gen)
    );
}

#[test]
fn three_bit_expert_storage() {
    let f = packed_file(3, None, None);
    let q = &f.quantized;
    for l in 0..2 {
        for e in 0..4 {
            let mut want = 0;
            for w in 0..3 {
                let p = &q.packed[&ParamId::Expert {
                    layer: l,
                    expert: e,
                    w,
                }];
                let n = (p.d * p.m) as u64;
                assert_eq!(p.payload.len() as u64, (3 * n).div_ceil(8));
                let groups = p.d.div_ceil(8) as u64 * p.m as u64;
                want += (3 * n).div_ceil(8) + 9 * groups;
            }
            assert_eq!(q.expert_bytes(l, e), want);
        }
    }
    let (m, ledger) = evaluate(&q.model, &eval_set(), None).unwrap();
    let r = accounting(q, None, &ledger, &m, "h");
    assert_eq!(r.expert_nominal_bits, 3.0);
    assert_eq!(r.pruning_ratio, 0.0);
    // every expert has the same size, so two slots cost two experts
    let per = q.expert_bytes(0, 0) as f64 * 2.0 * 2.0;
    assert!((r.unpruned_expert_bytes_per_token - per).abs() < 1e-9);
    assert_eq!(
        r.activated_expert_bytes_per_token,
        r.unpruned_expert_bytes_per_token
    );
    assert_eq!(r.fp64_bytes, 8 * q.model.num_params() as u64);
}

#[test]
fn pruning_half_the_second_slots_scales_expert_bytes() {
    // one layer, so thresholds from the unpruned pass apply unchanged
    let model = MoEModel::random(&MoEConfig {
        num_layers: 1,
        ..toy_config()
    })
    .unwrap();
    let q = &quantize_model(&model, &[vec![2; 4]], Quantizer::Rtn, None, 8, None).unwrap();
    let ids: Vec<usize> = (0..32).collect();
    let set = EvalSet {
        inputs: ids.clone(),
        targets: ids.iter().map(|i| (i + 1) % 32).collect(),
    };
    let mu = median_ratio_thresholds(&q.model, &ids).unwrap();
    let (m, ledger) = evaluate(&q.model, &set, Some(&mut RulePruner { mu })).unwrap();
    let r = accounting(q, None, &ledger, &m, "h");
    assert!((r.pruning_ratio - 0.25).abs() < 1e-12);
    let ratio = r.activated_expert_bytes_per_token / r.unpruned_expert_bytes_per_token;
    assert!((ratio - 0.75).abs() < 1e-12, "{ratio}");
}

#[test]
fn report_totals_and_macs() {
    let f = packed_file(1, Some(4), None);
    let q = &f.quantized;
    let (m, full) = evaluate(&q.model, &eval_set(), None).unwrap();
    let r = accounting(q, None, &full, &m, "h");
    let sections: u64 = q
        .model
        .param_ids()
        .iter()
        .map(|id| match q.packed.get(id) {
            Some(p) => p.storage_bytes(),
            None => 8 * q.model.param(*id).len() as u64,
        })
        .sum();
    assert_eq!(r.total_bytes, sections);
    assert!((r.compression_ratio - r.fp64_bytes as f64 / r.total_bytes as f64).abs() < 1e-12);

    let (m2, half) = evaluate(
        &q.model,
        &eval_set(),
        Some(&mut RandomPruner::new(1.0, 0).unwrap()),
    )
    .unwrap();
    let r2 = accounting(q, None, &half, &m2, "h");
    assert_eq!(r2.pruning_ratio, 0.5);
    // binary experts cost one multiplication per output column
    let expert_mults = 2.0 * (24.0 + 24.0 + 16.0);
    assert!(
        (r.multiplications_per_token - r2.multiplications_per_token - expert_mults).abs() < 1e-9
    );

    let line = r.csv_row();
    assert_eq!(
        line.split(',').count(),
        Report::CSV_HEADER.split(',').count()
    );
}

fn cli(args: &[&str], cfg: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mcsh"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_stages_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("run");
    std::fs::write(
        &cfg,
        r#"{
            "model": {"num_layers": 2, "hidden": 8, "ffn_inner": 16, "num_experts": 4, "top_k": 2,
                      "vocab": 32, "num_shared_experts": 0, "seed": 1},
            "teacher": {"steps": 20, "batch": 16, "corpus_sequences": 32, "seq_len": 16},
            "calibration_tokens": 256, "calibration_seq_len": 16,
            "eval_sequences": 16, "eval_seq_len": 16, "group_size": 8,
            "otp": {"steps": 5, "batch": 8},
            "sweep_b_avgs": [1.75, 2.0]
        }"#,
    )
    .unwrap();
    let code = |o: &std::process::Output| o.status.code().unwrap();

    assert_eq!(code(&cli(&["calibrate"], &cfg, &out)), 1, "missing inputs");
    for stage in ["gen", "calibrate", "allocate", "quantize", "eval"] {
        let o = cli(&[stage], &cfg, &out);
        assert_eq!(
            code(&o),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let first = std::fs::read(out.join("model.mcsh")).unwrap();
    let report = std::fs::read(out.join("report.json")).unwrap();
    for stage in ["quantize", "eval"] {
        assert_eq!(code(&cli(&[stage], &cfg, &out)), 0);
    }
    assert_eq!(std::fs::read(out.join("model.mcsh")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), report);

    assert_eq!(
        code(&cli(&["quantize", "--b-avg", "2.5"], &cfg, &out)),
        2,
        "stale allocation"
    );
    assert_eq!(
        code(&cli(&["allocate", "--b-avg", "1.0"], &cfg, &out)),
        3,
        "infeasible budget"
    );
    assert_eq!(
        code(&cli(&["allocate", "--cost-kind", "nope"], &cfg, &out)),
        2
    );

    for stage in ["train-router", "report", "sweep"] {
        let o = cli(&[stage], &cfg, &out);
        assert_eq!(
            code(&o),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(code(&cli(&["eval", "--otp", "on"], &cfg, &out)), 0);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("b_avg,pmq_nll,pmq_bits,frequency_nll"));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with(Report::CSV_HEADER));
}
