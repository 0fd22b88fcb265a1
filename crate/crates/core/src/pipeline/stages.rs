//! CLI stages. Each reads the previous stage's files from the output
//! directory, checks that they were produced under the same settings, and
//! writes its own outputs atomically.

use super::{
    accounting, evaluate, quantize_model, EvalMetrics, EvalSet, PackedModelFile, Report, RunConfig,
    Stage,
};
use crate::allocator::{
    allocate_layers, allocation_record, baseline_cost, hessian_sensitivity, AllocationFile,
    CostInputs, CostKind,
};
use crate::error::{Error, Result};
use crate::importance::{
    errors_from_json, errors_to_json, stats_from_json, stats_to_json, Calibration, CalibrationSet,
    Provenance, QuantErrorTable,
};
use crate::moe::{checkpoint, gen_synthetic_model, MarkovCorpus, MoEModel, TeacherLog};
use crate::otp::{train_router, OtpMasker, RouterSet};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MODEL_CKPT: &str = "model.ckpt";
pub const GEN_JSON: &str = "gen.json";
pub const STATS_JSON: &str = "stats.json";
pub const ERRORS_JSON: &str = "errors.json";
pub const ALLOCATION_JSON: &str = "allocation.json";
pub const PACKED_MODEL: &str = "model.mcsh";
pub const PACKED_MODEL_OTP: &str = "model_otp.mcsh";
pub const ROUTERS_JSON: &str = "routers.json";
pub const CURVE_CSV: &str = "router_curve.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const TIMESTAMPS_JSON: &str = "timestamps.json";

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A stage output tagged with the hash of the settings it depends on.
#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    #[serde(rename = "data")]
    body: T,
}

fn path_in(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(cfg: &RunConfig, name: &str, stage: Stage, body: T) -> Result<()> {
    let s = Stamped {
        config_hash: cfg.stage_hash(stage),
        body,
    };
    write_atomic(
        &path_in(cfg, name),
        serde_json::to_string_pretty(&s)?.as_bytes(),
    )
}

fn check_hash(cfg: &RunConfig, name: &str, stage: Stage, found: &str) -> Result<()> {
    let want = cfg.stage_hash(stage);
    if found != want {
        return Err(Error::Config(format!(
            "config hash mismatch for {name}: file has {found}, current settings give {want}; rerun the {stage:?} stage"
        )));
    }
    Ok(())
}

fn read_json<T: DeserializeOwned>(cfg: &RunConfig, name: &str, stage: Stage) -> Result<T> {
    let bytes = read_input(&path_in(cfg, name))?;
    let s: Stamped<T> = serde_json::from_slice(&bytes)?;
    check_hash(cfg, name, stage, &s.config_hash)?;
    Ok(s.body)
}

/// Records when a stage last ran. Timestamps live only here so the other
/// outputs stay byte-identical across reruns.
fn touch(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let p = path_in(cfg, TIMESTAMPS_JSON);
    let mut map: serde_json::Map<String, serde_json::Value> = std::fs::read(&p)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    map.insert(format!("{stage:?}"), now.into());
    write_atomic(&p, serde_json::to_string_pretty(&map)?.as_bytes())
}

pub fn corpus(cfg: &RunConfig) -> MarkovCorpus {
    MarkovCorpus::new(cfg.model.vocab, cfg.model.seed)
}

pub fn calibration_set(cfg: &RunConfig) -> CalibrationSet {
    CalibrationSet::sample(
        &corpus(cfg),
        cfg.calibration_tokens,
        cfg.calibration_seq_len,
        cfg.seeds.calibration,
    )
}

pub fn eval_set(cfg: &RunConfig) -> EvalSet {
    EvalSet::sample(
        &corpus(cfg),
        cfg.eval_sequences,
        cfg.eval_seq_len,
        cfg.seeds.eval,
    )
}

fn load_model(cfg: &RunConfig) -> Result<MoEModel> {
    let _: GenInfo = read_json(cfg, GEN_JSON, Stage::Gen)?;
    let p = path_in(cfg, MODEL_CKPT);
    if !p.exists() {
        return Err(Error::MissingInput(format!(
            "{} (run gen first)",
            p.display()
        )));
    }
    checkpoint::load(&p)
}

#[derive(Serialize, Deserialize)]
struct GenInfo {
    teacher: TeacherLog,
    num_params: usize,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let (model, log) = gen_synthetic_model(&cfg.model, &cfg.teacher)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    checkpoint::save(&model, &path_in(cfg, MODEL_CKPT))?;
    write_json(
        cfg,
        GEN_JSON,
        Stage::Gen,
        GenInfo {
            teacher: log,
            num_params: model.num_params(),
        },
    )?;
    touch(cfg, Stage::Gen)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let cal = Calibration::collect(&model, &calibration_set(cfg))?;
    let errors = cal.quant_error_table(&model, cfg.group_size)?;
    let prov = Provenance {
        config_hash: cfg.stage_hash(Stage::Calibrate),
        seed: cfg.seeds.calibration,
    };
    write_atomic(
        &path_in(cfg, STATS_JSON),
        stats_to_json(&cal.stats, &prov)?.as_bytes(),
    )?;
    write_atomic(
        &path_in(cfg, ERRORS_JSON),
        errors_to_json(&errors, &prov)?.as_bytes(),
    )?;
    touch(cfg, Stage::Calibrate)
}

/// Model, calibration pass and the stored error table.
struct Calibrated {
    model: MoEModel,
    cal: Calibration,
    errors: QuantErrorTable,
}

fn load_calibrated(cfg: &RunConfig) -> Result<Calibrated> {
    let model = load_model(cfg)?;
    let (stats, sp) = stats_from_json(&String::from_utf8_lossy(&read_input(&path_in(
        cfg, STATS_JSON,
    ))?))?;
    check_hash(cfg, STATS_JSON, Stage::Calibrate, &sp.config_hash)?;
    let (errors, ep) = errors_from_json(&String::from_utf8_lossy(&read_input(&path_in(
        cfg,
        ERRORS_JSON,
    ))?))?;
    check_hash(cfg, ERRORS_JSON, Stage::Calibrate, &ep.config_hash)?;
    let cal = Calibration::collect(&model, &calibration_set(cfg))?;
    if cal.stats != stats {
        return Err(Error::Format(
            "stored statistics differ from a fresh calibration pass".into(),
        ));
    }
    Ok(Calibrated { model, cal, errors })
}

/// Per-layer bit widths for `kind` at `b_avg`.
fn allocate_bits(
    cfg: &RunConfig,
    c: &Calibrated,
    kind: CostKind,
    b_avg: f64,
) -> Result<(Vec<Vec<u8>>, AllocationFile)> {
    let hessian = match kind {
        CostKind::Hessian => Some(hessian_sensitivity(&c.model, &c.cal, cfg.group_size)?),
        _ => None,
    };
    let inputs = CostInputs {
        stats: &c.cal.stats,
        errors: &c.errors,
        hessian: hessian.as_ref(),
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma: cfg.gamma,
        seed: cfg.seeds.baseline,
    };
    let costs = baseline_cost(kind, &inputs)?;
    let allocs = allocate_layers(&costs, b_avg, cfg.coverage, cfg.global_budget)?;
    let bits = allocs.iter().map(|a| a.bits.clone()).collect();
    Ok((
        bits,
        allocation_record(&allocs, kind, (cfg.alpha, cfg.beta, cfg.gamma)),
    ))
}

#[derive(Serialize, Deserialize)]
struct AllocationOut {
    b_avg: f64,
    cost_kind: CostKind,
    layers: AllocationFile,
}

pub fn cmd_allocate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let c = load_calibrated(cfg)?;
    let (_, layers) = allocate_bits(cfg, &c, cfg.cost_kind, cfg.b_avg)?;
    write_json(
        cfg,
        ALLOCATION_JSON,
        Stage::Allocate,
        AllocationOut {
            b_avg: cfg.b_avg,
            cost_kind: cfg.cost_kind,
            layers,
        },
    )?;
    touch(cfg, Stage::Allocate)
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let alloc: AllocationOut = read_json(cfg, ALLOCATION_JSON, Stage::Allocate)?;
    let bits: Vec<Vec<u8>> = alloc.layers.values().map(|r| r.bits.clone()).collect();
    let model = load_model(cfg)?;
    let cal = match cfg.quantizer {
        super::Quantizer::Gptq => Some(Calibration::collect(&model, &calibration_set(cfg))?),
        super::Quantizer::Rtn => None,
    };
    let q = quantize_model(
        &model,
        &bits,
        cfg.quantizer,
        cal.as_ref(),
        cfg.group_size,
        cfg.backbone_bits,
    )?;
    let file = PackedModelFile {
        quantized: q,
        routers: None,
        config_hash: cfg.stage_hash(Stage::Quantize),
    };
    file.save(&path_in(cfg, PACKED_MODEL))?;
    touch(cfg, Stage::Quantize)
}

fn load_packed(cfg: &RunConfig, name: &str, stage: Stage) -> Result<PackedModelFile> {
    let f = PackedModelFile::load(&path_in(cfg, name))?;
    check_hash(cfg, name, stage, &f.config_hash)?;
    Ok(f)
}

pub fn cmd_train_router(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut file = load_packed(cfg, PACKED_MODEL, Stage::Quantize)?;
    let model = &file.quantized.model;
    let ids: Vec<usize> = (0..model.config.vocab).collect();
    // teacher: the same quantized model without masks
    let teacher = model.logits(&ids)?;
    let tokens: Vec<usize> = calibration_set(cfg).sequences.concat();
    let mut otp = cfg.otp.clone();
    otp.seed = cfg.seeds.router;
    let outcome = train_router(model, &teacher, &tokens, &otp)?;
    let hash = cfg.stage_hash(Stage::TrainRouter);
    write_atomic(&path_in(cfg, CURVE_CSV), outcome.curve_csv().as_bytes())?;
    write_json(
        cfg,
        ROUTERS_JSON,
        Stage::TrainRouter,
        serde_json::from_str::<serde_json::Value>(&outcome.routers.to_json()?)?,
    )?;
    file.routers = Some(outcome.routers);
    file.config_hash = hash;
    file.save(&path_in(cfg, PACKED_MODEL_OTP))?;
    touch(cfg, Stage::TrainRouter)?;
    match outcome.diverged_at {
        Some(step) => Err(Error::Numeric(format!(
            "router training diverged at step {step}; last finite routers saved"
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct EvalOut {
    report: Report,
    metrics: EvalMetrics,
}

/// Report for a loaded model file, with its routers applied when present.
pub fn evaluate_file(file: &PackedModelFile, set: &EvalSet, hash: &str) -> Result<Report> {
    let q = &file.quantized;
    let (metrics, ledger) = match &file.routers {
        Some(r) => {
            let mut m = OtpMasker::inference(r);
            evaluate(&q.model, set, Some(&mut m))?
        }
        None => evaluate(&q.model, set, None)?,
    };
    Ok(accounting(
        q,
        file.routers.as_ref(),
        &ledger,
        &metrics,
        hash,
    ))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let file = if cfg.otp_enabled {
        load_packed(cfg, PACKED_MODEL_OTP, Stage::TrainRouter)?
    } else {
        load_packed(cfg, PACKED_MODEL, Stage::Quantize)?
    };
    let hash = cfg.stage_hash(Stage::Eval);
    let report = evaluate_file(&file, &eval_set(cfg), &hash)?;
    let metrics = EvalMetrics {
        nll: report.eval_nll,
        perplexity: report.perplexity,
        pruning_ratio: report.pruning_ratio,
        active_experts: (1.0 - report.pruning_ratio) * cfg.model.top_k as f64,
    };
    write_json(cfg, REPORT_JSON, Stage::Eval, EvalOut { report, metrics })?;
    touch(cfg, Stage::Eval)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out: EvalOut = read_json(cfg, REPORT_JSON, Stage::Eval)?;
    let csv = format!("{}\n{}\n", Report::CSV_HEADER, out.report.csv_row());
    write_atomic(&path_in(cfg, REPORT_CSV), csv.as_bytes())?;
    let sweep: Option<Vec<SweepRow>> = std::fs::read(path_in(cfg, SWEEP_JSON))
        .ok()
        .map(|b| serde_json::from_slice::<Stamped<Vec<SweepRow>>>(&b))
        .transpose()?
        .and_then(|s| (s.config_hash == cfg.stage_hash(Stage::Calibrate)).then_some(s.body));
    let summary = serde_json::json!({
        "config_hash": out.report.config_hash,
        "report": out.report,
        "sweep": sweep,
    });
    write_atomic(
        &path_in(cfg, SUMMARY_JSON),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    touch(cfg, Stage::Eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub b_avg: f64,
    pub cost_kind: CostKind,
    pub eval_nll: f64,
    pub expert_avg_bits: f64,
    pub objective: f64,
}

/// Every cost kind at every sweep budget, quantized and evaluated.
pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let c = load_calibrated(cfg)?;
    let set = eval_set(cfg);
    let mut rows = Vec::new();
    for &b_avg in &cfg.sweep_b_avgs {
        for kind in CostKind::ALL {
            let (bits, record) = allocate_bits(cfg, &c, kind, b_avg)?;
            let q = quantize_model(
                &c.model,
                &bits,
                cfg.quantizer,
                Some(&c.cal),
                cfg.group_size,
                cfg.backbone_bits,
            )?;
            let (m, ledger) = evaluate(&q.model, &set, None)?;
            let r = accounting(&q, None, &ledger, &m, "");
            rows.push(SweepRow {
                b_avg,
                cost_kind: kind,
                eval_nll: m.nll,
                expert_avg_bits: r.expert_avg_bits,
                objective: record.values().map(|l| l.objective).sum(),
            });
        }
    }
    Ok(rows)
}

/// Wide CSV: one row per budget, `<kind>_nll` and `<kind>_bits` columns.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("b_avg");
    for k in CostKind::ALL {
        s.push_str(&format!(",{k}_nll,{k}_bits"));
    }
    s.push('\n');
    let mut budgets: Vec<f64> = rows.iter().map(|r| r.b_avg).collect();
    budgets.dedup();
    for b in budgets {
        s.push_str(&b.to_string());
        for k in CostKind::ALL {
            match rows.iter().find(|r| r.b_avg == b && r.cost_kind == k) {
                Some(r) => s.push_str(&format!(",{},{}", r.eval_nll, r.expert_avg_bits)),
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let rows = sweep_rows(cfg)?;
    write_atomic(&path_in(cfg, SWEEP_CSV), sweep_csv(&rows).as_bytes())?;
    // the sweep depends on calibration only; budgets and kinds are its axes
    write_json(cfg, SWEEP_JSON, Stage::Calibrate, rows)?;
    touch(cfg, Stage::Allocate)
}

/// Routers stored by the train-router stage.
pub fn load_routers(cfg: &RunConfig) -> Result<RouterSet> {
    let v: serde_json::Value = read_json(cfg, ROUTERS_JSON, Stage::TrainRouter)?;
    RouterSet::from_json(&v.to_string())
}
