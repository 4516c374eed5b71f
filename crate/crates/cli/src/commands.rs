use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store::{
    self, parse_sequence_id, read_dataset, read_json, write_bytes, write_dataset, write_json, CheckpointMeta,
    WindowFile, WINDOWS_FORMAT,
};
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use stpp::benchmark::{fit_baselines, score_baselines, BaselineScores, BaselineSet, SpatialKind};
use stpp::classical::{baseline_loss, BaselineMode, MleConfig, ModelKind, TemporalModel};
use stpp::events::{normalize, normalize_sequence, parse_event_csv, split_dataset, window_sequences, write_event_csv, Split};
use stpp::neural::init_params;
use stpp::rng::{streams, RngState};
use stpp::simulate::{make_pinwheel_dataset, thinning_sample, BoundStrategy, Horizon, PinwheelConfig};
use stpp::train::{
    evaluate, export_density, predict, train, write_log_csv, Ablation, GridConfig, PredictConfig, Summary, TimeSource,
};

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CliError::NonFinite(what.to_string()))
    }
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(value: &T) {
    emit(&(serde_json::to_string_pretty(value).expect("serializable") + "\n"));
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn config(preset: &str, out: Option<&Path>) -> Result<()> {
    let text = RunConfig::preset(preset)?.to_toml();
    match out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            emit(&text);
            Ok(())
        }
    }
}

pub fn simulate_pinwheel(cfg: &PinwheelConfig, hawkes: &TemporalModel<f64>, seed: u64, out: &Path) -> Result<()> {
    let mut rng = RngState::new(seed, streams::PINWHEEL);
    let events = make_pinwheel_dataset(cfg, hawkes, &mut rng)?;
    let mut buf = Vec::new();
    write_event_csv(&mut buf, &events)?;
    write_bytes(out, &buf)?;
    let manifest = json!({
        "command": "simulate pinwheel",
        "seed": seed,
        "pinwheel": cfg,
        "hawkes": hawkes,
        "events": events.len(),
        "columns": ["t", "x1", "x2", "m"],
    });
    write_json(&manifest_path(out), &manifest)?;
    print_json(&json!({ "events": events.len(), "output": out }));
    Ok(())
}

pub fn simulate_temporal(
    model: &TemporalModel<f64>,
    horizon: Horizon<f64>,
    bound: BoundStrategy,
    seed: u64,
    out: &Path,
) -> Result<()> {
    model.validate()?;
    let times = thinning_sample(model, horizon, bound, &mut RngState::new(seed, streams::SIMULATE))?;
    let mut text = String::from("t\n");
    for t in &times {
        writeln!(text, "{t}").expect("string write");
    }
    write_bytes(out, text.as_bytes())?;
    let manifest = json!({
        "command": "simulate temporal",
        "seed": seed,
        "model": model,
        "horizon": match horizon {
            Horizon::Count(n) => json!({ "count": n }),
            Horizon::Time { time, cap } => json!({ "time": time, "cap": cap }),
        },
        "events": times.len(),
        "columns": ["t"],
    });
    write_json(&manifest_path(out), &manifest)?;
    print_json(&json!({ "events": times.len(), "output": out }));
    Ok(())
}

pub fn ingest(csv: &Path, d: usize, cfg: &RunConfig, out: &Path) -> Result<()> {
    let f = std::fs::File::open(csv).map_err(|e| CliError::io(csv, e))?;
    let events = parse_event_csv(std::io::BufReader::new(f), d)?;
    cfg.validate(d)?;
    let windows = window_sequences(&events, cfg.sequence_length, cfg.overlap, cfg.input_length)?;
    let file = WindowFile {
        format: WINDOWS_FORMAT.into(),
        d,
        sequence_length: cfg.sequence_length,
        overlap: cfg.overlap,
        input_length: cfg.input_length,
        source: csv.display().to_string(),
        windows,
    };
    write_json(out, &file)?;
    print_json(&json!({ "events": events.len(), "windows": file.windows.len(), "output": out }));
    Ok(())
}

pub fn split(windows: &Path, fractions: [f64; 3], seed: u64, out: &Path) -> Result<()> {
    let file: WindowFile = read_json(windows)?;
    if file.format != WINDOWS_FORMAT {
        return Err(CliError::format(windows, format!("expected format {WINDOWS_FORMAT}, got {}", file.format)));
    }
    let ds = split_dataset(file.windows, (fractions[0], fractions[1], fractions[2]), seed)?;
    let source = json!({ "windows": windows, "sequence_length": file.sequence_length, "overlap": file.overlap });
    write_dataset(out, &ds, fractions, seed, source)?;
    print_json(&json!({ "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len(), "output": out }));
    Ok(())
}

#[derive(Serialize)]
struct BaselineArtifact {
    baselines: BaselineSet,
    lambda1: f64,
    lambda2: f64,
    /// Training objective per window: history and output NLL plus regularizers.
    train_objective: Summary,
    val: BaselineScores,
}

pub fn fit_baseline(
    data: &Path,
    time: Option<ModelKind>,
    space: Option<SpatialKind>,
    lambdas: (f64, f64),
    seed: u64,
    out: &Path,
) -> Result<()> {
    if time.is_none() && space.is_none() {
        return Err(CliError::Usage("choose at least one of --time and --space".into()));
    }
    let ds = normalize(&read_dataset(data)?);
    let set = fit_baselines(&ds.train, time, space, &MleConfig::default(), seed)?;
    let mut objective = Vec::with_capacity(ds.train.len());
    for s in &ds.train {
        let r = baseline_loss(
            set.time.as_ref().map(|f| &f.model),
            set.space.as_ref(),
            &s.scaled_times(),
            &s.x,
            s.n_in,
            lambdas.0,
            lambdas.1,
            BaselineMode::Train,
        )?;
        objective.push(r.total);
    }
    let artifact = BaselineArtifact {
        val: score_baselines(&set, &ds.val)?,
        baselines: set,
        lambda1: lambdas.0,
        lambda2: lambdas.1,
        train_objective: Summary::of(&objective),
    };
    ensure_finite("baseline objective", [artifact.train_objective.mean])?;
    write_json(out, &artifact)?;
    print_json(&json!({ "train_objective": artifact.train_objective, "val": artifact.val, "output": out }));
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let (raw, data_dir) = match &cfg.paths.data {
        Some(dir) => (read_dataset(dir)?, dir.clone()),
        None => {
            cfg.validate(2)?;
            let mut rng = RngState::new(cfg.seed, streams::PINWHEEL);
            let events = make_pinwheel_dataset(&cfg.data.pinwheel, &cfg.data.hawkes, &mut rng)?;
            let windows = window_sequences(&events, cfg.sequence_length, cfg.overlap, cfg.input_length)?;
            let ds = split_dataset(windows, cfg.fractions(), cfg.seed)?;
            let dir = out.join("data");
            let source = json!({ "pinwheel": cfg.data.pinwheel, "hawkes": cfg.data.hawkes, "seed": cfg.seed });
            write_dataset(&dir, &ds, cfg.fractions, cfg.seed, source)?;
            (ds, dir)
        }
    };
    // Recorded in checkpoints, so it must not depend on the working directory.
    let data_dir = std::fs::canonicalize(&data_dir).map_err(|e| CliError::io(&data_dir, e))?;
    cfg.validate(raw.d)?;
    if raw.n_in() != cfg.input_length || raw.l_out() != cfg.output_length {
        return Err(CliError::Config(vec![format!(
            "dataset windows have {} inputs and {} outputs, the config asks for {} and {}",
            raw.n_in(),
            raw.l_out(),
            cfg.input_length,
            cfg.output_length
        )]));
    }
    let data = normalize(&raw);
    let net = cfg.net(raw.d);
    let tcfg = cfg.train();
    let init = init_params::<f64>(&net, &mut RngState::new(cfg.seed, streams::INIT))?;
    let outcome = train(&init, &data, &net, &tcfg)?;

    let meta = |epoch_time, epoch_space| CheckpointMeta {
        net: net.clone(),
        stats: raw.stats.clone(),
        data: data_dir.clone(),
        ablation: cfg.ablation,
        epoch_time,
        epoch_space,
        seed: cfg.seed,
    };
    let last_epoch = outcome.log.last().map_or(0, |r| r.epoch);
    store::save_ckpt(&out.join("best.stpp1"), &outcome.best, &meta(outcome.best_epoch_time, outcome.best_epoch_space))?;
    store::save_ckpt(&out.join("last.stpp1"), &outcome.last, &meta(last_epoch, last_epoch))?;
    let mut log = Vec::new();
    write_log_csv(&outcome.log, &mut log)?;
    write_bytes(&out.join("history.csv"), &log)?;
    write_bytes(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let summary = json!({
        "best_val": outcome.best_val,
        "best_epoch_time": outcome.best_epoch_time,
        "best_epoch_space": outcome.best_epoch_space,
        "epochs_run": last_epoch,
        "first_val": outcome.log.first().map(|r| r.val_loss),
        "last_val": outcome.log.last().map(|r| r.val_loss),
        "aborted": outcome.aborted,
        "data": data_dir,
    });
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(reason) = &outcome.aborted {
        return Err(CliError::NonFinite(format!("training stopped early: {reason}")));
    }
    ensure_finite("validation loss", outcome.log.iter().map(|r| r.val_loss).chain([outcome.best_val]))?;
    print_json(&summary);
    Ok(())
}

/// One row of the results table.
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub model: String,
    pub nll_time: Option<Summary>,
    pub nll_space: Option<Summary>,
    pub nll_joint: Option<Summary>,
}

/// A model name accepted by `evaluate --model`.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalModel {
    Temporal(ModelKind),
    Spatial(SpatialKind),
    Network,
}

impl std::str::FromStr for EvalModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "network" {
            return Ok(Self::Network);
        }
        s.parse::<ModelKind>()
            .map(Self::Temporal)
            .or_else(|_| s.parse::<SpatialKind>().map(Self::Spatial))
            .map_err(|_| format!("unknown model `{s}` (homo-poisson, hawkes, self-correcting, gaussian, conditional-gmm, kcluster:K, network)"))
    }
}

pub struct EvalArgs {
    pub models: Vec<(String, EvalModel)>,
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub split: Split,
    pub raw_units: bool,
    pub ablation: Option<Ablation>,
    pub time_source: TimeSource,
    pub n_samples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn fmt_summary(s: &Option<Summary>) -> String {
    s.map_or_else(|| "-".into(), |s| format!("{:.4}±{:.4}", s.mean, s.std))
}

pub fn format_table(rows: &[TableRow]) -> String {
    let mut text = String::from("model, nll_time±std, nll_space±std, nll_joint±std\n");
    for r in rows {
        writeln!(
            text,
            "{}, {}, {}, {}",
            r.model,
            fmt_summary(&r.nll_time),
            fmt_summary(&r.nll_space),
            fmt_summary(&r.nll_joint)
        )
        .expect("string write");
    }
    text
}

pub fn evaluate_cmd(args: &EvalArgs) -> Result<()> {
    let ckpt = match &args.ckpt {
        Some(p) => Some(store::load_ckpt(p)?),
        None => None,
    };
    let data_dir = args
        .data
        .clone()
        .or_else(|| ckpt.as_ref().map(|c| c.1.data.clone()))
        .ok_or_else(|| CliError::Usage("--data is required without --ckpt".into()))?;
    let raw = read_dataset(&data_dir)?;
    let ds = normalize(&raw);
    let seqs = ds.split(args.split);
    if seqs.is_empty() {
        return Err(CliError::Usage(format!("the {:?} split is empty", args.split)));
    }
    let mut rows = Vec::new();
    for (name, model) in &args.models {
        let row = match model {
            EvalModel::Network => {
                let (store, meta) = ckpt
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--model network needs --ckpt".into()))?;
                let ablation = args.ablation.unwrap_or(meta.ablation);
                let rep = evaluate(store, &meta.net, seqs, ablation, args.time_source, args.n_samples, args.seed)?;
                TableRow {
                    model: name.clone(),
                    nll_time: Some(rep.nll_time),
                    nll_space: Some(rep.nll_space),
                    nll_joint: Some(rep.nll_joint),
                }
            }
            EvalModel::Temporal(kind) => baseline_row(name, &ds.train, seqs, Some(*kind), None, args)?,
            EvalModel::Spatial(kind) => baseline_row(name, &ds.train, seqs, None, Some(*kind), args)?,
        };
        rows.push(row);
    }
    if args.raw_units {
        let (ct, cs) = raw.stats.nll_offsets();
        for row in &mut rows {
            row.nll_time = row.nll_time.map(|s| s.shifted(ct));
            row.nll_space = row.nll_space.map(|s| s.shifted(cs));
            row.nll_joint = row.nll_joint.map(|s| s.shifted(ct + cs));
        }
    }
    ensure_finite(
        "evaluation",
        rows.iter()
            .flat_map(|r| [r.nll_time, r.nll_space, r.nll_joint])
            .flatten()
            .flat_map(|s| [s.mean, s.std]),
    )?;
    emit(&format_table(&rows));
    if let Some(out) = &args.out {
        write_json(out, &json!({ "split": args.split, "raw_units": args.raw_units, "rows": rows }))?;
    }
    Ok(())
}

fn baseline_row(
    name: &str,
    train: &[stpp::events::NormalizedSequence],
    seqs: &[stpp::events::NormalizedSequence],
    time: Option<ModelKind>,
    space: Option<SpatialKind>,
    args: &EvalArgs,
) -> Result<TableRow> {
    let set = fit_baselines(train, time, space, &MleConfig::default(), args.seed)?;
    let scores = score_baselines(&set, seqs)?;
    Ok(TableRow { model: name.to_string(), nll_time: scores.nll_time, nll_space: scores.nll_space, nll_joint: None })
}

pub struct SeqArgs {
    pub ckpt: PathBuf,
    pub data: Option<PathBuf>,
    pub seq: String,
    pub ablation: Option<Ablation>,
}

fn load_sequence(args: &SeqArgs) -> Result<(stpp::ParamStore64, CheckpointMeta, stpp::events::NormalizedSequence)> {
    let (store, meta) = store::load_ckpt(&args.ckpt)?;
    let dir = args.data.clone().unwrap_or_else(|| meta.data.clone());
    let raw = read_dataset(&dir)?;
    let (split, idx) = parse_sequence_id(&args.seq)?;
    let seqs = raw.split(split);
    let seq = seqs
        .get(idx)
        .ok_or_else(|| CliError::Usage(format!("{} has only {} sequences", args.seq, seqs.len())))?;
    // The checkpoint's statistics define the network's units.
    let norm = normalize_sequence(seq, &meta.stats);
    Ok((store, meta, norm))
}

pub fn predict_cmd(args: &SeqArgs, pcfg: &PredictConfig, out: Option<&Path>) -> Result<()> {
    let (store, meta, seq) = load_sequence(args)?;
    let ablation = args.ablation.unwrap_or(meta.ablation);
    let p = predict(&store, &meta.net, &meta.stats, &seq, ablation, pcfg)?;
    ensure_finite(
        "prediction",
        p.t_hat.iter().chain(p.x_hat.iter().flatten()).copied().chain([p.nll.time, p.nll.space, p.nll.joint]),
    )?;
    let value = json!({ "sequence": args.seq, "prediction": p });
    match out {
        Some(path) => write_json(path, &value),
        None => {
            print_json(&value);
            Ok(())
        }
    }
}

pub fn export_density_cmd(args: &SeqArgs, gcfg: &GridConfig, out: &Path) -> Result<()> {
    let (store, meta, seq) = load_sequence(args)?;
    let ablation = args.ablation.unwrap_or(meta.ablation);
    let export = export_density(&store, &meta.net, &meta.stats, &seq, ablation, gcfg)?;
    if export.slots.iter().flat_map(|g| &g.logp).any(|v| v.is_nan()) {
        return Err(CliError::NonFinite("density grid".into()));
    }
    write_json(out, &json!({ "sequence": args.seq, "density": export }))?;
    print_json(&json!({ "slots": export.slots.len(), "differences": export.differences.len(), "output": out }));
    Ok(())
}
