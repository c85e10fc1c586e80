mod plot;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use vlaad_core::datakit::{
    assemble_clips, augment_collision_position, generate_synthetic_dataset, load_manifest, write_manifest,
    Captioner, ClipRecord, FrameStream, HttpSummarizer, InfractionLog, Split, StubSummarizer, SummarizerClient,
    SynthConfig,
};
use vlaad_core::embeddings::{CachedEncoder, EmbeddingCache, Encoder, StubEncoder};
use vlaad_core::evalkit::{
    read_run_records, roc_auc, summarize_run, threshold_metrics, wilcoxon_signed_rank_with, youden_threshold,
    LeaderboardVersion, ScoredSet, WilcoxonOptions, EXACT_MAX_N,
};
use vlaad_core::inference::{
    make_global_state, score_clip_trace, write_trace_csv, CausalBuffer, DEFAULT_BUFFER_FRAMES,
    DEFAULT_SUBSAMPLE_PERIOD, DEFAULT_TICK_RATE_HZ,
};
use vlaad_core::mil::{clip_level_bag, segment_clip, DEFAULT_SNIPPET_LEN, DEFAULT_STRIDE};
use vlaad_core::model::{forward_bag, ModelCheckpoint};
use vlaad_core::trainer::{split_dataset, train, write_history_csv, TrainConfig, TrainMode};
use vlaad_core::VlaadError;

/// Stub encoder seed shared by every subcommand, so checkpoints trained on
/// stub embeddings score the same embeddings later.
const STUB_ENCODER_SEED: u64 = 0;
const SUMMARIZER_TIMEOUT: Duration = Duration::from_secs(60);

/// A bad input, flag or configuration value (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "vlaad", version, about = "Collision-risk detection from weakly labelled driving clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature-level manifest
    Synth(SynthArgs),
    /// Validate an external manifest, or assemble clips from a frame stream and infraction log
    Ingest(IngestArgs),
    /// Caption manifest clips through a summarizer
    Caption(CaptionArgs),
    /// Train adapter and detector heads
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and report AUC, F1 and accuracy
    Eval(EvalArgs),
    /// Stream per-tick risk tokens from NDJSON frames on stdin
    Infer(InferArgs),
    /// Write per-snippet risk traces as CSV, or plot a trace CSV as SVG
    Trace(TraceArgs),
    /// Compute driving scores from closed-loop run records
    Score(ScoreArgs),
    /// One-sided Wilcoxon signed-rank test on paired differences
    Wilcoxon(WilcoxonArgs),
}

#[derive(Args, Debug)]
struct EncoderArgs {
    /// Precomputed embedding cache; implies VLAAD_ENCODER=cached when the variable is unset
    #[arg(long, value_name = "PATH")]
    embedding_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON file with SynthConfig keys
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_collision: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Mean shift of event snippets
    #[arg(long)]
    separation: Option<f64>,
    /// Event length in snippets
    #[arg(long)]
    event_window: Option<usize>,
    /// Snippets per clip
    #[arg(long)]
    snippets: Option<usize>,
    #[arg(long)]
    snippet_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. --set separation=0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Fraction of each class tagged split=test
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Output manifest
    #[arg(short, long, value_name = "PATH")]
    output: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["manifest", "stream"]))]
struct IngestArgs {
    /// External manifest to validate; frame paths are resolved and inlined
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Frame stream JSON {"stream_id", "frames"}
    #[arg(long, value_name = "PATH", requires = "infractions")]
    stream: Option<PathBuf>,
    /// Infraction logs, one JSON object per line
    #[arg(long, value_name = "PATH", requires = "stream")]
    infractions: Option<PathBuf>,
    /// Re-cropped copies per positive clip
    #[arg(long, value_name = "COPIES", requires = "stream")]
    augment: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest
    #[arg(short, long, value_name = "PATH")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// JSON object mapping clip_id to a list of per-frame annotations
    #[arg(long, value_name = "PATH")]
    annotations: Option<PathBuf>,
    /// Use the deterministic first-sentence stub instead of VLAAD_SUMMARIZER_URL
    #[arg(long)]
    stub: bool,
    /// The two summarizer models, comma separated
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "MODEL,MODEL")]
    models: Option<Vec<String>>,
    /// Skip the paraphrase stage for normal clips
    #[arg(long)]
    no_paraphrase: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long, value_name = "PATH")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with TrainConfig keys
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Checkpoint output
    #[arg(short, long, value_name = "PATH")]
    output: PathBuf,
    /// Per-epoch loss history CSV
    #[arg(long, value_name = "PATH")]
    history: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override a config key, e.g. --set learning_rate=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Mil,
    Clip,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mil => TrainMode::Mil,
            ModeArg::Clip => TrainMode::Clip,
        }
    }
}

#[derive(Args, Debug)]
struct BagArgs {
    #[arg(long, default_value_t = DEFAULT_SNIPPET_LEN)]
    snippet_len: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Clips tagged split=test are scored; all clips when none are
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Decision threshold; defaults to the Youden-optimal threshold on the scored set
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "mil")]
    mode: ModeArg,
    #[command(flatten)]
    bag: BagArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Recompute the token on every tick instead of reusing the last update
    #[arg(long)]
    no_cache: bool,
    #[arg(long, default_value_t = DEFAULT_BUFFER_FRAMES)]
    buffer_frames: usize,
    /// Ticks between buffer updates
    #[arg(long, default_value_t = DEFAULT_SUBSAMPLE_PERIOD)]
    period: u64,
    #[arg(long, default_value_t = DEFAULT_TICK_RATE_HZ)]
    tick_rate: f64,
    /// Also emit the policy state [risk, velocity, onehot(command)] with this many commands
    #[arg(long, value_name = "N")]
    commands: Option<usize>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Checkpoint used to score clips
    #[arg(long, value_name = "PATH", requires = "manifest", conflicts_with = "from_csv")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "checkpoint")]
    manifest: Option<PathBuf>,
    /// Only trace these clips
    #[arg(long = "clip", value_name = "CLIP_ID")]
    clips: Vec<String>,
    /// Existing trace CSV to plot; it is echoed unchanged to stdout
    #[arg(long, value_name = "PATH", requires = "plot")]
    from_csv: Option<PathBuf>,
    /// Trace CSV output (stdout when omitted)
    #[arg(short, long, value_name = "PATH", conflicts_with = "from_csv")]
    output: Option<PathBuf>,
    /// SVG plot output
    #[arg(long, value_name = "PATH")]
    plot: Option<PathBuf>,
    #[command(flatten)]
    bag: BagArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VersionArg {
    V20,
    V21,
}

impl From<VersionArg> for LeaderboardVersion {
    fn from(v: VersionArg) -> Self {
        match v {
            VersionArg::V20 => LeaderboardVersion::V20,
            VersionArg::V21 => LeaderboardVersion::V21,
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Run records, one JSON object per line
    #[arg(long, value_name = "PATH")]
    runs: PathBuf,
    #[arg(long, value_enum, default_value = "v21")]
    version: VersionArg,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["deltas", "baseline"]))]
struct WilcoxonArgs {
    /// JSON array of paired differences ("-" reads stdin)
    #[arg(long, value_name = "PATH")]
    deltas: Option<PathBuf>,
    /// Baseline run records; differences are treatment DS minus baseline DS per route
    #[arg(long, value_name = "PATH", requires = "treatment")]
    baseline: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "baseline")]
    treatment: Option<PathBuf>,
    /// Leaderboard version for run-record inputs
    #[arg(long, value_enum, default_value = "v21")]
    version: VersionArg,
    /// Largest effective n evaluated exactly
    #[arg(long, default_value_t = EXACT_MAX_N)]
    exact_max_n: usize,
    /// Drop the continuity correction of the normal approximation
    #[arg(long)]
    no_continuity_correction: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(v) = cause.downcast_ref::<VlaadError>() {
            return if v.is_validation() { 2 } else { 1 };
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Caption(a) => caption(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Trace(a) => trace(a),
        Command::Score(a) => score(a),
        Command::Wilcoxon(a) => wilcoxon(a),
    }
}

// Input files that cannot be opened are configuration errors.
fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(format!("cannot open {}: {e}", path.display())))
}

fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    if path == Path::new("-") {
        io::stdin().read_to_string(&mut s)?;
    } else {
        open(path)?.read_to_string(&mut s)?;
    }
    Ok(s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    if !path.exists() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    load_manifest(path).with_context(|| format!("loading {}", path.display()))
}

fn write_records(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records)?;
    fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

/// Precedence: defaults, then the config file, then `--set` pairs, then
/// dedicated flags.
fn layered_config<T>(file: Option<&Path>, overrides: &[String], flags: Vec<(&str, Value)>) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut merged = match serde_json::to_value(T::default())? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize as objects"),
    };
    if let Some(path) = file {
        match read_json::<Value>(path)? {
            Value::Object(m) => merged.extend(m),
            _ => return Err(usage(format!("{}: config must be a JSON object", path.display()))),
        }
    }
    for kv in overrides {
        let (k, v) = parse_override(kv)?;
        merged.insert(k, v);
    }
    for (k, v) in flags {
        merged.insert(k.to_string(), v);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

fn parse_override(kv: &str) -> Result<(String, Value)> {
    let (k, v) = kv
        .split_once('=')
        .filter(|(k, _)| !k.trim().is_empty())
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
    // Bare words such as `mode=clip` are taken as strings.
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn flag<T: Serialize>(name: &'static str, v: Option<T>) -> Option<(&'static str, Value)> {
    v.map(|v| (name, serde_json::to_value(v).expect("flag values serialize")))
}

fn encoder(args: &EncoderArgs, dim: usize) -> Result<Box<dyn Encoder>> {
    let choice = match std::env::var("VLAAD_ENCODER") {
        Ok(v) if !v.is_empty() => v,
        _ if args.embedding_cache.is_some() => "cached".to_string(),
        _ => "stub".to_string(),
    };
    match choice.as_str() {
        "stub" => Ok(Box::new(StubEncoder::new(dim, STUB_ENCODER_SEED)?)),
        "cached" => {
            let path = args
                .embedding_cache
                .as_deref()
                .ok_or_else(|| usage("VLAAD_ENCODER=cached needs --embedding-cache"))?;
            let cache = EmbeddingCache::read_from(open(path)?)
                .with_context(|| format!("reading {}", path.display()))?;
            if cache.dim() != dim {
                return Err(usage(format!(
                    "embedding cache has dimension {}, expected {dim}",
                    cache.dim()
                )));
            }
            Ok(Box::new(CachedEncoder::new(cache)))
        }
        other => Err(usage(format!("VLAAD_ENCODER must be 'stub' or 'cached', got '{other}'"))),
    }
}

fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::read_from(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let flags = [
        flag("n_normal", a.n_normal),
        flag("n_collision", a.n_collision),
        flag("feature_dim", a.feature_dim),
        flag("separation", a.separation),
        flag("event_window", a.event_window),
        flag("snippets", a.snippets),
        flag("snippet_len", a.snippet_len),
        flag("seed", a.seed),
    ];
    let cfg: SynthConfig = layered_config(a.config.as_deref(), &a.overrides, flags.into_iter().flatten().collect())?;
    let mut records = generate_synthetic_dataset(&cfg)?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(usage("--test-fraction must lie in [0, 1)"));
    }
    if a.test_fraction > 0.0 {
        let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
        let split = split_dataset(&labels, 1.0 - a.test_fraction, cfg.seed)?;
        for &i in &split.validation {
            records[i].split = Split::Test;
        }
    }
    write_records(&a.output, &records)?;
    eprintln!("wrote {} clips to {}", records.len(), a.output.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    if let Some(path) = &a.manifest {
        let records = manifest(path)?;
        write_records(&a.output, &records)?;
        eprintln!("validated {} clips", records.len());
        return Ok(());
    }
    let stream: FrameStream = read_json(a.stream.as_deref().expect("clap enforces the input group"))?;
    let logs_path = a.infractions.as_deref().expect("clap pairs --stream with --infractions");
    let mut logs = Vec::new();
    for (i, line) in open(logs_path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let log: InfractionLog = serde_json::from_str(&line)
            .map_err(|e| usage(format!("{} line {}: {e}", logs_path.display(), i + 1)))?;
        logs.push(log);
    }
    let report = assemble_clips(&stream, &logs, a.seed)?;
    let mut records = report.clips.clone();
    if let Some(copies) = a.augment {
        for (i, clip) in report.clips.iter().enumerate().filter(|(_, c)| c.label) {
            let seed = a.seed ^ ((i as u64 + 1) << 32);
            records.extend(augment_collision_position(clip, Some(&stream), copies, seed)?);
        }
    }
    write_records(&a.output, &records)?;
    print_json(&json!({
        "clips": records.len(),
        "positives": records.iter().filter(|r| r.label).count(),
        "skipped": report.skipped,
    }))
}

fn caption(a: CaptionArgs) -> Result<()> {
    let http;
    let client: &dyn SummarizerClient = if a.stub {
        &StubSummarizer
    } else {
        http = HttpSummarizer::from_env(SUMMARIZER_TIMEOUT)
            .ok_or_else(|| usage("set VLAAD_SUMMARIZER_URL or pass --stub"))?;
        &http
    };
    let annotations: HashMap<String, Vec<String>> = match &a.annotations {
        Some(p) => read_json(p)?,
        None => HashMap::new(),
    };
    let mut records = manifest(&a.manifest)?;
    let mut captioner = match a.models {
        Some(m) => Captioner::new(client, [m[0].clone(), m[1].clone()], a.seed),
        None => Captioner::with_default_models(client, a.seed),
    };
    let (mut collision, mut normal, mut warnings) = (0usize, 0usize, Vec::new());
    for r in &mut records {
        if let Some(log) = &r.infraction {
            r.caption = captioner.caption_collision_clip(log)?;
            collision += 1;
        } else if let Some(notes) = annotations.get(&r.clip_id) {
            let c = captioner.caption_normal_clip(notes, !a.no_paraphrase)?;
            if c.constraint_warning {
                warnings.push(r.clip_id.clone());
            }
            r.caption = c.text;
            normal += 1;
        }
    }
    write_records(&a.output, &records)?;
    print_json(&json!({
        "collision_captions": collision,
        "normal_captions": normal,
        "unchanged": records.len() - collision - normal,
        "model_counts": captioner.model_counts(),
        "paraphrase_warnings": warnings,
    }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let flags = [
        flag("seed", a.seed),
        flag("epochs", a.epochs),
        flag("mode", a.mode.map(TrainMode::from)),
    ];
    let cfg: TrainConfig = layered_config(a.config.as_deref(), &a.overrides, flags.into_iter().flatten().collect())?;
    cfg.validate()?;
    let mut records = manifest(&a.manifest)?;
    // Held-out test clips never reach training.
    if records.iter().any(|r| r.split == Split::Test) {
        records.retain(|r| r.split == Split::Train);
    }
    if let Some(r) = records.iter().find(|r| r.caption.trim().is_empty()) {
        return Err(usage(format!("clip {} has no caption; run `vlaad caption` first", r.clip_id)));
    }
    let enc = encoder(&a.encoder, cfg.embedding_dim)?;
    let out = train(&cfg, &records, enc.as_ref())?;

    let mut ckpt = create(&a.output)?;
    out.checkpoint.write_to(&mut ckpt)?;
    ckpt.flush()?;
    if let Some(path) = &a.history {
        let mut w = create(path)?;
        write_history_csv(&mut w, &out.history)?;
        w.flush()?;
    }
    let youden = out.validation.as_ref().and_then(|v| youden_threshold(v).ok());
    print_json(&json!({
        "checkpoint": a.output,
        "epochs": out.history.len(),
        "train_clips": out.split.train.len(),
        "validation_clips": out.split.validation.len(),
        "pos_weight": out.pos_weight,
        "final": out.history.last(),
        "validation_threshold": youden.map(|y| y.threshold),
        "class_warning": out.split.class_warning,
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let mut records = manifest(&a.manifest)?;
    if records.iter().any(|r| r.split == Split::Test) {
        records.retain(|r| r.split == Split::Test);
    }
    let enc = encoder(&a.encoder, ckpt.dim())?;
    let mut scores = Vec::with_capacity(records.len());
    for r in &records {
        let bag = match a.mode {
            ModeArg::Mil => segment_clip(r, a.bag.snippet_len, a.bag.stride, enc.as_ref())?,
            ModeArg::Clip => clip_level_bag(r, enc.as_ref())?,
        };
        scores.push(forward_bag(&bag, &ckpt)?.probability);
    }
    let set = ScoredSet::new(scores, records.iter().map(|r| r.label).collect())?;
    let auc = roc_auc(&set)?;
    let (threshold, source, youden_j) = match a.threshold {
        Some(t) => (t, "flag", None),
        None => {
            let y = youden_threshold(&set)?;
            (y.threshold, "youden", Some(y.j))
        }
    };
    let m = threshold_metrics(&set, threshold);
    print_json(&json!({
        "n": set.len(),
        "auc": auc,
        "f1": m.f1,
        "accuracy": m.accuracy,
        "tpr": m.tpr,
        "fpr": m.fpr,
        "threshold": threshold,
        "threshold_source": source,
        "youden_j": youden_j,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TickInput {
    tick: u64,
    frame: Vec<f64>,
    #[serde(default)]
    ego_velocity: Option<f64>,
    #[serde(default)]
    command: Option<usize>,
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    // Streamed frames carry no ids, so only the stub encoder applies.
    let enc = StubEncoder::new(ckpt.dim(), STUB_ENCODER_SEED)?;
    let mut buffer = CausalBuffer::new(a.buffer_frames, a.period, a.tick_rate)?;
    let mut out = io::stdout().lock();
    for (i, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let input: TickInput =
            serde_json::from_str(&line).map_err(|e| usage(format!("stdin line {}: {e}", i + 1)))?;
        let risk = buffer
            .push_tick(&input.frame, input.tick, &enc, &ckpt, !a.no_cache)
            .with_context(|| format!("stdin line {}", i + 1))?;
        let mut record = Map::new();
        record.insert("tick".into(), json!(input.tick));
        record.insert("risk".into(), json!(risk));
        if let Some(c) = a.commands {
            let state = make_global_state(
                risk,
                input.ego_velocity.unwrap_or(0.0),
                input.command.unwrap_or(0),
                c,
            )
            .with_context(|| format!("stdin line {}", i + 1))?;
            record.insert("state".into(), json!(state.to_vec()));
        }
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
        out.flush()?;
    }
    eprintln!("encoder calls: {}", buffer.encoder_calls());
    Ok(())
}

fn trace(a: TraceArgs) -> Result<()> {
    let csv_text = match (&a.from_csv, &a.checkpoint, &a.manifest) {
        (Some(path), _, _) => read_to_string(path)?,
        (None, Some(ck), Some(man)) => {
            let ckpt = read_checkpoint(ck)?;
            let mut records = manifest(man)?;
            if !a.clips.is_empty() {
                if let Some(missing) = a.clips.iter().find(|id| !records.iter().any(|r| &r.clip_id == *id)) {
                    return Err(usage(format!("clip {missing} is not in the manifest")));
                }
                records.retain(|r| a.clips.contains(&r.clip_id));
            }
            let enc = encoder(&a.encoder, ckpt.dim())?;
            let mut buf = Vec::new();
            for (i, r) in records.iter().enumerate() {
                let (t, starts) = score_clip_trace(r, &ckpt, a.bag.snippet_len, a.bag.stride, enc.as_ref())?;
                write_trace_csv(&mut buf, &t, &starts, i == 0)?;
            }
            String::from_utf8(buf).expect("trace CSV is UTF-8")
        }
        _ => return Err(usage("trace needs --checkpoint with --manifest, or --from-csv")),
    };

    // Validate before writing anything so a bad trace leaves no files behind.
    let svg = match &a.plot {
        Some(_) => Some(plot::render_svg(&plot::parse_trace_csv(&csv_text)?)),
        None => None,
    };
    match &a.output {
        Some(path) => fs::write(path, &csv_text).with_context(|| format!("cannot write {}", path.display()))?,
        None => io::stdout().lock().write_all(csv_text.as_bytes())?,
    }
    if let (Some(path), Some(svg)) = (&a.plot, svg) {
        fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn load_runs(path: &Path) -> Result<Vec<vlaad_core::evalkit::DrivingRunRecord>> {
    read_run_records(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn score(a: ScoreArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    if runs.is_empty() {
        return Err(usage(format!("{} holds no run records", a.runs.display())));
    }
    let version = LeaderboardVersion::from(a.version);
    let routes = runs
        .iter()
        .map(|r| summarize_run(r, version))
        .collect::<vlaad_core::Result<Vec<_>>>()?;
    let n = routes.len() as f64;
    let mean = |f: fn(&vlaad_core::evalkit::RunSummary) -> f64| routes.iter().map(f).sum::<f64>() / n;
    let km: f64 = runs.iter().map(|r| r.km).sum();
    let collisions: i64 = runs.iter().map(|r| r.collisions()).sum();
    let col_per_km = if km > 0.0 { collisions as f64 / km } else { 0.0 };
    print_json(&json!({
        "version": version,
        "routes": routes,
        "mean": {
            "RC": mean(|s| s.route_completion),
            "IS": mean(|s| s.infraction_score),
            "DS": mean(|s| s.driving_score),
            "Col_per_km": col_per_km,
        },
    }))
}

fn wilcoxon(a: WilcoxonArgs) -> Result<()> {
    let deltas: Vec<f64> = match (&a.deltas, &a.baseline, &a.treatment) {
        (Some(path), _, _) => read_json(path)?,
        (None, Some(base), Some(treat)) => {
            let version = LeaderboardVersion::from(a.version);
            let ds = |path: &Path| -> Result<BTreeMap<String, f64>> {
                let mut m = BTreeMap::new();
                for r in load_runs(path)? {
                    let s = summarize_run(&r, version)?;
                    if m.insert(s.route_id.clone(), s.driving_score).is_some() {
                        return Err(usage(format!("{}: route {} appears twice", path.display(), s.route_id)));
                    }
                }
                Ok(m)
            };
            let (b, t) = (ds(base)?, ds(treat)?);
            if b.keys().ne(t.keys()) {
                return Err(usage("baseline and treatment must cover the same routes"));
            }
            t.iter().map(|(k, v)| v - b[k]).collect()
        }
        _ => return Err(usage("wilcoxon needs --deltas, or --baseline with --treatment")),
    };
    let opts = WilcoxonOptions {
        exact_max_n: a.exact_max_n,
        continuity_correction: !a.no_continuity_correction,
    };
    print_json(&wilcoxon_signed_rank_with(&deltas, opts)?)
}
