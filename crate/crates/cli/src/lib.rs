//! `hiercon` subcommands: gen-synth, train, eval, explain, gradcheck.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or config,
//! 3 training divergence, 4 gradient-check failure.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hiercon_core::data::{generate_synthetic, parse_manifest, Corpus, Manifest, SyntheticSpec};
use hiercon_core::diagnostics::{op_kind_by_name, run_gradcheck, GradcheckOptions, CHECKED_OPS};
use hiercon_core::metrics::{det_csv, det_points, format_scores};
use hiercon_core::model::{AttentionRecord, HierCon, ModelConfig};
use hiercon_core::training::{evaluate, mean_attention, train, EpochRecord, TrainConfig};
use hiercon_core::Error;

pub const EXIT_IO: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.jsonl";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INVALID, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_INVALID,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "hiercon", version, about = "Hierarchical attention spoof detector on precomputed layer features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-artefact corpus and its manifest.
    GenSynth(GenSynthArgs),
    /// Train on one manifest, early-stop on another.
    Train(TrainArgs),
    /// Score a manifest and report EER.
    Eval(EvalArgs),
    /// Export averaged attention weights as CSV.
    Explain(ExplainArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with [model], [train], [train.loss] and [synthetic] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be empty or absent unless --force.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct LossFlags {
    #[arg(long)]
    pub lambda_con: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Noise stream; use a different stream for a validation split.
    #[arg(long)]
    pub stream: Option<u64>,
    #[arg(long)]
    pub signal_scale: Option<f64>,
    #[arg(long)]
    pub n_real: Option<usize>,
    #[arg(long)]
    pub n_fake: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Average over the first N manifest rows.
    #[arg(long)]
    pub n_samples: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Scale one op's backward rule by 1.5 (negative control).
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

/// Everything a run can be configured with. Defaults < file < flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Failure::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Failure::invalid(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

/// Prepares `out` and writes `config.resolved` there.
fn start(cfg: &RunConfig, out: &Path, force: bool) -> CliResult {
    prepare_out(out, force)?;
    write_file(&out.join(CONFIG_RESOLVED), cfg.to_toml())
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> CliResult {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Explain(a) => cmd_explain(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout),
    }
}

fn say(stdout: &mut impl Write, text: &str) -> CliResult {
    writeln!(stdout, "{text}").map_err(|e| Failure::io(Path::new("<stdout>"), e))
}

fn gen_synth(a: GenSynthArgs, stdout: &mut impl Write) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let s = &mut cfg.synthetic;
    if let Some(v) = a.common.seed {
        s.seed = v;
    }
    if let Some(v) = a.stream {
        s.stream = v;
    }
    if let Some(v) = a.signal_scale {
        s.signal_scale = v;
    }
    if let Some(v) = a.n_real {
        s.n_real = v;
    }
    if let Some(v) = a.n_fake {
        s.n_fake = v;
    }
    cfg.synthetic.validate()?;
    start(&cfg, &a.common.out, a.common.force)?;
    let s = &cfg.synthetic;
    let manifest = generate_synthetic(s, &a.common.out)?;
    let (layers, frames) = (s.planted_layers(), s.planted_frames());
    say(
        stdout,
        &format!(
            "wrote {} utterances ({} real, {} fake) to {}\n\
             planted group {} (layers {}..{}), window [{}, {}) = frames {}..{} of {}\n\
             signal {} noise {} seed {} stream {}",
            manifest.len(),
            s.n_real,
            s.n_fake,
            a.common.out.display(),
            s.planted_group,
            layers.start,
            layers.end,
            s.window[0],
            s.window[1],
            frames.start,
            frames.end,
            s.frames,
            s.signal_scale,
            s.noise_scale,
            s.seed,
            s.stream
        ),
    )
}

fn load_corpus(path: &Path) -> CliResult<(Manifest, Corpus)> {
    let manifest = parse_manifest(path)?;
    let corpus = Corpus::load(&manifest)?;
    Ok((manifest, corpus))
}

fn cmd_train(a: TrainArgs, stdout: &mut impl Write) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(v) = a.common.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.loss.lambda_con {
        cfg.train.loss.lambda_con = v;
    }
    if let Some(v) = a.loss.margin {
        cfg.train.loss.margin = v;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    start(&cfg, &a.common.out, a.common.force)?;

    let (_, train_set) = load_corpus(&a.train)?;
    let (_, val_set) = load_corpus(&a.val)?;
    let model = HierCon::new(cfg.model.clone(), cfg.train.seed)?;

    let history_path = a.common.out.join(HISTORY);
    let file = File::create(&history_path).map_err(|e| Failure::io(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write_err = None;
    let outcome = train(model, &train_set, &val_set, &cfg.train, |rec: &EpochRecord| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(history, "{line}").and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Failure::io(&history_path, e));
    }
    let outcome = outcome?;
    outcome.best.save(a.common.out.join(CHECKPOINT))?;
    say(
        stdout,
        &format!(
            "epochs run: {}{}\nbest epoch {} val EER {:.4}",
            outcome.history.len() - 1,
            if outcome.stopped_early { " (early stop)" } else { "" },
            outcome.best_epoch,
            outcome.best_val_eer
        ),
    )
}

fn load_checkpoint(path: &Path) -> CliResult<HierCon> {
    Ok(HierCon::load(path)?)
}

#[derive(Serialize)]
struct DetJson {
    /// `None` for the `-inf`/`+inf` sentinels.
    threshold: Option<f64>,
    far: f64,
    frr: f64,
}

#[derive(Serialize)]
struct MetricsJson {
    eer: Option<f64>,
    n_real: usize,
    n_fake: usize,
    det: Vec<DetJson>,
}

fn cmd_eval(a: EvalArgs, stdout: &mut impl Write) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&a.checkpoint)?;
    cfg.model = model.config.clone();
    start(&cfg, &a.common.out, a.common.force)?;
    let (_, corpus) = load_corpus(&a.manifest)?;
    let ev = evaluate(&model, &corpus)?;
    write_file(&a.common.out.join("scores.txt"), format_scores(&ev.scores))?;

    let set = ev.scored_set()?;
    let (n_real, n_fake) = set.class_counts();
    let det = match det_points(&set) {
        Ok(p) => p,
        Err(Error::MetricUndefined(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let metrics = MetricsJson {
        eer: ev.eer,
        n_real,
        n_fake,
        det: det
            .iter()
            .map(|p| DetJson {
                threshold: p.threshold.is_finite().then_some(p.threshold),
                far: p.far,
                frr: p.frr,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_file(&a.common.out.join("metrics.json"), json + "\n")?;
    match ev.eer {
        Some(eer) => {
            write_file(&a.common.out.join("det.csv"), det_csv(&det))?;
            say(stdout, &format!("{} utterances ({n_real} real, {n_fake} fake) EER {:.4}", set.len(), eer))
        }
        None => Err(Failure::invalid(format!(
            "EER undefined: both classes required, got {n_real} real and {n_fake} fake"
        ))),
    }
}

fn alpha_csv(r: &AttentionRecord) -> String {
    let frames = r.alpha.cols();
    let mut out = String::from("layer");
    for t in 0..frames {
        write!(out, ",t{t}").unwrap();
    }
    out.push('\n');
    for l in 0..r.alpha.rows() {
        write!(out, "{l}").unwrap();
        for v in r.alpha.row(l) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn beta_csv(r: &AttentionRecord) -> String {
    let g = r.beta.cols();
    let mut out = String::from("group,first_layer,last_layer");
    for m in 0..g {
        write!(out, ",member{m}").unwrap();
    }
    out.push('\n');
    for k in 0..r.beta.rows() {
        write!(out, "{k},{},{}", k * g, k * g + g - 1).unwrap();
        for v in r.beta.row(k) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn gamma_csv(r: &AttentionRecord, group_size: usize) -> String {
    let mut out = String::from("group,first_layer,last_layer,weight\n");
    for (k, v) in r.gamma.data().iter().enumerate() {
        writeln!(out, "{k},{},{},{v}", k * group_size, k * group_size + group_size - 1).unwrap();
    }
    out
}

fn cmd_explain(a: ExplainArgs, stdout: &mut impl Write) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&a.checkpoint)?;
    cfg.model = model.config.clone();
    let mut manifest = parse_manifest(&a.manifest)?;
    if a.n_samples == 0 || a.n_samples > manifest.len() {
        return Err(Failure::invalid(format!(
            "--n-samples must lie in 1..={} (manifest size), got {}",
            manifest.len(),
            a.n_samples
        )));
    }
    start(&cfg, &a.common.out, a.common.force)?;
    manifest.rows.truncate(a.n_samples);
    let corpus = Corpus::load(&manifest)?;
    let ev = evaluate(&model, &corpus)?;
    let records: Vec<&AttentionRecord> = ev.records.iter().collect();
    let avg = mean_attention(&records).expect("n_samples >= 1");
    let out = &a.common.out;
    write_file(&out.join("alpha.csv"), alpha_csv(&avg))?;
    write_file(&out.join("beta.csv"), beta_csv(&avg))?;
    write_file(&out.join("gamma.csv"), gamma_csv(&avg, model.config.group_size))?;
    let gamma: Vec<String> = avg.gamma.data().iter().map(|g| format!("{g:.4}")).collect();
    say(stdout, &format!("averaged {} utterances; gamma [{}]", a.n_samples, gamma.join(", ")))
}

fn cmd_gradcheck(a: GradcheckArgs, stdout: &mut impl Write) -> CliResult {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let fault = match &a.corrupt_op {
        None => None,
        Some(name) => Some(op_kind_by_name(name).ok_or_else(|| {
            let names: Vec<&str> = CHECKED_OPS.iter().map(|k| k.name()).collect();
            Failure::invalid(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
        })?),
    };
    let opts = GradcheckOptions {
        seed: a.seed.unwrap_or(cfg.train.seed),
        fault,
        ..GradcheckOptions::default()
    };
    if let Some(out) = &a.out {
        start(&cfg, out, a.force)?;
    }
    let report = run_gradcheck(&opts)?;
    let text = report.to_string();
    if let Some(out) = &a.out {
        write_file(&out.join("gradcheck.txt"), format!("{text}\n"))?;
    }
    say(stdout, &text)?;
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .lines
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name.as_str())
            .collect();
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed: {}", failing.join(", ")),
        })
    }
}
