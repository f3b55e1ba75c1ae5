//! Command-line front end. Every command has a table of keys; values come from
//! flags, then a `--config` file, then `ECOFUSE_SEED` (seed only), then the
//! table default. The resolved table is printed as the first output line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use ecofuse::analysis::{self, TurNorm};
use ecofuse::attention::Psi;
use ecofuse::bench::{self, BenchConfig};
use ecofuse::block::{Activation, BlockConfig, NormMode};
use ecofuse::checkpoint;
use ecofuse::model::{self, Arch, ModelConfig, TrainConfig};
use ecofuse::synth::{self, DatasetMeta, Modality, TaskParams, TaskSpec};

pub const SEED_ENV: &str = "ECOFUSE_SEED";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or parameter values.
    Usage(String),
    /// Unreadable data, failed training, broken checkpoints.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ecofuse::Error> for CliError {
    fn from(e: ecofuse::Error) -> Self {
        match e {
            ecofuse::Error::Parameter(m) => CliError::Usage(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Key {
    name: &'static str,
    default: &'static str,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
    }
}

/// Empty default = required path or optional output.
const TASK_KEYS: &[Key] = &[
    key("phonemes", "40", "phoneme classes P"),
    key("lip_classes", "10", "lip classes L"),
    key("hand_classes", "8", "hand classes H"),
    key("noise", "0.3", "per-coordinate noise sigma"),
    key("hand_lead", "2", "frames the hand stream runs ahead"),
    key("seg_min", "8", "shortest label segment"),
    key("seg_max", "16", "longest label segment"),
    key("target_len", "96", "minimum sequence length"),
    key("dm", "64", "feature width d_m"),
    key("task_seed", "0", "seed of the embedding tables"),
];

const MODEL_KEYS: &[Key] = &[
    key("arch", "eco", "eco | mhsa"),
    key("layers", "2", "stacked layers"),
    key("dm", "64", "model width d_m"),
    key("d", "32", "attention width d"),
    key("chunk", "32", "chunk size C"),
    key("topk", "4", "tokens kept per chunk k"),
    key("kernel", "3", "depthwise kernel size D (odd)"),
    key(
        "psi",
        "squared-relu",
        "score activation: squared-relu | relu | linear",
    ),
    key("phi", "swish", "projection activation: swish | identity"),
    key("fusion", "true", "fuse selected tokens across modalities"),
    key("gate", "true", "gated hidden projection"),
    key("norm", "batch", "ConAgg normalization: batch | identity"),
    key("heads", "4", "baseline attention heads"),
    key("modality", "both", "both | lip | hand"),
    key("phonemes", "40", "output classes P"),
];

const TRAIN_KEYS: &[Key] = &[
    key("epochs", "10", "passes over the training set"),
    key("batch", "1", "sequences per optimizer step"),
    key("lr", "0.003", "peak learning rate"),
    key("warmup", "200", "linear warmup steps"),
    key("adam_eps", "1e-8", "Adam epsilon"),
];

struct CommandSpec {
    name: &'static str,
    about: &'static str,
    keys: Vec<&'static Key>,
}

fn keys(groups: &[&'static [Key]], extra: &'static [Key]) -> Vec<&'static Key> {
    let mut out: Vec<&'static Key> = Vec::new();
    for g in groups.iter().copied().chain(std::iter::once(extra)) {
        for k in g {
            if !out.iter().any(|o| o.name == k.name) {
                out.push(k);
            }
        }
    }
    out
}

fn command_specs() -> Vec<CommandSpec> {
    static GEN: &[Key] = &[
        key("out", "", "output JSON Lines path"),
        key("sequences", "500", "records to generate"),
        key("seed", "0", "record seed"),
    ];
    static TRAIN: &[Key] = &[
        key("data", "", "training JSON Lines path"),
        key("out", "", "checkpoint path"),
        key("test", "", "optional evaluation JSON Lines path"),
        key("seed", "0", "initialization and shuffle seed"),
    ];
    static EVAL: &[Key] = &[
        key("model", "", "checkpoint path"),
        key("data", "", "JSON Lines path"),
        key("modality", "both", "both | lip | hand"),
    ];
    static BENCH: &[Key] = &[
        key(
            "t",
            "128,256,512,1024,2048",
            "comma-separated sequence lengths",
        ),
        key("chunk", "32", "chunk size C"),
        key("topk", "4", "tokens kept per chunk k"),
        key("d", "64", "attention width d"),
        key("dm", "256", "model width d_m"),
        key("kernel", "3", "depthwise kernel size D"),
        key("gate", "true", "gated hidden projection"),
        key("repeats", "5", "timed runs per point (median reported)"),
        key("parallel", "false", "run sweep points on separate threads"),
        key("flops", "false", "report FLOPs (2 x MACs)"),
        key("out", "", "CSV path (stdout when empty)"),
        key("seed", "0", "parameter and input seed"),
    ];
    static TUR: &[Key] = &[
        key("model", "", "checkpoint path"),
        key("data", "", "JSON Lines path"),
        key("bins", "20", "histogram bins"),
        key("tur_norm", "max", "within-chunk normalization: max | sum"),
        key("out", "", "CSV path (stdout when empty)"),
    ];
    static CUR: &[Key] = &[
        key("model", "", "checkpoint path"),
        key("data", "", "JSON Lines path"),
        key("bins", "20", "histogram bins"),
        key(
            "selection",
            "true",
            "top-k selection on (false runs with k = C)",
        ),
        key("out", "", "CSV path (stdout when empty)"),
    ];
    static SPECTRUM: &[Key] = &[
        key("model", "", "baseline (mhsa) checkpoint path"),
        key("data", "", "JSON Lines path"),
        key("limit", "100", "attention matrices to analyze"),
        key("out", "", "CSV path (stdout when empty)"),
    ];
    static ZTEST: &[Key] = &[
        key("model", "", "checkpoint path"),
        key("data", "", "JSON Lines path"),
        key("out", "", "CSV path (stdout when empty)"),
    ];
    vec![
        CommandSpec {
            name: "gen-data",
            about: "Generate a synthetic two-stream dataset",
            keys: keys(&[TASK_KEYS], GEN),
        },
        CommandSpec {
            name: "train",
            about: "Train a model and write a checkpoint",
            keys: keys(&[MODEL_KEYS, TRAIN_KEYS], TRAIN),
        },
        CommandSpec {
            name: "eval",
            about: "Frame accuracy of a checkpoint",
            keys: keys(&[], EVAL),
        },
        CommandSpec {
            name: "bench",
            about: "MAC counts and timings against full attention",
            keys: keys(&[], BENCH),
        },
        CommandSpec {
            name: "tur",
            about: "Normalized TUR histogram",
            keys: keys(&[], TUR),
        },
        CommandSpec {
            name: "cur",
            about: "CUR histogram",
            keys: keys(&[], CUR),
        },
        CommandSpec {
            name: "spectrum",
            about: "Singular value spectrum of baseline attention",
            keys: keys(&[], SPECTRUM),
        },
        CommandSpec {
            name: "ztest",
            about: "Z-test of peak CUR with vs without selection",
            keys: keys(&[], ZTEST),
        },
    ]
}

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

fn subcommand(spec: &CommandSpec) -> Command {
    let mut cmd = Command::new(spec.name).about(spec.about).arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value file; flags override it"),
    );
    for k in &spec.keys {
        let mut arg = Arg::new(k.name)
            .long(flag(k.name))
            .help(match k.default {
                "" => k.help.to_string(),
                d => format!("{} [default: {d}]", k.help),
            })
            .action(ArgAction::Set);
        if matches!(k.default, "true" | "false") {
            arg = arg
                .num_args(0..=1)
                .default_missing_value("true")
                .value_name("BOOL");
        } else {
            arg = arg.value_name(k.name.to_uppercase());
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn cli() -> Command {
    let specs = command_specs();
    let find = |n: &str| subcommand(specs.iter().find(|s| s.name == n).expect("known command"));
    Command::new("ecofuse")
        .about("Token-importance-aware fusion attention: data, training, analysis, benchmarks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(find("gen-data"))
        .subcommand(find("train"))
        .subcommand(find("eval"))
        .subcommand(find("bench"))
        .subcommand(
            Command::new("analyze")
                .about("Diagnostics on a trained model")
                .subcommand_required(true)
                .subcommand(find("tur"))
                .subcommand(find("cur"))
                .subcommand(find("spectrum"))
                .subcommand(find("ztest")),
        )
}

/// Parsed `key = value` lines in file order with their line numbers.
pub fn load_config(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {line_no}: expected `key = value`"
            )));
        };
        let k = k.trim().replace('-', "_");
        let v = v.trim().to_string();
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {line_no}: empty key")));
        }
        if let Some((_, _, first)) = out.iter().find(|(name, _, _)| *name == k) {
            return Err(CliError::Usage(format!(
                "config line {line_no}: duplicate key `{k}` (first set on line {first})"
            )));
        }
        out.push((k, v, line_no));
    }
    Ok(out)
}

/// Fully resolved key/value table of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    fn raw(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        let v = self.raw(k);
        v.parse()
            .map_err(|_| CliError::Usage(format!("invalid value `{v}` for {}", flag(k))))
    }

    fn bool(&self, k: &str) -> Result<bool> {
        match self.raw(k) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(CliError::Usage(format!(
                "invalid boolean `{v}` for {}",
                flag(k)
            ))),
        }
    }

    fn path(&self, k: &str) -> Result<PathBuf> {
        match self.raw(k) {
            "" => Err(CliError::Usage(format!("--{} is required", flag(k)))),
            p => Ok(PathBuf::from(p)),
        }
    }

    fn opt_path(&self, k: &str) -> Option<PathBuf> {
        Some(self.raw(k))
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
    }

    pub fn line(&self) -> String {
        let mut s = format!("config command={}", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

fn resolve(spec: &CommandSpec, m: &ArgMatches, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut values: BTreeMap<String, String> = spec
        .keys
        .iter()
        .map(|k| (k.name.to_string(), k.default.to_string()))
        .collect();
    let mut from_config = Vec::new();
    if let Some(path) = m.get_one::<String>("config") {
        for (k, v, line) in load_config(Path::new(path))? {
            if !values.contains_key(&k) {
                return Err(CliError::Usage(format!(
                    "config line {line}: unknown key `{k}` for {}",
                    spec.name
                )));
            }
            from_config.push(k.clone());
            values.insert(k, v);
        }
    }
    if let Some(seed) = env_seed {
        if values.contains_key("seed") && !from_config.iter().any(|k| k == "seed") {
            values.insert("seed".into(), seed.to_string());
        }
    }
    for k in &spec.keys {
        if let Some(v) = m.get_one::<String>(k.name) {
            values.insert(k.name.to_string(), v.clone());
        }
    }
    Ok(RunConfig {
        command: spec.name.to_string(),
        values,
    })
}

fn task_params(rc: &RunConfig) -> Result<TaskParams> {
    Ok(TaskParams {
        phonemes: rc.parse("phonemes")?,
        lip_classes: rc.parse("lip_classes")?,
        hand_classes: rc.parse("hand_classes")?,
        d_model: rc.parse("dm")?,
        noise: rc.parse("noise")?,
        hand_lead: rc.parse("hand_lead")?,
        seg_min: rc.parse("seg_min")?,
        seg_max: rc.parse("seg_max")?,
        target_len: rc.parse("target_len")?,
        task_seed: rc.parse("task_seed")?,
    })
}

fn model_config(rc: &RunConfig) -> Result<ModelConfig> {
    let usage = |what: &str, v: &str| CliError::Usage(format!("unknown {what} `{v}`"));
    let arch = Arch::parse(rc.raw("arch")).ok_or_else(|| usage("arch", rc.raw("arch")))?;
    let psi = Psi::parse(rc.raw("psi")).ok_or_else(|| usage("psi", rc.raw("psi")))?;
    let phi = match rc.raw("phi") {
        "swish" => Activation::Swish,
        "identity" => Activation::Identity,
        v => return Err(usage("phi", v)),
    };
    let norm = match rc.raw("norm") {
        "batch" => NormMode::Batch,
        "identity" => NormMode::Identity,
        v => return Err(usage("norm", v)),
    };
    let modality =
        Modality::parse(rc.raw("modality")).ok_or_else(|| usage("modality", rc.raw("modality")))?;
    let cfg = ModelConfig {
        arch,
        layers: rc.parse("layers")?,
        block: BlockConfig {
            d_model: rc.parse("dm")?,
            d_hidden: rc.parse("d")?,
            chunk: rc.parse("chunk")?,
            topk: rc.parse("topk")?,
            kernel: rc.parse("kernel")?,
            psi,
            phi,
            fusion: rc.bool("fusion")?,
            gate: rc.bool("gate")?,
            norm,
        },
        phonemes: rc.parse("phonemes")?,
        heads: rc.parse("heads")?,
        modality,
        seed: rc.parse("seed")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(rc: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: rc.parse("epochs")?,
        batch: rc.parse("batch")?,
        peak_lr: rc.parse("lr")?,
        warmup: rc.parse("warmup")?,
        adam_eps: rc.parse("adam_eps")?,
        seed: rc.parse("seed")?,
        ..TrainConfig::default()
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(tc)
}

fn load_data(path: &Path) -> Result<Vec<synth::SequenceRecord>> {
    let (_, records) =
        synth::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(records)
}

fn load_model(path: &Path) -> Result<model::Model> {
    checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// CSV to `--out` when given, otherwise to `out` after the config line.
fn emit_csv(
    rc: &RunConfig,
    out: &mut dyn Write,
    write: impl Fn(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    match rc.opt_path("out") {
        Some(p) => {
            let mut f = BufWriter::new(File::create(&p)?);
            write(&mut f)?;
            f.flush()?;
            writeln!(out, "wrote {}", p.display())?;
        }
        None => write(out)?,
    }
    Ok(())
}

fn gen_data(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let params = task_params(rc)?;
    let spec = TaskSpec::new(params.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let count: usize = rc.parse("sequences")?;
    let seed: u64 = rc.parse("seed")?;
    let path = rc.path("out")?;
    let records = synth::generate(&spec, count, seed);
    synth::save(
        &path,
        &records,
        Some(&DatasetMeta {
            task: params,
            seed,
            count,
        }),
    )?;
    let frames: usize = records.iter().map(|r| r.len()).sum();
    writeln!(
        out,
        "wrote {count} sequences ({frames} frames) to {}",
        path.display()
    )?;
    Ok(())
}

fn train(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let cfg = model_config(rc)?;
    let tc = train_config(rc)?;
    let data = load_data(&rc.path("data")?)?;
    let path = rc.path("out")?;
    let test = rc.opt_path("test").map(|p| load_data(&p)).transpose()?;
    let mut io_err = None;
    let (state, log) = model::train_with(&cfg, &tc, &data, |epoch, loss| {
        if let Err(e) = writeln!(out, "epoch={} loss={loss}", epoch + 1) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    checkpoint::save(&state.model, &path)?;
    writeln!(
        out,
        "steps={} params={} checkpoint={}",
        log.steps,
        state.model.param_count(),
        path.display()
    )?;
    if let Some(test) = test {
        let r = model::evaluate(&state.model, &test, cfg.modality)?;
        writeln!(out, "accuracy={}", r.accuracy)?;
    }
    Ok(())
}

fn eval(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let modality = Modality::parse(rc.raw("modality"))
        .ok_or_else(|| CliError::Usage(format!("unknown modality `{}`", rc.raw("modality"))))?;
    let m = load_model(&rc.path("model")?)?;
    let data = load_data(&rc.path("data")?)?;
    let r = model::evaluate(&m, &data, modality)?;
    writeln!(out, "accuracy={}", r.accuracy)?;
    writeln!(out, "frames={}", r.frames)?;
    Ok(())
}

fn run_bench(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ts: Vec<usize> = rc
        .raw("t")
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid T list `{}`", rc.raw("t"))))
        })
        .collect::<Result<_>>()?;
    let template = BenchConfig {
        t: ts.first().copied().unwrap_or(0),
        chunk: rc.parse("chunk")?,
        topk: rc.parse("topk")?,
        d: rc.parse("d")?,
        d_model: rc.parse("dm")?,
        kernel: rc.parse("kernel")?,
        gate: rc.bool("gate")?,
        seed: rc.parse("seed")?,
    };
    template
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let repeats: usize = rc.parse("repeats")?;
    let flops = rc.bool("flops")?;
    if ts.len() == 1 {
        let r = bench::count_flops(&template, repeats)?;
        emit_csv(rc, out, |w| {
            bench::write_csv(w, std::slice::from_ref(&r), flops)
        })?;
        return Ok(());
    }
    let sw = bench::sweep(&ts, &template, repeats, rc.bool("parallel")?)?;
    emit_csv(rc, out, |w| bench::write_csv(w, &sw.reports, flops))?;
    for (c, s) in &sw.slopes {
        writeln!(out, "# slope {}={s:.4}", c.name())?;
    }
    Ok(())
}

fn analyze(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&rc.path("model")?)?;
    let data = load_data(&rc.path("data")?)?;
    match rc.command.as_str() {
        "tur" => {
            let norm = TurNorm::parse(rc.raw("tur_norm")).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown TUR normalization `{}`",
                    rc.raw("tur_norm")
                ))
            })?;
            let values = analysis::collect_tur(&m, &data, norm)?;
            let h = analysis::Histogram::build(
                &values,
                rc.parse("bins")?,
                0.0,
                1.0,
                analysis::HistNorm::PerChunk,
            )?;
            emit_csv(rc, out, |w| analysis::write_histogram_csv(w, &h))?;
            if let Some((median, mean)) = analysis::median_mean(&values) {
                writeln!(out, "# tokens={} median={median} mean={mean}", values.len())?;
            }
        }
        "cur" => {
            let h = analysis::cur_histogram(&m, &data, rc.parse("bins")?, rc.bool("selection")?)?;
            emit_csv(rc, out, |w| analysis::write_histogram_csv(w, &h))?;
        }
        "spectrum" => {
            let maps = analysis::baseline_attention(&m, &data, rc.parse("limit")?)?;
            let report = analysis::svd_spectrum(&maps)?;
            emit_csv(rc, out, |w| analysis::write_spectrum_csv(w, &report))?;
            writeln!(out, "# matrices={}", report.count)?;
        }
        "ztest" => {
            let with = analysis::peak_cur(&analysis::collect_cur(&m, &data, true)?);
            let without = analysis::peak_cur(&analysis::collect_cur(&m, &data, false)?);
            let t = analysis::z_test(&with, &without)?;
            emit_csv(rc, out, |w| analysis::write_ztest_csv(w, &t))?;
        }
        other => unreachable!("unknown analysis {other}"),
    }
    Ok(())
}

/// Runs one invocation; returns the process exit code. Errors go to `err`.
pub fn run<I, S>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let (name, sub) = if name == "analyze" {
        sub.subcommand().expect("analysis required")
    } else {
        (name, sub)
    };
    let specs = command_specs();
    let spec = specs
        .iter()
        .find(|s| s.name == name)
        .expect("known command");
    let result = resolve(spec, sub, env_seed).and_then(|rc| {
        writeln!(out, "{}", rc.line())?;
        match name {
            "gen-data" => gen_data(&rc, out),
            "train" => train(&rc, out),
            "eval" => eval(&rc, out),
            "bench" => run_bench(&rc, out),
            _ => analyze(&rc, out),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
