//! The `lawa` command line: `train`, `average`, `eval`, `compare` and
//! `schemes`.
//!
//! Exit status is 0 on success, 2 for usage, configuration and data
//! errors, and 1 for numerical failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

use crate::avg::{average_checkpoints, Averager, Scheme};
use crate::checkpoint::{read_checkpoint, read_header, write_checkpoint};
use crate::compare::{self, CompareSpec, Direction};
use crate::config::{RunConfig, KEYS};
use crate::data::Dataset;
use crate::engine::{apply_bn_mode, evaluate, train_run, BnMode};
use crate::error::{Error, Result};
use crate::metrics::{format_sig9, MetricsRecord};
use crate::param::{Checkpoint, DType};

/// Failure of a command: either a library error or a bad invocation.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Flat key=value file; explicit flags take precedence"),
    );
    for &key in KEYS {
        let long = key.replace('_', "-");
        let mut arg = Arg::new(key).long(long.clone()).value_name("VALUE");
        if long != key {
            arg = arg.alias(key);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn command() -> Command {
    Command::new("lawa")
        .about("Latest-checkpoint weight averaging: training, offline averaging and comparison")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train").about("Train a model, writing checkpoints, metrics.csv and config.resolved"),
        ))
        .subcommand(
            Command::new("average")
                .about("Average the newest checkpoints in a directory")
                .arg(Arg::new("dir").required(true).value_name("DIR"))
                .arg(Arg::new("k").long("k").default_value("6"))
                .arg(Arg::new("scheme").long("scheme").default_value("uniform"))
                .arg(Arg::new("alpha").long("alpha").default_value("0.9"))
                .arg(Arg::new("out").long("out").required(true).value_name("FILE")),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint")
                .arg(Arg::new("config").long("config").required(true).value_name("FILE"))
                .arg(Arg::new("ckpt").long("ckpt").required(true).value_name("FILE"))
                .arg(
                    Arg::new("dataset")
                        .long("dataset")
                        .value_name("SOURCE")
                        .help("`spirals` or a CSV path; defaults to the configured dataset"),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "val", "all"])
                        .default_value("val"),
                )
                .arg(
                    Arg::new("bn_mode")
                        .long("bn-mode")
                        .value_parser(["off", "copy", "recompute"])
                        .default_value("off"),
                )
                .arg(
                    Arg::new("train_data")
                        .long("train-data")
                        .value_name("SOURCE")
                        .help("Dataset whose training split feeds statistics recomputation"),
                )
                .arg(
                    Arg::new("bn_from")
                        .long("bn-from")
                        .value_name("FILE")
                        .help("Checkpoint whose running statistics are copied"),
                ),
        )
        .subcommand(
            Command::new("compare")
                .about("Epoch savings of averaged curves over a baseline")
                .arg(Arg::new("files").required(true).num_args(1..).value_name("METRICS_CSV"))
                .arg(Arg::new("metric").long("metric").default_value("val_loss"))
                .arg(
                    Arg::new("candidate")
                        .long("candidate")
                        .value_name("COLUMN")
                        .help("Column compared against the baseline; avg_<metric> by default"),
                )
                .arg(
                    Arg::new("baseline")
                        .long("baseline")
                        .value_name("METRICS_CSV")
                        .help("Baseline run; each file's own metric column when omitted"),
                )
                .arg(Arg::new("targets").long("targets").value_name("LIST"))
                .arg(Arg::new("k").long("k").default_value("6"))
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(Arg::new("summary").long("summary").value_name("FILE")),
        )
        .subcommand(
            config_args(Command::new("schemes").about("Train once per averaging scheme and collect the curves")).arg(
                Arg::new("variants")
                    .long("variants")
                    .value_name("LIST")
                    .default_value("uniform:6,ema:0.9")
                    .help("Comma-separated scheme[:k or alpha] entries"),
            ),
        )
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("average", m)) => cmd_average(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("compare", m)) => cmd_compare(m),
        Some(("schemes", m)) => cmd_schemes(m),
        _ => Err(usage("unknown command")),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn str_arg<'a>(m: &'a ArgMatches, id: &str) -> Option<&'a str> {
    m.get_one::<String>(id).map(String::as_str)
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> std::result::Result<T, Failure> {
    let raw = str_arg(m, id).unwrap_or_default();
    raw.parse()
        .map_err(|_| usage(format!("invalid value `{raw}` for --{id}")))
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = str_arg(m, "config") {
        cfg.apply_file(path)?;
    }
    // KEYS order applies `dataset` before the keys that depend on it
    for &key in KEYS {
        if let Some(v) = str_arg(m, key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn describe(r: &MetricsRecord) -> String {
    let mut s = format!("epoch {}: val_loss={}", r.epoch, format_sig9(r.val_loss));
    if let Some(acc) = r.val_acc {
        let _ = write!(s, " val_acc={}", format_sig9(acc));
    }
    if let Some(l) = r.avg_val_loss {
        let _ = write!(s, " avg_val_loss={}", format_sig9(l));
    }
    if let Some(acc) = r.avg_val_acc {
        let _ = write!(s, " avg_val_acc={}", format_sig9(acc));
    }
    s
}

fn train_into(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let resolved = cfg.out.join("config.resolved");
    fs::write(&resolved, cfg.to_file_string()).map_err(|e| Error::io(&resolved, e))?;
    let dataset = cfg.load_dataset()?;
    Ok(train_run(cfg, &dataset)?.metrics)
}

fn cmd_train(m: &ArgMatches) -> CmdResult {
    let cfg = resolve_config(m)?;
    warn_all(&cfg.validate()?);
    let metrics = train_into(&cfg)?;
    if let Some(last) = metrics.last() {
        println!("{}", describe(last));
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

/// Checkpoint files in `dir` with their header epochs, oldest first.
/// Averaged outputs (`lawa_*`) are skipped.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.extension().is_some_and(|e| e == "lawa") && !name.starts_with("lawa_") {
            let (epoch, _) = read_header(&path)?;
            found.push((epoch, path));
        }
    }
    found.sort();
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidSet(format!(
            "{} and {} both hold epoch {}",
            w[0].1.display(),
            w[1].1.display(),
            w[0].0
        )));
    }
    Ok(found)
}

/// Offline averaging of the `k` checkpoints with the largest epochs.
pub fn average_dir(dir: &Path, k: usize, scheme: Scheme) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let found = list_checkpoints(dir)?;
    if found.len() < k {
        return Err(Error::InsufficientCheckpoints {
            needed: k,
            found: found.len(),
        });
    }
    let ckpts = found[found.len() - k..]
        .iter()
        .map(|(_, p)| read_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let newest = ckpts.last().expect("k >= 1");
    let (epoch, step) = (newest.epoch, newest.step);
    let params = match scheme {
        Scheme::Uniform { .. } => average_checkpoints(&ckpts)?,
        Scheme::Ema { .. } => {
            let mut averager = Averager::new(scheme)?;
            let mut last = None;
            for c in ckpts {
                last = averager.push(c)?;
            }
            last.expect("ema yields a value per checkpoint")
        }
        other => {
            return Err(Error::Config(format!(
                "offline averaging supports uniform and ema, not {other}"
            )))
        }
    };
    Ok(Checkpoint::new(params, epoch, step))
}

fn cmd_average(m: &ArgMatches) -> CmdResult {
    let dir = PathBuf::from(str_arg(m, "dir").unwrap_or_default());
    let k: usize = parsed(m, "k")?;
    let scheme = match str_arg(m, "scheme") {
        Some("uniform") => Scheme::Uniform { k },
        Some("ema") => Scheme::Ema {
            alpha: parsed(m, "alpha")?,
        },
        Some(other) => return Err(usage(format!("unknown scheme `{other}`; expected uniform or ema"))),
        None => unreachable!("defaulted"),
    };
    warn_all(&scheme.validate()?);
    let out = PathBuf::from(str_arg(m, "out").unwrap_or_default());
    let ckpt = average_dir(&dir, k, scheme)?;
    write_checkpoint(&ckpt, &out)?;
    println!("wrote {} (epoch {})", out.display(), ckpt.epoch);
    Ok(())
}

/// The configured dataset, or `source` (`spirals` or a CSV path) read with
/// the configured spiral and label settings.
fn load_source(cfg: &RunConfig, source: Option<&str>) -> Result<Dataset> {
    match source {
        None => cfg.load_dataset(),
        Some(src) => {
            let mut cfg = cfg.clone();
            cfg.set("dataset", src)?;
            cfg.load_dataset()
        }
    }
}

fn cmd_eval(m: &ArgMatches) -> CmdResult {
    let cfg = RunConfig::from_file(str_arg(m, "config").unwrap_or_default())?;
    let mode = match str_arg(m, "bn_mode") {
        Some("recompute") => BnMode::Recompute,
        Some("copy") => BnMode::Copy,
        _ => BnMode::Off,
    };
    let train_source = str_arg(m, "train_data");
    if mode == BnMode::Recompute && train_source.is_none() {
        return Err(usage("--bn-mode recompute needs --train-data"));
    }
    if mode == BnMode::Copy && str_arg(m, "bn_from").is_none() {
        return Err(usage("--bn-mode copy needs --bn-from"));
    }
    let dataset = load_source(&cfg, str_arg(m, "dataset"))?;
    let spec = cfg.model_spec(&dataset)?;
    let params = read_checkpoint(str_arg(m, "ckpt").unwrap_or_default())?
        .params
        .cast(DType::F64);
    spec.check_params(&params)?;
    let newest = match str_arg(m, "bn_from") {
        Some(p) => {
            let newest = read_checkpoint(p)?.params.cast(DType::F64);
            spec.check_params(&newest)?;
            newest
        }
        None => params.clone(),
    };
    let train = match train_source {
        Some(src) => load_source(&cfg, Some(src))?.train_batch(),
        None => dataset.train_batch(),
    };
    let params = apply_bn_mode(params, &spec, mode, &newest, &train)?;
    let data = match str_arg(m, "split") {
        Some("train") => dataset.train_batch(),
        Some("all") => dataset.all_batch(),
        _ => dataset.val_batch(),
    };
    let e = evaluate(&params, &spec, &data, cfg.eval_batch_size)?;
    print!("loss={}", format_sig9(e.loss));
    if let Some(acc) = e.accuracy {
        print!(" accuracy={}", format_sig9(acc));
    }
    println!();
    Ok(())
}

fn parse_list(raw: &str, what: &str) -> std::result::Result<Vec<f64>, Failure> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| usage(format!("invalid {what} `{s}`"))))
        .collect()
}

fn cmd_compare(m: &ArgMatches) -> CmdResult {
    let files: Vec<PathBuf> = m
        .get_many::<String>("files")
        .into_iter()
        .flatten()
        .map(PathBuf::from)
        .collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let metric = str_arg(m, "metric").unwrap_or("val_loss");
    let spec = CompareSpec {
        metric,
        candidate: str_arg(m, "candidate"),
        k: parsed(m, "k")?,
    };
    let targets = parse_list(str_arg(m, "targets").unwrap_or_default(), "target")?;
    let baseline = str_arg(m, "baseline").map(Path::new);
    let comparisons = compare::compare_files(&refs, baseline, &spec)?;
    let dir = Direction::for_metric(metric);
    let out = PathBuf::from(str_arg(m, "out").unwrap_or_default());
    compare::write_report(&out, &compare::report_csv(&comparisons, spec.k))?;
    let summary = compare::summary_csv(&comparisons, &targets, dir);
    if let Some(path) = str_arg(m, "summary") {
        compare::write_report(Path::new(path), &summary)?;
    }
    for c in &comparisons {
        match compare::max_savings(&c.savings) {
            Some(best) => println!("{}: max_savings={} at epoch {}", c.run, best.savings, best.epoch),
            None => println!("{}: no epochs with a defined {}", c.run, spec.candidate_column()),
        }
    }
    Ok(())
}

/// One entry of a `--variants` list, e.g. `uniform:6` or `ema:0.9`.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub settings: Vec<(&'static str, String)>,
}

pub fn parse_variant(raw: &str) -> Result<Variant> {
    let raw = raw.trim();
    let (kind, param) = match raw.split_once(':') {
        Some((k, p)) => (k, Some(p)),
        None => (raw, None),
    };
    let mut settings = vec![("scheme", kind.to_owned())];
    match (kind, param) {
        ("uniform" | "lawa", Some(k)) => settings.push(("k", k.to_owned())),
        ("ema", Some(a)) => settings.push(("alpha", a.to_owned())),
        ("uniform" | "lawa" | "ema" | "polyak" | "none", None) => {}
        _ => return Err(Error::Config(format!("invalid scheme variant `{raw}`"))),
    }
    Ok(Variant {
        label: raw.to_owned(),
        settings,
    })
}

pub const SCHEMES_HEADER: &str = "scheme,epoch,val_loss,val_acc,avg_val_loss,avg_val_acc";

fn cmd_schemes(m: &ArgMatches) -> CmdResult {
    let base = resolve_config(m)?;
    let variants = str_arg(m, "variants")
        .unwrap_or_default()
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_variant)
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(usage("--variants is empty"));
    }
    let mut table = format!("{SCHEMES_HEADER}\n");
    let opt = |v: Option<f64>| v.map(format_sig9).unwrap_or_default();
    for v in &variants {
        let mut cfg = base.clone();
        for (key, value) in &v.settings {
            cfg.set(key, value)?;
        }
        cfg.out = base.out.join(v.label.replace(':', "_"));
        warn_all(&cfg.validate()?);
        let metrics = train_into(&cfg)?;
        for r in &metrics {
            let _ = writeln!(
                table,
                "{},{},{},{},{},{}",
                v.label,
                r.epoch,
                format_sig9(r.val_loss),
                opt(r.val_acc),
                opt(r.avg_val_loss),
                opt(r.avg_val_acc)
            );
        }
        if let Some(last) = metrics.last() {
            println!("{}: {}", v.label, describe(last));
        }
    }
    let path = base.out.join("schemes.csv");
    compare::write_report(&path, &table)?;
    println!("wrote {}", path.display());
    Ok(())
}
