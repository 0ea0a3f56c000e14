//! Command-line front end. Every config key is also a `--key` flag (dashes
//! or underscores); `--config FILE` layers a config file under the flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use crate::config::{load_config, parse_pairs, ConfigError, PipelineConfig, KEYS};
use crate::datasets::{load_depth_png, load_sequence};
use crate::eval::{format_report, score_depth, KeyframeScore};
use crate::pipeline::{config_from_manifest, run_sequence, PipelineError};
use crate::predictions::{save_predictions, synth_oracle};
use crate::selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] PipelineError),
    #[error("selftest: {0} of {1} checks failed")]
    SelftestFailed(usize, usize),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) | CliError::SelftestFailed(..) => EXIT_FAILURE,
        }
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Config file of 'key = value' lines"),
    );
    KEYS.iter().fold(cmd, |cmd, &(key, kind)| {
        let long = flag_name(key);
        let mut arg = Arg::new(key)
            .long(long.clone())
            .value_name(kind.to_uppercase())
            .action(ArgAction::Set);
        if long != key {
            arg = arg.alias(key);
        }
        cmd.arg(arg)
    })
}

pub fn command() -> Command {
    Command::new("depthfuse")
        .about("Keyframe depth fusion of semi-dense stereo and dense depth predictions")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(Command::new("run").about("Run the pipeline on a sequence")))
        .subcommand(config_args(
            Command::new("oracle").about("Write synthetic DFPRED predictions for every frame of a sequence"),
        ))
        .subcommand(config_args(
            Command::new("score")
                .about("Re-score the depth images of a finished run")
                .arg(
                    Arg::new("run-dir")
                        .long("run-dir")
                        .value_name("DIR")
                        .required(true)
                        .help("Output directory of an earlier run"),
                ),
        ))
        .subcommand(Command::new("selftest").about("Run the invariant suite"))
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|&(key, _)| m.get_one::<String>(key).map(|v| (key.to_string(), v.clone())))
        .collect()
}

fn config_from(m: &ArgMatches) -> Result<PipelineConfig, CliError> {
    let path = m.get_one::<String>("config").map(PathBuf::from);
    Ok(load_config(path.as_deref(), &overrides(m))?)
}

fn require_sequence(cfg: &PipelineConfig, cmd: &str) -> Result<PathBuf, CliError> {
    cfg.sequence
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{cmd} needs --sequence (flag or config key)")))
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cmd_run(m: &ArgMatches, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = config_from(m)?;
    require_sequence(&cfg, "run")?;
    let result = run_sequence(&cfg)?;
    result.write_outputs(&cfg.out)?;
    write!(out, "{}", format_report(&result.scores)).map_err(|e| io_error(Path::new("<stdout>"), e))?;
    Ok(())
}

fn cmd_oracle(m: &ArgMatches, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = config_from(m)?;
    let dir = require_sequence(&cfg, "oracle")?;
    let (frames, k) = load_sequence(&dir, &cfg.load, cfg.tolerance).map_err(PipelineError::from)?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    for (i, f) in frames.iter().enumerate() {
        let p = synth_oracle(&f.gt_depth, Some(&f.holes), &cfg.oracle.params_for(i, k.fx)).map_err(PipelineError::from)?;
        save_predictions(&p, cfg.out.join(format!("{}.dfpred", f.token))).map_err(PipelineError::from)?;
    }
    writeln!(out, "wrote {} prediction files to {}", frames.len(), cfg.out.display())
        .map_err(|e| io_error(Path::new("<stdout>"), e))?;
    Ok(())
}

/// Keyframe id → token, from the `keyframe.<id>.token` manifest entries.
fn manifest_keyframes(text: &str) -> Result<BTreeMap<usize, String>, CliError> {
    let mut out = BTreeMap::new();
    for (_, k, v) in parse_pairs(text)? {
        let parts: Vec<&str> = k.split('.').collect();
        if let ["keyframe", id, "token"] = parts[..] {
            let id = id
                .parse()
                .map_err(|_| CliError::Runtime(PipelineError::Invalid(format!("bad keyframe id in manifest key '{k}'"))))?;
            out.insert(id, v);
        }
    }
    Ok(out)
}

fn manifest_value(text: &str, key: &str) -> Result<Option<String>, CliError> {
    Ok(parse_pairs(text)?.into_iter().find(|(_, k, _)| k == key).map(|(_, _, v)| v))
}

fn cmd_score(m: &ArgMatches, out: &mut dyn Write) -> Result<(), CliError> {
    let run_dir = PathBuf::from(m.get_one::<String>("run-dir").expect("required by clap"));
    let manifest_path = run_dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_error(&manifest_path, e))?;
    let mut cfg = config_from_manifest(&text)?;
    for (k, v) in overrides(m) {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    let dir = require_sequence(&cfg, "score")?;
    let name = manifest_value(&text, "run.sequence_name")?.unwrap_or_else(|| crate::pipeline::sequence_name(&dir));
    let (frames, _) = load_sequence(&dir, &cfg.load, cfg.tolerance).map_err(PipelineError::from)?;
    let mut scores = Vec::new();
    for (id, token) in manifest_keyframes(&text)? {
        let frame = frames.iter().find(|f| f.token == token).ok_or_else(|| {
            CliError::Runtime(PipelineError::Invalid(format!("keyframe {id}: no frame with timestamp {token}")))
        })?;
        let png = run_dir.join(format!("kf_{id}.png"));
        let (depth, _) = load_depth_png(&png, cfg.load.depth_scale).map_err(PipelineError::from)?;
        let s = score_depth(&depth, &frame.gt_depth, &frame.holes).map_err(PipelineError::from)?;
        scores.push(KeyframeScore::new(&name, id, cfg.mode, s));
    }
    write!(out, "{}", format_report(&scores)).map_err(|e| io_error(Path::new("<stdout>"), e))?;
    Ok(())
}

fn cmd_selftest(out: &mut dyn Write) -> Result<(), CliError> {
    let results = selftest::run_all();
    let failed = results.iter().filter(|r| r.result.is_err()).count();
    for r in &results {
        let line = match &r.result {
            Ok(msg) => format!("PASS {} ({msg})", r.name),
            Err(msg) => format!("FAIL {}: {msg}", r.name),
        };
        writeln!(out, "{line}").map_err(|e| io_error(Path::new("<stdout>"), e))?;
    }
    if failed > 0 {
        return Err(CliError::SelftestFailed(failed, results.len()));
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// results to `out` and diagnostics to `err`. Returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m, out),
        Some(("oracle", m)) => cmd_oracle(m, out),
        Some(("score", m)) => cmd_score(m, out),
        Some(("selftest", _)) => cmd_selftest(out),
        _ => Err(CliError::Usage("missing subcommand".into())),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(err, "{}", command().render_usage());
            }
            e.exit_code()
        }
    }
}
