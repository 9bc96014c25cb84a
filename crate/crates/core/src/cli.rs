//! Command-line front end. [`dispatch`] parses argv, runs one subcommand
//! and returns the process exit code; the `congruence` binary is a thin
//! wrapper around it.
//!
//! Exit codes: 0 success, 2 validation failure (including a failed
//! property check), 64 usage error, 65 malformed or unreadable input.
//!
//! Every run emits one [`RunManifest`]: as `manifest.json` in the output
//! directory when there is one, next to the output file for `analyze`
//! and `gen-scenes --out`, and on stderr otherwise.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::congruence_report;
use crate::attention::AttentionBundle;
use crate::congruence::{cacr_total, oracle_check};
use crate::error::Error;
use crate::gradients::gradcheck;
use crate::toy::eval::winoground_style_eval;
use crate::toy::model::EncoderParams;
use crate::toy::scenes::{SceneWorld, ToyScene, WorldConfig};
use crate::toy::train::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;

pub const THREADS_ENV: &str = "CONGRUENCE_LAB_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "congruence", version, about = "Cross-modal attention congruence tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Congruence loss of one attention bundle (JSON).
    Loss {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Compare the loop oracle with the closed-form target on random partitions.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy encoder; writes metrics.csv and model.json.
    Train {
        /// Training config (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        cacr: Switch,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Text/image/group scores of a trained model on a scene file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Per-bundle congruence report over a directory of bundle files.
    Analyze {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic scenes with their swapped-caption negatives (JSON).
    GenScenes {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Loss { .. } => "loss",
            Command::OracleCheck { .. } => "oracle-check",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::GenScenes { .. } => "gen-scenes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 over the parsed arguments and the contents of every input file.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub version: String,
    pub timestamp_unix: u64,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Data(_) | Error::Io(_) => EXIT_DATA,
            Error::Dimension(_) | Error::Domain(_) | Error::Config(_) | Error::Diverged { .. } => {
                EXIT_VALIDATION
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Files read by a run, kept for the digest.
#[derive(Default)]
struct Inputs {
    hasher: Sha256,
}

impl Inputs {
    fn read(&mut self, path: &Path) -> CliResult<String> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
        self.hasher.update(path.to_string_lossy().as_bytes());
        self.hasher.update([0]);
        self.hasher.update(text.as_bytes());
        self.hasher.update([0]);
        Ok(text)
    }

    fn json<T: DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let text = self.read(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::data(format!("malformed {}: {e}", path.display())))
    }
}

struct Outcome {
    stdout: Option<serde_json::Value>,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    manifest_path: Option<PathBuf>,
    /// Set when the run completed but a checked property failed.
    violated: Option<String>,
}

impl Outcome {
    fn stdout(value: impl Serialize) -> CliResult<Self> {
        Ok(Self {
            stdout: Some(to_value(value)?),
            seed: None,
            artifacts: Vec::new(),
            manifest_path: None,
            violated: None,
        })
    }
}

fn to_value(v: impl Serialize) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Failure::validation(format!("serializing output: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))
}

fn pretty(v: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)
        .map_err(|e| Failure::validation(format!("serializing output: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_bundles(dir: &Path, inputs: &mut Inputs) -> CliResult<Vec<(String, AttentionBundle)>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::data(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::data(format!("no .json bundles in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, inputs.json(p)?))
        })
        .collect()
}

fn run_command(cmd: &Command, inputs: &mut Inputs) -> CliResult<Outcome> {
    match cmd {
        Command::Loss { bundle } => {
            let b: AttentionBundle = inputs.json(bundle)?;
            Outcome::stdout(cacr_total(&b.partition())?)
        }
        Command::OracleCheck { cases, seed } => {
            let report = oracle_check(*cases, *seed)?;
            let mut o = Outcome::stdout(&report)?;
            o.seed = Some(*seed);
            if !report.pass {
                o.violated = Some(format!(
                    "oracle and closed form differ: max relative error {:e} >= {:e}",
                    report.max_rel_err, report.tolerance
                ));
            }
            Ok(o)
        }
        Command::Gradcheck {
            cases,
            probes,
            seed,
        } => {
            let report = gradcheck(*cases, *probes, *seed)?;
            let mut o = Outcome::stdout(&report)?;
            o.seed = Some(*seed);
            if !report.pass {
                o.violated = Some(format!(
                    "analytic and finite-difference gradients differ: worst relative error {:e} >= {:e}",
                    report.worst_rel_err, report.tolerance
                ));
            }
            Ok(o)
        }
        Command::Train {
            config,
            cacr,
            out,
            seed,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(path) => inputs.json(path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            SceneWorld::new(cfg.world.clone())?;
            let (model, log) = train(&cfg, *cacr == Switch::On)?;
            fs::create_dir_all(out)
                .map_err(|e| Failure::validation(format!("cannot create {}: {e}", out.display())))?;
            let metrics_path = out.join("metrics.csv");
            let model_path = out.join("model.json");
            write_file(&metrics_path, log.to_csv_string()?.as_bytes())?;
            write_file(&model_path, &pretty(&model.params)?)?;
            let mut o = Outcome::stdout(log.last())?;
            o.seed = Some(cfg.seed);
            o.artifacts = vec![metrics_path, model_path];
            o.manifest_path = Some(out.join("manifest.json"));
            Ok(o)
        }
        Command::Eval { model, scenes } => {
            let params: EncoderParams = inputs.json(model)?;
            params.validate()?;
            let scenes: Vec<ToyScene> = inputs.json(scenes)?;
            Outcome::stdout(winoground_style_eval(&params, &scenes)?)
        }
        Command::Analyze { bundles, out } => {
            let loaded = load_bundles(bundles, inputs)?;
            let report = congruence_report(&loaded)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_file(out, &buf)?;
            let mut o = Outcome::stdout(serde_json::json!({
                "n": report.rows.len(),
                "mean": report.mean,
                "median": report.median,
            }))?;
            o.artifacts = vec![out.clone()];
            o.manifest_path = Some(sibling_manifest(out));
            Ok(o)
        }
        Command::GenScenes { count, seed, out } => {
            if *count == 0 {
                return Err(Failure::validation("--count must be at least 1"));
            }
            let scenes = SceneWorld::new(WorldConfig::default())?.generate(*count, *seed);
            match out {
                Some(path) => {
                    write_file(path, &pretty(&scenes)?)?;
                    let mut o = Outcome::stdout(serde_json::json!({
                        "scenes": scenes.len(),
                        "positives": count,
                    }))?;
                    o.seed = Some(*seed);
                    o.artifacts = vec![path.clone()];
                    o.manifest_path = Some(sibling_manifest(path));
                    Ok(o)
                }
                None => {
                    let mut o = Outcome::stdout(&scenes)?;
                    o.seed = Some(*seed);
                    Ok(o)
                }
            }
        }
    }
}

/// Caps the global rayon pool from the environment. Only the first call
/// in a process takes effect.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::validation(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // already initialized: keep the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs one command line; returns the exit code.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<i32> {
    configure_threads()?;
    let mut inputs = Inputs::default();
    inputs
        .hasher
        .update(serde_json::to_vec(&cli.command).unwrap_or_default());
    let outcome = run_command(&cli.command, &mut inputs)?;
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        config_digest: hex::encode(inputs.hasher.finalize()),
        seed: outcome.seed,
        artifacts: outcome
            .artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: timestamp(),
    };
    match &outcome.manifest_path {
        Some(path) => write_file(path, &pretty(&manifest)?)?,
        None => {
            let line = serde_json::to_string(&manifest)
                .map_err(|e| Failure::validation(e.to_string()))?;
            let _ = writeln!(stderr, "{line}");
        }
    }
    if let Some(value) = &outcome.stdout {
        let line = serde_json::to_string(value).map_err(|e| Failure::validation(e.to_string()))?;
        writeln!(stdout, "{line}").map_err(|e| Failure::validation(e.to_string()))?;
    }
    match outcome.violated {
        Some(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            Ok(EXIT_VALIDATION)
        }
        None => Ok(EXIT_OK),
    }
}
