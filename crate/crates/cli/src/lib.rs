//! Command-line front end: configuration, dispatch and run provenance.

pub mod commands;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use perfowave::{parse_config, Error, TensorVariant};

use commands::Overrides;
use manifest::RunLog;

#[derive(Debug, Parser)]
#[command(
    name = "perfowave",
    version,
    about = "Stochastic waves on perforated domains and their homogenized limit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the cell problem and write the effective tensor report.
    Cell {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<TensorVariant>,
    },
    /// Integrate one path of the perforated system.
    Micro {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate one path of the homogenized equation.
    Macro {
        #[command(flatten)]
        common: Common,
        /// Tensor JSON (a `cell` report or a bare tensor); solved from `[cell]` when absent.
        #[arg(long)]
        tensor: Option<PathBuf>,
    },
    /// Check the discrete energy identity over a list of time steps.
    EnergyCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Compare micro and macro path-functional laws over an eps list.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, strictly decreasing.
        #[arg(long, value_delimiter = ',')]
        eps_list: Option<Vec<f64>>,
        #[arg(long)]
        tensor: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory, or the main output file when it ends in `.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "PERFOWAVE_THREADS")]
    pub threads: Option<usize>,
}

fn parse_variant(s: &str) -> Result<TensorVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Cell { .. } => "cell",
            Command::Micro { .. } => "micro",
            Command::Macro { .. } => "macro",
            Command::EnergyCheck { .. } => "energy-check",
            Command::Converge { .. } => "converge",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Cell { common, .. }
            | Command::Micro { common }
            | Command::Macro { common, .. }
            | Command::EnergyCheck { common }
            | Command::Converge { common, .. } => common,
        }
    }

    fn overrides(&self) -> Overrides {
        let mut ov = Overrides {
            seed: self.common().seed,
            ..Overrides::default()
        };
        match self {
            Command::Cell { variant, .. } => ov.variant = *variant,
            Command::Macro { tensor, .. } => ov.tensor = tensor.clone(),
            Command::Converge {
                eps_list, tensor, ..
            } => {
                ov.eps_list = eps_list.clone();
                ov.tensor = tensor.clone();
            }
            _ => {}
        }
        ov
    }

    /// Name of the primary output for commands whose `--out` may be a file.
    fn primary_file(&self) -> Option<&'static str> {
        match self {
            Command::Cell { .. } => Some("A_star.json"),
            Command::Converge { .. } => Some("report.json"),
            _ => None,
        }
    }
}

/// Splits `--out` into the run directory and the primary output file.
fn layout(cmd: &Command, out: Option<&Path>, fallback: Option<&str>) -> (PathBuf, Option<PathBuf>) {
    let is_file = out.is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    match (out, is_file, cmd.primary_file()) {
        (Some(p), true, Some(_)) => {
            let dir = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            (dir.to_path_buf(), Some(p.to_path_buf()))
        }
        _ => {
            let dir = out
                .map(Path::to_path_buf)
                .or_else(|| fallback.map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("perfowave-out"));
            let file = cmd.primary_file().map(|f| dir.join(f));
            (dir, file)
        }
    }
}

/// Runs one command end to end and returns the process exit code. The
/// manifest is written whatever happens.
pub fn dispatch(cli: Cli) -> i32 {
    let cmd = &cli.command;
    let common = cmd.common();
    let threads = common.threads.unwrap_or(0);
    if threads > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let parsed = parse_config(&common.config);
    let fallback = parsed.as_ref().ok().and_then(|c| c.output_dir.clone());
    let (dir, primary) = layout(cmd, common.out.as_deref(), fallback.as_deref());
    let mut log = RunLog::new(cmd.name(), dir.clone(), rayon::current_num_threads());
    let result = (|| -> Result<(), (String, Error)> {
        let tag = |stage: &str| {
            let stage = stage.to_string();
            move |e: Error| (stage.clone(), e)
        };
        let mut cfg = parsed.map_err(tag("config"))?;
        let ov = cmd.overrides();
        commands::apply_overrides(&mut cfg, &ov);
        let issues = cfg.validate();
        if !issues.is_empty() {
            return Err(("config".into(), Error::ConfigIssues(issues)));
        }
        std::fs::create_dir_all(&dir).map_err(|e| ("setup".into(), e.into()))?;
        let effective = toml::to_string(&cfg).map_err(|e| {
            (
                "setup".into(),
                Error::Validation(format!("cannot serialize config: {e}")),
            )
        })?;
        let copy = log.path("config.toml");
        std::fs::write(&copy, &effective).map_err(|e| ("setup".into(), e.into()))?;
        log.output(copy);
        log.set_config(&effective, cfg.seed);
        let stage = cmd.name();
        match cmd {
            Command::Cell { .. } => commands::cell(&cfg, &mut log, primary.as_deref().unwrap()),
            Command::Micro { .. } => commands::micro(&cfg, &mut log),
            Command::Macro { .. } => commands::macroscale(&cfg, &ov, &mut log),
            Command::EnergyCheck { .. } => commands::energy_check(&cfg, &mut log),
            Command::Converge { .. } => {
                commands::converge(&cfg, &ov, &mut log, primary.as_deref().unwrap())
            }
        }
        .map_err(tag(stage))
    })();
    let error = result
        .as_ref()
        .err()
        .map(|(stage, e)| commands::error_json(stage, e));
    if let Some(e) = &error {
        eprintln!("{}", serde_json::to_string(e).unwrap_or_default());
    }
    let manifest = log.finish(error.clone());
    match (manifest, error) {
        (Err(e), _) => {
            eprintln!(
                "{}",
                serde_json::json!({ "stage": "manifest", "kind": "io", "message": e.to_string(), "issues": [] })
            );
            1
        }
        (Ok(path), None) => {
            println!("{}", path.display());
            0
        }
        (Ok(_), Some(_)) => 1,
    }
}
