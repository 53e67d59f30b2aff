//! `refilter <stage> --config <path> [--set key=value ...] [--deterministic]`

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use refilter::pipeline::{run_stage, PipelineConfig, Stage, StageContext};

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "refilter",
    version,
    about = "Recall-expand-filter entity typing"
)]
struct Cli {
    /// gen-data, train-recall, recall, expand, train-filter, predict, eval,
    /// bench, gradcheck, equivalence or ablate
    stage: String,

    /// TOML configuration file
    #[arg(long)]
    config: PathBuf,

    /// Override one configuration value, e.g. `--set filter.k=16`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Keep wall-clock measurements out of artifacts; requires an explicit seed
    #[arg(long)]
    deterministic: bool,
}

/// Marks errors that should exit with the configuration status.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("bad key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| config_error(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut table: toml::Table = toml::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", cli.config.display())))?;
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    if cli.deterministic && !table.contains_key("seed") {
        return Err(config_error(
            "--deterministic needs an explicit `seed` in the config or via --set",
        ));
    }
    let mut layered =
        toml::Table::try_from(PipelineConfig::default()).context("serialising defaults")?;
    merge(&mut layered, table);
    let mut config: PipelineConfig = toml::Value::Table(layered)
        .try_into()
        .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
    let base = cli.config.parent().unwrap_or(Path::new("")).to_path_buf();
    resolve(&base, &mut config.work_dir);
    for p in [
        &mut config.data.types,
        &mut config.data.train,
        &mut config.data.dev,
        &mut config.data.test,
    ]
    .into_iter()
    .flatten()
    {
        resolve(&base, p);
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let stage: Stage = cli
        .stage
        .parse()
        .map_err(|e: refilter::Error| config_error(e.to_string()))?;
    let config = load_config(cli)?;
    let ctx = StageContext::new(config, cli.deterministic)?;
    let outcome = run_stage(stage, &ctx).with_context(|| format!("stage `{stage}` failed"))?;
    println!("{stage}: {}", outcome.summary.trim_end());
    if let Some(s) = outcome.manifest.seconds {
        println!("{stage}: done in {s:.1}s");
    }
    if outcome.manifest.outputs.is_empty() {
        bail!("stage `{stage}` produced no artifacts");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<refilter::Error>() {
        Some(
            refilter::Error::Config(_)
            | refilter::Error::Validation(_)
            | refilter::Error::Capacity { .. },
        ) => EXIT_CONFIG,
        Some(refilter::Error::MissingArtifact { .. } | refilter::Error::StaleArtifact { .. }) => {
            EXIT_MISSING
        }
        Some(refilter::Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "filter.k=16").unwrap();
        apply_override(&mut t, "filter.variant=mcce-b").unwrap();
        apply_override(&mut t, "ablation.flags=[\"full\", \"no-c2c\"]").unwrap();
        apply_override(&mut t, "expand_enabled=false").unwrap();
        assert_eq!(t["filter"]["k"].as_integer(), Some(16));
        assert_eq!(t["filter"]["variant"].as_str(), Some("mcce-b"));
        assert_eq!(t["ablation"]["flags"].as_array().map(Vec::len), Some(2));
        assert_eq!(t["expand_enabled"].as_bool(), Some(false));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "filter.k.x=1").is_err());
    }

    #[test]
    fn nested_defaults_survive_partial_tables() {
        let mut layered = toml::Table::try_from(PipelineConfig::default()).unwrap();
        let top: toml::Table = toml::from_str("[recall.train]\nepochs = 3").unwrap();
        merge(&mut layered, top);
        let c: PipelineConfig = toml::Value::Table(layered).try_into().unwrap();
        let d = PipelineConfig::default();
        assert_eq!(c.recall.train.epochs, 3);
        assert_eq!(c.recall.train.adam, d.recall.train.adam);
        assert_eq!(c.filter, d.filter);
    }
}
