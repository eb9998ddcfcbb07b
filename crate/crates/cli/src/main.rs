//! Command-line front end: simulate, ingest, run analyses, and emit
//! report tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mobilab::io::{ingest_lineage_csv, write_lineage_file, write_panel_csv, ErrorMode, IngestOptions};
use mobilab::mobility::GenderFilter;
use mobilab::pipeline::{
    build_bundle, emit_table_preset, generator_config, panel_config, Analysis, InputSource, PipelineConfig,
    ReportBundle, TablePreset,
};
use mobilab::synthkit::{generate_earnings_panel, generate_population, SwedenPreset};
use mobilab::MobilabError;

#[derive(Parser)]
#[command(
    name = "mobilab",
    version,
    about = "Regional inter- and multigenerational mobility toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic population and write the lineage CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the person-year earnings panel.
        #[arg(long)]
        panel: bool,
    },
    /// Validate a lineage CSV.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Check schooling against the categorical code set.
        #[arg(long)]
        categorical: bool,
        /// Skip and log invalid rows instead of stopping at the first.
        #[arg(long)]
        skip_invalid: bool,
    },
    /// Region-level mobility estimates.
    Estimate(Common),
    /// Excess-persistence tests.
    Delta(Common),
    /// Latent parameter recovery and regressions.
    Latent(Common),
    /// Inequality-mobility correlations.
    Gatsby(Common),
    /// Placebo reshuffling of pairs across regions.
    Placebo(Common),
    /// Averages over random subsamples.
    Subsample(Common),
    /// Monte-Carlo recovery grid.
    Recover(Common),
    /// Run the configured analyses and emit table presets.
    Report {
        #[command(flatten)]
        common: Common,
        /// Presets to emit (default: all whose inputs are present).
        #[arg(long = "preset", value_parser = parse_preset)]
        presets: Vec<TablePreset>,
        /// Reuse an existing bundle directory instead of running analyses.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lineage CSV input, replacing the configured input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Population scale of the default calibrated preset.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "unweighted")]
    weighted: bool,
    #[arg(long)]
    unweighted: bool,
    #[arg(long, conflicts_with = "unbalanced")]
    balanced: bool,
    #[arg(long)]
    unbalanced: bool,
    #[arg(long)]
    min_pairs: Option<usize>,
    #[arg(long, value_parser = parse_gender)]
    gender: Option<GenderFilter>,
}

fn parse_gender(s: &str) -> Result<GenderFilter, String> {
    GenderFilter::parse(s).ok_or_else(|| format!("expected all, sons or daughters, got {s:?}"))
}

fn parse_preset(s: &str) -> Result<TablePreset, String> {
    TablePreset::parse(s).ok_or_else(|| {
        let names: Vec<&str> = TablePreset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown preset {s:?}; expected one of {}", names.join(", "))
    })
}

fn flag(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl Common {
    fn config(&self, analyses: &[Analysis]) -> Result<PipelineConfig, MobilabError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::new(0, InputSource::Preset(SwedenPreset::default()), []),
        };
        if let Some(path) = &self.input {
            cfg.input = InputSource::LineageCsv {
                path: path.clone(),
                categorical_schooling: false,
                skip_invalid: false,
            };
        }
        if let Some(scale) = self.scale {
            match &mut cfg.input {
                InputSource::Preset(p) => p.scale = scale,
                _ => {
                    return Err(MobilabError::Config(
                        "--scale applies only to the calibrated preset".into(),
                    ))
                }
            }
        }
        if !analyses.is_empty() {
            cfg.analyses = analyses.iter().copied().collect();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        let o = &mut cfg.options;
        if let Some(w) = flag(self.weighted, self.unweighted) {
            o.weighted = w;
        }
        if let Some(b) = flag(self.balanced, self.unbalanced) {
            o.balanced = b;
        }
        if let Some(n) = self.min_pairs {
            o.min_pairs = n;
        }
        if let Some(g) = self.gender {
            o.gender = g;
        }
        Ok(cfg)
    }
}

fn error_summary(e: &MobilabError) -> String {
    let mut v = serde_json::json!({
        "error": e.to_string(),
        "exit_code": e.exit_code(),
    });
    if let MobilabError::Validation { line, column, .. } = e {
        v["line"] = (*line).into();
        v["column"] = column.clone().into();
    }
    v.to_string()
}

fn run_analysis(common: &Common, analysis: Analysis) -> Result<i32, MobilabError> {
    let cfg = common.config(&[analysis])?;
    finish(build_bundle(&cfg)?, &cfg.output_dir)
}

fn finish(bundle: ReportBundle, out: &Path) -> Result<i32, MobilabError> {
    bundle.write(out)?;
    for f in bundle.manifest.files.keys() {
        println!("{}", out.join(f).display());
    }
    for f in &bundle.manifest.failures {
        eprintln!(
            "{}",
            serde_json::json!({"analysis": f.analysis, "error": f.error, "exit_code": f.exit_code})
        );
    }
    Ok(bundle.exit_code())
}

fn simulate(common: &Common, panel: bool) -> Result<i32, MobilabError> {
    let cfg = common.config(&[])?;
    let records = generate_population(&generator_config(&cfg)?)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("lineages.csv");
    write_lineage_file(&path, &records)?;
    println!("{}", path.display());
    if panel || cfg.options.earnings_panel {
        let rows = generate_earnings_panel(&records, &panel_config(&cfg))?;
        let path = cfg.output_dir.join("panel.csv");
        write_panel_csv(std::io::BufWriter::new(std::fs::File::create(&path)?), &rows)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn ingest(common: &Common, categorical: bool, skip_invalid: bool) -> Result<i32, MobilabError> {
    let path = common
        .input
        .as_ref()
        .ok_or_else(|| MobilabError::Config("ingest needs --input <lineage csv>".into()))?;
    let opts = IngestOptions {
        mode: if skip_invalid {
            ErrorMode::SkipAndLog
        } else {
            ErrorMode::FailFast
        },
        categorical_schooling: categorical,
    };
    let report = ingest_lineage_csv(path, &opts)?;
    let summary = serde_json::json!({
        "rows_read": report.rows_read,
        "records": report.records.len(),
        "errors": report.errors,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ingest_report.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(if report.errors.is_empty() { 0 } else { 3 })
}

fn report(common: &Common, presets: &[TablePreset], bundle_dir: Option<&Path>) -> Result<i32, MobilabError> {
    let (bundle, out, code) = match bundle_dir {
        Some(dir) => {
            let out = common.out.clone().unwrap_or_else(|| dir.to_path_buf());
            (ReportBundle::load(dir)?, out, 0)
        }
        None => {
            let mut cfg = common.config(&[])?;
            if cfg.analyses.is_empty() {
                let wanted = if presets.is_empty() {
                    TablePreset::ALL.to_vec()
                } else {
                    presets.to_vec()
                };
                cfg.analyses = wanted
                    .iter()
                    .flat_map(|p| p.requires().iter().map(|(_, a)| *a))
                    .collect();
            }
            let bundle = build_bundle(&cfg)?;
            let code = finish(bundle.clone(), &cfg.output_dir)?;
            (bundle, cfg.output_dir, code)
        }
    };
    let dir = out.join("presets");
    std::fs::create_dir_all(&dir)?;
    let explicit = !presets.is_empty();
    let chosen = if explicit {
        presets.to_vec()
    } else {
        TablePreset::ALL.to_vec()
    };
    for p in chosen {
        match emit_table_preset(&bundle, p) {
            Ok(t) => {
                let path = dir.join(format!("{}.csv", p.name()));
                t.write_file(&path)?;
                println!("{}", path.display());
            }
            Err(e @ MobilabError::Dependency(_)) if !explicit => log::info!("skipping {}: {e}", p.name()),
            Err(e) => return Err(e),
        }
    }
    Ok(code)
}

fn configure_threads() -> Result<(), MobilabError> {
    if let Ok(v) = std::env::var("MOBILAB_THREADS") {
        let n: usize =
            v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                MobilabError::Config(format!("MOBILAB_THREADS must be a positive integer, got {v:?}"))
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MobilabError::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32, MobilabError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { common, panel } => simulate(&common, panel),
        Command::Ingest {
            common,
            categorical,
            skip_invalid,
        } => ingest(&common, categorical, skip_invalid),
        Command::Estimate(c) => run_analysis(&c, Analysis::Estimates),
        Command::Delta(c) => run_analysis(&c, Analysis::Delta),
        Command::Latent(c) => run_analysis(&c, Analysis::Latent),
        Command::Gatsby(c) => run_analysis(&c, Analysis::Gatsby),
        Command::Placebo(c) => run_analysis(&c, Analysis::Placebo),
        Command::Subsample(c) => run_analysis(&c, Analysis::Subsamples),
        Command::Recover(c) => run_analysis(&c, Analysis::Recovery),
        Command::Report {
            common,
            presets,
            bundle,
        } => report(&common, &presets, bundle.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", error_summary(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
