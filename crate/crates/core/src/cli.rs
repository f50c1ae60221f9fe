//! The `hired` command line: `run`, `stats`, `synth` and `viz`.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, inconsistent
//! inputs, budget violations in `stats`), 2 on I/O failures. Every error is
//! reported on one line as `error: <flag-or-file>: <reason>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{Aggregation, Budget, Distribution, EngineConfig};
use crate::efficiency::{corpus_stats, estimate_cost, ModelProfile};
use crate::error::EngineError;
use crate::geometry::{plan_partitions, Grid, DEFAULT_BASE_RESOLUTION, DEFAULT_CANDIDATES};
use crate::selector::run_hired;
use crate::tensor_io::{
    generate_synthetic_dump, generate_with_meta, load_attention_dump, read_selection_manifest,
    save_attention_dump, DumpError, DumpMeta, ManifestError, SelectionManifest,
};

const BUDGET_HELP: &str = "Visual token budget. Values in (0, 1) are fractions of all \
(k+1)*N_ViT tokens; exactly 1 (or 1.0) means 100%, i.e. full capacity; 0 and whole \
numbers above 1 are absolute token counts.";

#[derive(Debug, Parser)]
#[command(
    name = "hired",
    version,
    about = "Fixed-budget visual token dropping for high-resolution VLMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Allocate a token budget over a dump's partitions and select tokens
    Run(RunArgs),
    /// Token-usage statistics over a set of selection manifests
    Stats(StatsArgs),
    /// Write a seeded synthetic attention dump
    Synth(SynthArgs),
    /// Render one partition's keep mask as a binary PGM image
    Viz(VizArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Attention dump directory (manifest.json + NPY files)
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, help = BUDGET_HELP)]
    budget: Option<String>,
    /// Share of the budget reserved for the full image, in [0, 1] [default: 0.5]
    #[arg(long)]
    alpha: Option<f64>,
    /// Layer whose full-image attention drives allocation [default: 0]
    #[arg(long)]
    init_layer: Option<usize>,
    /// Layer whose attention ranks tokens [default: 22]
    #[arg(long)]
    final_layer: Option<usize>,
    /// Head aggregation: sum, mean, max or head:N [default: sum]
    #[arg(long)]
    agg: Option<String>,
    /// Sub-image budget split: content or even [default: content]
    #[arg(long)]
    distribution: Option<String>,
    /// JSON file with engine settings; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Selection manifest to write
    #[arg(long)]
    out: PathBuf,
    /// Embed per-token importance scores in the manifest
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    emit_scores: Option<bool>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Glob matching selection manifests
    #[arg(long)]
    manifests: String,
    /// Absolute token budget each manifest must respect
    #[arg(long)]
    budget: usize,
    /// Also write the statistics as JSON to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Number of partitions including the full image [default: 5]
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    /// Patch tokens per partition
    #[arg(long, default_value_t = 576)]
    tokens: usize,
    /// Comma-separated model layers to capture
    #[arg(long, default_value = "0,11,22")]
    layers: String,
    /// Choose the sub-image grid for an image of this size (WxH pixels)
    #[arg(long)]
    image: Option<String>,
    /// Candidate grids for --image, comma-separated WxH
    /// [default: 1x1,1x2,2x1,2x2,1x3,3x1,1x4,4x1]
    #[arg(long)]
    grids: Option<String>,
    /// Encoder input resolution used with --image
    #[arg(long, default_value_t = DEFAULT_BASE_RESOLUTION)]
    base_resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    partition: usize,
    /// Output PGM (P5) file
    #[arg(long)]
    out: PathBuf,
}

/// Engine settings as read from `--config`. Unknown keys are ignored.
#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    budget: Option<Budget>,
    alpha: Option<f64>,
    init_layer: Option<usize>,
    final_layer: Option<usize>,
    aggregation: Option<Aggregation>,
    distribution: Option<Distribution>,
    emit_scores: Option<bool>,
}

#[derive(Debug)]
struct CliError {
    target: String,
    reason: String,
    code: i32,
}

impl CliError {
    fn invalid(target: impl Into<String>, reason: impl ToString) -> Self {
        Self {
            target: target.into(),
            reason: reason.to_string(),
            code: 1,
        }
    }

    fn io(target: impl Into<String>, reason: impl ToString) -> Self {
        Self {
            target: target.into(),
            reason: reason.to_string(),
            code: 2,
        }
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the subcommand,
/// writing reports to `out` and errors to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => return report_parse_error(e, out, err),
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Viz(a) => cmd_viz(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {}", e.target, e.reason);
            e.code
        }
    }
}

fn report_parse_error(e: clap::Error, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        _ => {}
    }
    let target = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => s.split_whitespace().next().unwrap_or("args").to_string(),
        Some(ContextValue::Strings(v)) if !v.is_empty() => {
            v[0].split_whitespace().next().unwrap_or("args").to_string()
        }
        _ => "args".to_string(),
    };
    let rendered = e.render().to_string();
    let mut lines = rendered.lines();
    let headline = lines
        .next()
        .unwrap_or_default()
        .trim_start_matches("error: ")
        .to_string();
    let _ = writeln!(err, "error: {target}: {headline}");
    for line in lines {
        let _ = writeln!(err, "{line}");
    }
    1
}

fn read_config_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(display(path), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(display(path), e))
}

fn dump_error(dir: &Path, e: DumpError) -> CliError {
    let target = match &e {
        DumpError::ManifestMissing(p) => display(p),
        _ => display(dir),
    };
    if e.is_io() {
        CliError::io(target, e)
    } else {
        CliError::invalid(target, e)
    }
}

fn engine_error(dump: &Path, e: EngineError) -> CliError {
    let target = match &e {
        EngineError::MissingLayer { role: "init", .. } => "--init-layer".to_string(),
        EngineError::MissingLayer { .. } => "--final-layer".to_string(),
        EngineError::InvalidHead { .. } => "--agg".to_string(),
        EngineError::InvalidConfig { field: "alpha", .. } => "--alpha".to_string(),
        EngineError::InvalidConfig {
            field: "budget", ..
        } => "--budget".to_string(),
        _ => display(dump),
    };
    CliError::invalid(target, e)
}

fn manifest_error(path: &Path, e: ManifestError) -> CliError {
    match e {
        ManifestError::Io(_) => CliError::io(display(path), e),
        ManifestError::Parse(_) => CliError::invalid(display(path), e),
    }
}

fn resolve_config(a: &RunArgs) -> Result<(EngineConfig, bool), CliError> {
    let file = match &a.config {
        Some(path) => read_config_file(path)?,
        None => ConfigFile::default(),
    };
    let defaults = EngineConfig::default();
    let budget = match &a.budget {
        Some(s) => s
            .parse::<Budget>()
            .map_err(|r| CliError::invalid("--budget", r))?,
        None => file.budget.ok_or_else(|| {
            CliError::invalid("--budget", "required (pass the flag or set it in --config)")
        })?,
    };
    let aggregation = match &a.agg {
        Some(s) => s.parse().map_err(|r| CliError::invalid("--agg", r))?,
        None => file.aggregation.unwrap_or(defaults.aggregation),
    };
    let distribution = match &a.distribution {
        Some(s) => s
            .parse()
            .map_err(|r| CliError::invalid("--distribution", r))?,
        None => file.distribution.unwrap_or(defaults.distribution),
    };
    let alpha = a.alpha.or(file.alpha).unwrap_or(defaults.alpha);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::invalid(
            "--alpha",
            format!("must lie in [0, 1], got {alpha}"),
        ));
    }
    let config = EngineConfig {
        budget,
        alpha,
        init_layer: a
            .init_layer
            .or(file.init_layer)
            .unwrap_or(defaults.init_layer),
        final_layer: a
            .final_layer
            .or(file.final_layer)
            .unwrap_or(defaults.final_layer),
        aggregation,
        distribution,
    };
    let emit_scores = a.emit_scores.or(file.emit_scores).unwrap_or(false);
    Ok((config, emit_scores))
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> CliResult {
    let (config, emit_scores) = resolve_config(&a)?;
    let dump = load_attention_dump(&a.dump).map_err(|e| dump_error(&a.dump, e))?;
    let layout = dump
        .layout()
        .map_err(|e| CliError::invalid(display(&a.dump), e))?;
    let (plan, result) =
        run_hired(&dump, &layout, &config).map_err(|e| engine_error(&a.dump, e))?;
    let result = if emit_scores {
        result
    } else {
        result.without_importance()
    };
    let manifest = SelectionManifest::new(&result, &plan, &config);
    fs::write(&a.out, manifest.to_json()).map_err(|e| CliError::io(display(&a.out), e))?;

    let allocations: Vec<String> = plan.allocations().map(|n| n.to_string()).collect();
    let reference = (dump.tokens_per_partition() * (dump.k() + 1)) as u64;
    let cost = estimate_cost(
        result.total_kept as u64,
        reference,
        &ModelProfile::VICUNA_7B_FP16,
    );
    let _ = writeln!(
        out,
        "total_kept={} budget={} allocations=[{}] kv_bytes_proxy={} prefill_ratio_proxy={:.4}",
        result.total_kept,
        plan.budget,
        allocations.join(","),
        cost.kv_bytes,
        cost.quadratic_ratio,
    );
    Ok(())
}

fn cmd_stats(a: StatsArgs, out: &mut dyn Write) -> CliResult {
    let paths: Vec<PathBuf> = glob::glob(&a.manifests)
        .map_err(|e| CliError::invalid("--manifests", e))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io("--manifests", e))?;
    if paths.is_empty() {
        return Err(CliError::invalid("--manifests", "no manifests matched"));
    }
    let mut manifests = Vec::with_capacity(paths.len());
    for p in &paths {
        manifests.push(read_selection_manifest(p).map_err(|e| manifest_error(p, e))?);
    }
    let stats = corpus_stats(&manifests, a.budget);
    let json = stats.to_json();
    let _ = write!(out, "{stats}");
    let _ = write!(out, "{json}");
    if let Some(path) = &a.out {
        fs::write(path, &json).map_err(|e| CliError::io(display(path), e))?;
    }
    if stats.violations > 0 {
        return Err(CliError::invalid(
            "--budget",
            format!(
                "{} of {} manifests keep more than {} tokens",
                stats.violations, stats.sample_count, a.budget
            ),
        ));
    }
    Ok(())
}

fn parse_list<T, F>(flag: &str, s: &str, parse: F) -> Result<Vec<T>, CliError>
where
    F: Fn(&str) -> Result<T, String>,
{
    s.split(',')
        .map(|item| parse(item.trim()).map_err(|r| CliError::invalid(flag, r)))
        .collect()
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let layers = parse_list("--layers", &a.layers, |s| {
        s.parse::<usize>()
            .map_err(|_| format!("'{s}' is not a layer index"))
    })?;
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::invalid("--layers", "must be strictly increasing"));
    }
    if a.heads == 0 {
        return Err(CliError::invalid("--heads", "must be at least 1"));
    }
    if a.tokens == 0 {
        return Err(CliError::invalid("--tokens", "must be at least 1"));
    }

    let dump = match &a.image {
        Some(image) => {
            let size: Grid = image.parse().map_err(|e| CliError::invalid("--image", e))?;
            let candidates = match &a.grids {
                Some(list) => parse_list("--grids", list, |s| {
                    s.parse::<Grid>().map_err(|e| e.to_string())
                })?,
                None => DEFAULT_CANDIDATES.to_vec(),
            };
            let patch_grid = Grid::most_square(a.tokens);
            let layout =
                plan_partitions(size.w, size.h, &candidates, a.base_resolution, patch_grid)
                    .map_err(|e| CliError::invalid("--image", e))?;
            if let Some(p) = a.partitions {
                if p != layout.k() + 1 {
                    return Err(CliError::invalid(
                        "--partitions",
                        format!(
                            "{p} conflicts with the {} partitions chosen for --image {image}",
                            layout.k() + 1
                        ),
                    ));
                }
            }
            let meta = DumpMeta {
                image_size: layout.image_size,
                grid: layout.grid,
                patch_grid,
                num_heads: a.heads,
                layers_captured: layers,
            };
            generate_with_meta(a.seed, meta)
        }
        None => {
            let partitions = a.partitions.unwrap_or(5);
            if partitions == 0 {
                return Err(CliError::invalid("--partitions", "must be at least 1"));
            }
            generate_synthetic_dump(a.seed, partitions - 1, a.heads, a.tokens, &layers)
        }
    }
    .map_err(|e| CliError::invalid("synth", e))?;

    save_attention_dump(&dump, &a.out).map_err(|e| dump_error(&a.out, e))?;
    let grid = dump
        .meta()
        .grid
        .map_or_else(|| "none".to_string(), |g| g.to_string());
    let _ = writeln!(
        out,
        "wrote {} partitions (grid {}, patch grid {}, {} heads, layers {}) to {}",
        dump.k() + 1,
        grid,
        dump.meta().patch_grid,
        dump.num_heads(),
        a.layers,
        a.out.display()
    );
    Ok(())
}

/// Binary PGM (P5): kept tokens white, dropped tokens black, raster order.
pub fn render_mask_pgm(patch_grid: Grid, kept: &[usize]) -> Vec<u8> {
    let mut pixels = vec![0u8; patch_grid.area()];
    for &j in kept {
        pixels[j] = 255;
    }
    let mut bytes = format!("P5\n{} {}\n255\n", patch_grid.w, patch_grid.h).into_bytes();
    bytes.extend_from_slice(&pixels);
    bytes
}

fn cmd_viz(a: VizArgs, out: &mut dyn Write) -> CliResult {
    let manifest =
        read_selection_manifest(&a.manifest).map_err(|e| manifest_error(&a.manifest, e))?;
    let dump = load_attention_dump(&a.dump).map_err(|e| dump_error(&a.dump, e))?;
    if manifest.partitions.len() != dump.k() + 1 {
        return Err(CliError::invalid(
            display(&a.manifest),
            format!(
                "manifest has {} partitions, dump has {}",
                manifest.partitions.len(),
                dump.k() + 1
            ),
        ));
    }
    let record = manifest
        .partitions
        .iter()
        .find(|p| p.id == a.partition)
        .ok_or_else(|| {
            CliError::invalid(
                "--partition",
                format!("partition {} not in manifest", a.partition),
            )
        })?;
    let patch_grid = dump.meta().patch_grid;
    if let Some(&j) = record
        .kept_indices
        .iter()
        .find(|&&j| j >= patch_grid.area())
    {
        return Err(CliError::invalid(
            display(&a.manifest),
            format!(
                "token {j} outside the {patch_grid} patch grid of {}",
                a.dump.display()
            ),
        ));
    }
    fs::write(&a.out, render_mask_pgm(patch_grid, &record.kept_indices))
        .map_err(|e| CliError::io(display(&a.out), e))?;
    let _ = writeln!(
        out,
        "partition {}: {} of {} tokens kept -> {}",
        a.partition,
        record.kept_indices.len(),
        patch_grid.area(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn invoke(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("hired").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn unknown_flag_is_validation_error() {
        let (code, _, err) = invoke(&["stats", "--manifests", "x", "--budget", "1", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error: --bogus: "), "{err}");
        assert!(err.contains("Usage:"));
    }

    #[test]
    fn version_and_help() {
        let (code, out, _) = invoke(&["--version"]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), format!("hired {}", crate::VERSION));
        let (code, out, _) = invoke(&["run", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("full capacity"));
    }

    #[test]
    fn pgm_layout() {
        let bytes = render_mask_pgm(Grid::new(3, 2), &[0, 4]);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 0]);
    }
}
