//! Command-line front end for `dsa-core`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
//! format error, 4 configuration/weight mismatch.

pub mod bench;
pub mod features;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsa_core::complexity::{
    self, streaming_preset, streaming_report, table_custom, table_generate, CostQuery, Preset, TableRow,
    PUBLISHED_STREAMING_FACTORS,
};
use dsa_core::encoder::{encoder_forward, init_weights, load_weights_for, save_weights};
use dsa_core::{
    run_suite, AttentionType, DilationConfig, EncoderConfig, Error as CoreError, Mechanism, Precision,
    RestrictionWindow, Suite,
};

use crate::bench::BenchSettings;
use crate::features::{read_features, write_features, FeatureFormat};

/// JSON run configuration: the encoder configuration, including window,
/// dilation, seed and precision. Unknown keys are rejected.
pub type RunConfig = EncoderConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Format(String),
    Mismatch(String),
    VerificationFailed(usize),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Format(m) => write!(f, "format error: {m}"),
            CliError::Mismatch(m) => write!(f, "mismatch: {m}"),
            CliError::VerificationFailed(n) => write!(f, "{n} verification check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerificationFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Format(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    /// Classifies a core error raised while loading or running files.
    fn from_core(e: CoreError) -> Self {
        match e {
            CoreError::Io(_) => CliError::Io(e.to_string()),
            CoreError::ShapeMismatch { .. }
            | CoreError::ConfigMismatch { .. }
            | CoreError::DimensionMismatch { .. } => CliError::Mismatch(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dsa",
    version,
    about = "Dilated self-attention: cost tables, encoder runs, verification, benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiplication counts for preset tables or a custom configuration.
    Complexity(ComplexityArgs),
    /// Run the encoder on a feature file.
    Encode(EncodeArgs),
    /// Write seeded initial weights for a configuration.
    InitWeights(InitWeightsArgs),
    /// Run verification suites.
    Verify(VerifyArgs),
    /// Time self-attention layers over a range of sequence lengths.
    Bench(BenchArgs),
    /// Per-frame streaming cost against an unbounded look-back baseline.
    StreamingCost(StreamingArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Wsj,
    Librispeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Md,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TypeArg {
    Full,
    Restricted,
    Dilated,
}

impl From<TypeArg> for AttentionType {
    fn from(t: TypeArg) -> Self {
        match t {
            TypeArg::Full => AttentionType::Full,
            TypeArg::Restricted => AttentionType::Restricted,
            TypeArg::Dilated => AttentionType::Dilated,
        }
    }
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse::<Mechanism>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Published table configuration.
    #[arg(long, value_enum, conflicts_with_all = ["n", "d_model", "attention", "nu_lb", "nu_la", "window", "chunk", "mechanism", "heads", "d_in", "exact"])]
    pub preset: Option<PresetArg>,
    /// Sequence length N.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub d_model: Option<u64>,
    #[arg(long = "type", value_enum)]
    pub attention: Option<TypeArg>,
    /// Look-back frames.
    #[arg(long, conflicts_with = "window")]
    pub nu_lb: Option<usize>,
    /// Look-ahead frames.
    #[arg(long, conflicts_with = "window")]
    pub nu_la: Option<usize>,
    /// Symmetric window size R (odd).
    #[arg(long = "r")]
    pub window: Option<usize>,
    /// Chunk size M.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// subsample | mp | ap | ap+pp
    #[arg(long, value_parser = parse_mechanism)]
    pub mechanism: Option<Mechanism>,
    /// Pooling heads B.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Post-processing bottleneck width.
    #[arg(long)]
    pub d_in: Option<usize>,
    /// Sum clipped window sizes instead of assuming R keys per query.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, value_enum, default_value = "md")]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    All,
    Oracle,
    Gradients,
    Complexity,
    Streaming,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Oracle => Suite::Oracle,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Complexity => Suite::Complexity,
            SuiteArg::Streaming => Suite::Streaming,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchFormat {
    Md,
    Csv,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Ascending sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    pub n_list: Vec<usize>,
    #[arg(
        long = "type",
        value_enum,
        value_delimiter = ',',
        default_value = "full,restricted,dilated"
    )]
    pub types: Vec<TypeArg>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value = "md")]
    pub format: BenchFormat,
    /// Symmetric window size R.
    #[arg(long = "r", default_value_t = 25)]
    pub window: usize,
    #[arg(long, default_value_t = 20)]
    pub chunk: usize,
    #[arg(long, value_parser = parse_mechanism, default_value = "mp")]
    pub mechanism: Mechanism,
    /// Pooling heads B.
    #[arg(long, default_value_t = 1)]
    pub pool_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    #[arg(long, default_value_t = 192)]
    pub d_model: usize,
    /// Attention heads of the benchmarked layer.
    #[arg(long, default_value_t = 1)]
    pub attn_heads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StreamingArgs {
    /// Seconds of input before the query frame; several values allowed.
    #[arg(long, value_delimiter = ',', default_value = "4,8", allow_negative_numbers = true)]
    pub past_seconds: Vec<f64>,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    pub frame_ms: f64,
    #[arg(long, default_value_t = 9)]
    pub nu_lb: usize,
    #[arg(long, default_value_t = 1)]
    pub nu_la: usize,
    #[arg(long, default_value_t = 15)]
    pub chunk: usize,
    /// Pooling heads B.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    #[arg(long, default_value_t = 512)]
    pub d_model: u64,
    #[arg(long, value_parser = parse_mechanism, default_value = "ap+pp")]
    pub mechanism: Mechanism,
}

/// Runs a parsed command, writing its report to `out` and any notes to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Complexity(a) => cmd_complexity(&a, out, err),
        Command::Encode(a) => cmd_encode(&a),
        Command::InitWeights(a) => cmd_init_weights(&a),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::StreamingCost(a) => cmd_streaming_cost(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn custom_query(a: &ComplexityArgs) -> Result<CostQuery, CliError> {
    let missing = |flag: &str| CliError::Usage(format!("custom rows need --{flag} (or use --preset)"));
    let n = a.n.ok_or_else(|| missing("n"))?;
    let d_model = a.d_model.ok_or_else(|| missing("d-model"))?;
    let attention: AttentionType = a.attention.ok_or_else(|| missing("type"))?.into();
    let window = match (a.window, a.nu_lb, a.nu_la) {
        (Some(r), _, _) => RestrictionWindow::symmetric(r).map_err(usage)?,
        (None, Some(lb), Some(la)) => RestrictionWindow::new(lb, la),
        (None, None, None) if attention == AttentionType::Full => RestrictionWindow::new(0, 0),
        _ => return Err(usage("give either --r or both --nu-lb and --nu-la")),
    };
    let dilation_flags = a.chunk.is_some() || a.mechanism.is_some() || a.heads.is_some() || a.d_in.is_some();
    let q = match attention {
        AttentionType::Full if a.window.is_some() || a.nu_lb.is_some() || a.nu_la.is_some() || dilation_flags => {
            return Err(usage("--type full takes no window or dilation flags"))
        }
        AttentionType::Full => CostQuery::full(n, d_model),
        AttentionType::Restricted if dilation_flags => {
            return Err(usage("--type restricted takes no --chunk/--mechanism/--heads/--d-in"))
        }
        AttentionType::Restricted => CostQuery::restricted(n, d_model, window),
        AttentionType::Dilated => {
            let dil = DilationConfig::new(
                a.mechanism.ok_or_else(|| missing("mechanism"))?,
                a.chunk.ok_or_else(|| missing("chunk"))?,
            )
            .with_pool_heads(a.heads.unwrap_or(1))
            .with_d_in(a.d_in.unwrap_or(complexity::PRESET_D_IN));
            dil.validate().map_err(usage)?;
            CostQuery::dilated(n, d_model, window, dil)
        }
    };
    Ok(q)
}

pub fn render_table(rows: &[TableRow], format: TableFormat) -> String {
    let records: Vec<_> = rows.iter().map(TableRow::record).collect();
    match format {
        TableFormat::Md => complexity::render_markdown(rows),
        TableFormat::Csv => complexity::render_csv(&records),
        TableFormat::Json => complexity::render_json(&records),
    }
}

pub fn cmd_complexity(a: &ComplexityArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let rows = match a.preset {
        Some(p) => table_generate(match p {
            PresetArg::Wsj => Preset::Wsj,
            PresetArg::Librispeech => Preset::Librispeech,
        })
        .map_err(usage)?,
        None => vec![table_custom(&custom_query(a)?, a.exact).map_err(usage)?],
    };
    emit(out, &render_table(&rows, a.format))?;
    if a.format != TableFormat::Md {
        for note in rows.iter().filter_map(TableRow::note) {
            emit(err, &format!("note: {note}\n"))?;
        }
    }
    Ok(())
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn cmd_init_weights(a: &InitWeightsArgs) -> Result<(), CliError> {
    let cfg = read_config(&a.config)?;
    let w = init_weights(&cfg).map_err(CliError::from_core)?;
    save_weights(&w, &cfg, &a.output).map_err(CliError::from_core)
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<(), CliError> {
    let cfg = read_config(&a.config)?;
    let weights = load_weights_for(&a.weights, &cfg).map_err(CliError::from_core)?;
    let x = read_features(&a.input)?;
    if x.cols() != cfg.input_dim {
        return Err(CliError::Mismatch(format!(
            "input has {} features per frame, config expects input_dim {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let y = encoder_forward(&x, &weights, &cfg, None).map_err(CliError::from_core)?;
    let format = match cfg.precision {
        Precision::F64 => FeatureFormat::F64,
        Precision::F32 => FeatureFormat::F32,
    };
    write_features(&a.output, &y, format)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let results = run_suite(a.suite.into(), a.seed);
    for r in &results {
        emit(out, &format!("{}\n", r.line()))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    emit(out, &format!("{} checks, {} failed\n", results.len(), failed))?;
    if failed > 0 {
        Err(CliError::VerificationFailed(failed))
    } else {
        Ok(())
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.n_list.is_empty() || a.n_list.contains(&0) {
        return Err(usage("--n-list needs positive lengths"));
    }
    if a.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--n-list must be strictly ascending"));
    }
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    if a.attn_heads == 0 || !a.d_model.is_multiple_of(a.attn_heads) {
        return Err(usage("--d-model must be divisible by --attn-heads"));
    }
    let dilation = DilationConfig::new(a.mechanism, a.chunk)
        .with_pool_heads(a.pool_heads)
        .with_d_in(a.d_in);
    dilation.validate().map_err(usage)?;
    let settings = BenchSettings {
        d_model: a.d_model,
        heads: a.attn_heads,
        window: RestrictionWindow::symmetric(a.window).map_err(usage)?,
        dilation,
        repeats: a.repeats,
        seed: a.seed,
    };
    let types: Vec<AttentionType> = a.types.iter().map(|&t| t.into()).collect();
    let (rows, slopes) = bench::run_bench(&types, &a.n_list, &settings)?;
    let text = match a.format {
        BenchFormat::Md => bench::render_markdown(&rows, &slopes),
        BenchFormat::Csv => bench::render_csv(&rows, &slopes),
    };
    emit(out, &text)
}

pub fn cmd_streaming_cost(a: &StreamingArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.past_seconds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(usage("--past-seconds must be non-negative"));
    }
    if !(a.frame_ms.is_finite() && a.frame_ms > 0.0) {
        return Err(usage("--frame-ms must be positive"));
    }
    if a.d_model == 0 || a.chunk == 0 || a.heads == 0 || a.d_in == 0 {
        return Err(usage("--d-model, --chunk, --heads and --d-in must be positive"));
    }
    let q = CostQuery::dilated(
        1,
        a.d_model,
        RestrictionWindow::new(a.nu_lb, a.nu_la),
        DilationConfig::new(a.mechanism, a.chunk)
            .with_pool_heads(a.heads)
            .with_d_in(a.d_in),
    );
    let is_preset = q == streaming_preset();
    let mut text = String::from(
        "| past (s) | past frames | baseline | dilated | ratio | dilated + new chunk | ratio with new chunk |",
    );
    if is_preset {
        text.push_str(" published ratio | published with new chunk |");
    }
    text.push('\n');
    text.push_str("|---:|---:|---:|---:|---:|---:|---:|");
    if is_preset {
        text.push_str("---:|---:|");
    }
    text.push('\n');
    for &s in &a.past_seconds {
        let plain = streaming_report(s, a.frame_ms, &q, false).map_err(usage)?;
        let event = streaming_report(s, a.frame_ms, &q, true).map_err(usage)?;
        text.push_str(&format!(
            "| {s} | {} | {} | {} | {:.2} | {} | {:.2} |",
            plain.past_frames, plain.baseline, plain.dilated, plain.ratio, event.dilated, event.ratio
        ));
        if is_preset {
            match PUBLISHED_STREAMING_FACTORS.iter().find(|p| p.0 == s) {
                Some(&(_, no_event, with_event)) => text.push_str(&format!(" {no_event} | {with_event} |")),
                None => text.push_str(" - | - |"),
            }
        }
        text.push('\n');
    }
    emit(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (Result<(), CliError>, String, String) {
        let cli = Cli::try_parse_from(std::iter::once("dsa").chain(args.iter().copied())).expect("parses");
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let res = run(cli, &mut out, &mut err);
        (res, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn preset_conflicts_are_usage_errors() {
        let e = Cli::try_parse_from(["dsa", "complexity", "--preset", "wsj", "--n", "5"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("--n"));
    }

    #[test]
    fn custom_full_row() {
        let (res, out, _) = run_args(&[
            "complexity",
            "--n",
            "1",
            "--d-model",
            "1",
            "--type",
            "full",
            "--format",
            "csv",
        ]);
        res.unwrap();
        assert_eq!(
            out,
            "label,R,M,total,attention_term,xi_ap,xi_pp,display\nfull-sequence,,,1,1,0,0,0.0M\n"
        );
    }

    #[test]
    fn custom_rows_validate_flags() {
        let (res, _, _) = run_args(&[
            "complexity",
            "--n",
            "10",
            "--d-model",
            "4",
            "--type",
            "dilated",
            "--r",
            "3",
        ]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
        let (res, _, _) = run_args(&["complexity", "--n", "10", "--d-model", "4", "--type", "restricted"]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
        let (res, _, _) = run_args(&[
            "complexity",
            "--n",
            "10",
            "--d-model",
            "4",
            "--type",
            "restricted",
            "--r",
            "4",
        ]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
        let (res, out, _) = run_args(&[
            "complexity",
            "--n",
            "310",
            "--d-model",
            "512",
            "--type",
            "dilated",
            "--r",
            "25",
            "--chunk",
            "20",
            "--mechanism",
            "ap+pp",
            "--heads",
            "2",
            "--format",
            "csv",
        ]);
        res.unwrap();
        assert!(out.contains("dilated AP-2+PP,25,20,7611392,"));
    }

    #[test]
    fn csv_preset_notes_go_to_stderr() {
        let (res, out, err) = run_args(&["complexity", "--preset", "librispeech", "--format", "csv"]);
        res.unwrap();
        assert!(!out.contains("note"));
        assert!(err.contains("52.0M"));
    }

    #[test]
    fn streaming_rejects_bad_inputs() {
        let (res, _, _) = run_args(&["streaming-cost", "--past-seconds", "-1"]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
        let (res, _, _) = run_args(&["streaming-cost", "--frame-ms", "0"]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
        let (res, out, _) = run_args(&["streaming-cost"]);
        res.unwrap();
        assert!(out.contains("| 4 | 100 | 52224 | 8704 | 6.00 |"));
        assert!(out.contains("7.2 | 1.25 |"));
    }

    #[test]
    fn bench_rejects_unordered_lengths() {
        let (res, _, _) = run_args(&["bench", "--n-list", "64,32"]);
        assert_eq!(res.unwrap_err().exit_code(), 2);
    }
}
