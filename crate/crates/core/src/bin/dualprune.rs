use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dualprune::duplication::{DuplicationConfig, HeadReduction, SimilaritySpace};
use dualprune::eval::{evaluate, run_method, Candidate, EvalConfig, Method, SelectionFile, SELECTION_SCHEMA};
use dualprune::magnitude::{MagnitudeConfig, QueryMode, ScorerKind};
use dualprune::report::{render, to_canonical_json, ReportFormat};
use dualprune::verify::{run_all, Fault, VerifyOptions};
use dualprune::{load_batch, save_batch, generate_synthetic_batch, Error, PenaltyForm, PruneConfig, RopeParams, SynthSpec};

#[derive(Parser)]
#[command(name = "dualprune", version, about = "Dual-form token pruning for softmax attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-redundancy batch and write it as NPY + manifest.
    Synth(SynthArgs),
    /// Select image tokens to keep.
    Prune(PruneArgs),
    /// Measure how well one or more selections preserve the batch.
    Evaluate(EvaluateArgs),
    /// Run the identity and invariant suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn rope(self) -> RopeParams {
        match self {
            Toggle::On => RopeParams::on(),
            Toggle::Off => RopeParams::off(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    n_img: usize,
    #[arg(long, default_value_t = 8)]
    n_text: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Defaults to --dim.
    #[arg(long)]
    value_dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    amplitude_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    text_focus: f64,
    #[arg(long)]
    key_norm_cap: Option<f64>,
    #[arg(long, default_value_t = 4)]
    layer: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneFlags {
    #[arg(long)]
    manifest: PathBuf,
    /// Pruning ratio ρ: the fraction of image tokens removed.
    #[arg(long, conflicts_with = "keep_ratio")]
    budget: Option<f64>,
    /// Fraction of image tokens kept (1 − ρ).
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Redundancy strength. Defaults to 5, or 0.5 for mmr-additive. When
    /// mmr-additive is requested it applies to that method alone.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 2)]
    b0: usize,
    #[arg(long, default_value_t = 2.0)]
    growth: f64,
    #[arg(long, value_enum, default_value_t = PenaltyForm::Power)]
    penalty: PenaltyForm,
    #[arg(long, value_enum, default_value_t = ScorerKind::Iwp)]
    scorer: ScorerKind,
    #[arg(long, value_enum, default_value_t = SimilaritySpace::DualWeight)]
    space: SimilaritySpace,
    #[arg(long, value_enum, default_value_t = HeadReduction::MeanOfSquares)]
    head_reduction: HeadReduction,
    #[arg(long, value_enum, default_value_t = QueryMode::MeanText)]
    query_mode: QueryMode,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    rope_magnitude: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    rope_duplication: Toggle,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PruneFlags {
    fn eval_config(&self, layer: usize, additive: bool) -> dualprune::Result<EvalConfig> {
        let rho = match (self.budget, self.keep_ratio) {
            (Some(b), _) => b,
            (None, Some(k)) => 1.0 - k,
            (None, None) => PruneConfig::default().rho,
        };
        let prune = PruneConfig {
            rho,
            lambda: if additive { PruneConfig::default().lambda } else { self.lambda.unwrap_or(5.0) },
            b0: self.b0,
            growth: self.growth,
            penalty: self.penalty,
            magnitude: MagnitudeConfig {
                scorer: self.scorer,
                query_mode: self.query_mode,
                rope: self.rope_magnitude.rope(),
                seed: self.seed,
            },
            duplication: DuplicationConfig {
                space: self.space,
                rope: self.rope_duplication.rope(),
                reduction: self.head_reduction,
            },
            layer,
            seed: self.seed,
        };
        prune.validate()?;
        let additive_lambda = if additive { self.lambda.unwrap_or(0.5) } else { 0.5 };
        if !(0.0..=1.0).contains(&additive_lambda) {
            return Err(Error::Config(format!("additive lambda {additive_lambda} outside [0, 1]")));
        }
        Ok(EvalConfig { prune, additive_lambda, ..EvalConfig::default() })
    }
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long, value_enum, default_value_t = Method::Iwp)]
    method: Method,
    #[command(flatten)]
    flags: PruneFlags,
    /// Write the selection here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Built-in methods, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Vec<Method>,
    /// Selection JSON files produced by `prune` or by external tools.
    #[arg(long)]
    selection: Vec<PathBuf>,
    #[command(flatten)]
    flags: PruneFlags,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    rope_eval: Toggle,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Record wall-clock time per method.
    #[arg(long)]
    timing: bool,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trials per check (each check has its own default).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately break one computation path.
    #[arg(long = "break", value_enum)]
    fault: Option<Fault>,
}

fn write_or_print(out: Option<&Path>, text: &str) -> dualprune::Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
            }
            fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> dualprune::Result<ExitCode> {
    let spec = SynthSpec {
        heads: a.heads,
        n_img: a.n_img,
        n_text: a.n_text,
        dim: a.dim,
        value_dim: a.value_dim.unwrap_or(a.dim),
        clusters: a.clusters,
        noise: a.noise,
        amplitude_spread: a.amplitude_spread,
        text_focus: a.text_focus,
        key_norm_cap: a.key_norm_cap,
        layer: a.layer,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let generated = generate_synthetic_batch(&spec)?;
    let path = save_batch(&a.out, &generated.batch, Some(&generated.clusters))?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn prune(a: PruneArgs) -> dualprune::Result<ExitCode> {
    let batch = load_batch(&a.flags.manifest)?;
    let cfg = a.flags.eval_config(batch.layer(), a.method == Method::MmrAdditive)?;
    let result = run_method(&batch, a.method, &cfg)?;
    let file = SelectionFile {
        schema: SELECTION_SCHEMA.to_string(),
        method: a.method.name().to_string(),
        kept: result.kept.clone(),
        n_img: Some(batch.n_img()),
        config: Some(cfg.prune),
        result: Some(result),
    };
    write_or_print(a.out.as_deref(), &to_canonical_json(&file)?)?;
    Ok(ExitCode::SUCCESS)
}

fn read_selection(path: &Path, n_img: usize) -> dualprune::Result<Candidate> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let file: SelectionFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if file.schema != SELECTION_SCHEMA {
        return Err(Error::Data(format!("{}: unknown schema {:?}", path.display(), file.schema)));
    }
    if let Some(n) = file.n_img.filter(|&n| n != n_img) {
        return Err(Error::Consistency(format!(
            "{}: selection made for {n} image tokens, batch has {n_img}",
            path.display()
        )));
    }
    Ok(Candidate::External { name: file.method, kept: file.kept })
}

fn evaluate_cmd(a: EvaluateArgs) -> dualprune::Result<ExitCode> {
    let batch = load_batch(&a.flags.manifest)?;
    let mut cfg = a.flags.eval_config(batch.layer(), a.method.contains(&Method::MmrAdditive))?;
    cfg.rope = a.rope_eval.rope();
    cfg.timing = a.timing;
    let mut candidates: Vec<Candidate> = a.method.iter().copied().map(Candidate::Builtin).collect();
    for p in &a.selection {
        candidates.push(read_selection(p, batch.n_img())?);
    }
    if candidates.is_empty() {
        return Err(Error::Config("give at least one --method or --selection".into()));
    }
    let report = evaluate(&batch, &candidates, &cfg, a.threads)?;
    write_or_print(a.out.as_deref(), &render(&report, a.format)?)?;
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> dualprune::Result<ExitCode> {
    let outcomes = run_all(&VerifyOptions { trials: a.trials, seed: a.seed, fault: a.fault })?;
    let mut failed = Vec::new();
    for c in &outcomes {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<26} trials={:<5} max_error={:.6e} tolerance={:.1e}",
            c.name, c.trials, c.max_error, c.tolerance
        );
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prune(a) => prune(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Verify(a) => verify(a),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code())
    })
}
