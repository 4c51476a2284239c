use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htsr_core::allocation::{
    allocate_bits, allocate_nm, allocate_ranks, plan_sparsity, AllocationError, EndpointSpec, Granularity,
    QualityTable, RankStrategy, DEFAULT_TAU, DEFAULT_TAU_SWEEP,
};
use htsr_core::compression::{apply_plan, CompressionPlan};
use htsr_core::metrics::{analyze_model, Metric, ModelAnalysis};
use htsr_core::synthlab::{correlation_experiment, lra_strategy_experiment, DEFAULT_ALPHA_GRID, DEFAULT_SAMPLES};
use htsr_core::tensorio::{
    group_blocks, load_checkpoint, save_checkpoint, write_atomic, CheckpointFormat, GroupingRules,
    WeightStore,
};
use htsr_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "htsr", version, about = "Spectral analysis and layer-wise compression budgets for checkpoints")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-matrix work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit spectra and write metrics.json / metrics.csv.
    Analyze(AnalyzeArgs),
    /// Turn a metrics report into a sparsity plan.
    Allocate(AllocateArgs),
    /// Integer budgets: N:M, bit-widths or kept ranks.
    #[command(subcommand)]
    Budget(BudgetCmd),
    /// Apply a sparsity or budget plan to a checkpoint.
    Prune(PruneArgs),
    /// Synthetic experiments.
    #[command(subcommand)]
    Synth(SynthCmd),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// safetensors or rawbin; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<CheckpointFormat>,
}

impl ModelArgs {
    fn format(&self) -> CheckpointFormat {
        self.format.unwrap_or_else(|| CheckpointFormat::from_path(&self.model))
    }

    fn load(&self) -> Result<WeightStore, Failure> {
        Ok(load_checkpoint(&self.model, self.format())?)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Preset (llama, gpt2) or rules file.
    #[arg(long, default_value = "llama")]
    grouping: String,
    #[arg(long, default_value = "alpha_hill")]
    metric: Metric,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Global sparsity S in (0, 1).
    #[arg(long)]
    sparsity: f64,
    /// Endpoints 1 - tau and 1 + tau (default 0.2).
    #[arg(long, conflicts_with_all = ["s1", "s2", "min_sparsity", "tau_sweep"])]
    tau: Option<f64>,
    #[arg(long, requires = "s2", conflicts_with_all = ["min_sparsity", "tau_sweep"])]
    s1: Option<f64>,
    #[arg(long, requires = "s1")]
    s2: Option<f64>,
    /// Solve for symmetric endpoints giving this minimum layer sparsity.
    #[arg(long, conflicts_with = "tau_sweep")]
    min_sparsity: Option<f64>,
    /// Write one plan per tau in 0.1..0.5, named <out stem>.tau<t>.json.
    #[arg(long)]
    tau_sweep: bool,
    #[arg(long, default_value = "per_block")]
    granularity: Granularity,
    /// Within-block tau for the mixed granularity.
    #[arg(long)]
    tau_matrix: Option<f64>,
    /// Recompute block qualities with another metric from the report.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BudgetCmd {
    /// N per group of M, per block.
    Nm {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 8)]
        m: u32,
        /// Average kept fraction.
        #[arg(long)]
        density: f64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bit-width per block.
    Bits {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2u32, 3, 4, 8])]
        options: Vec<u32>,
        /// Parameter-weighted average bit-width.
        #[arg(long)]
        target: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kept rank per matrix.
    Ranks {
        #[arg(long)]
        metrics: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Total kept rank over all matrices.
        #[arg(long)]
        keep: u32,
        #[arg(long, default_value = "more_on_ht")]
        strategy: RankStrategy,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    plan: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Output format; defaults to the input format.
    #[arg(long)]
    out_format: Option<CheckpointFormat>,
    /// Report path; defaults to <out>.report.json, with a .csv alongside.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// alpha_hill against stable rank over Pareto spectra.
    Correlation {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHA_GRID)]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction error of the two rank strategies.
    Lra {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "llama")]
        grouping: String,
        #[arg(long)]
        keep: u32,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Io(PathBuf, std::io::Error),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Core(e.into())
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    Ok(write_atomic(path, text.as_bytes()).map_err(Error::from)?)
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_report(path: &Path) -> Result<ModelAnalysis, Failure> {
    Ok(ModelAnalysis::from_json(&read(path)?)?)
}

fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let store = a.model.load()?;
    let rules = GroupingRules::resolve(&a.grouping)?;
    let grouping = group_blocks(&store, &rules)?;
    if grouping.blocks.is_empty() {
        return Err(Failure::Core(Error::Metrics(htsr_core::metrics::MetricsError::Report(format!(
            "no tensor matches the block pattern `{}`",
            rules.block_pattern
        )))));
    }
    for name in &grouping.unmatched {
        eprintln!("warning: 2-D tensor `{name}` matches no block and is left out");
    }
    let report = analyze_model(&store, &grouping, a.metric)?;
    for f in &report.failures {
        eprintln!("warning: `{}` skipped: {}", f.name, f.error);
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::Io(a.out.clone(), e))?;
    write(&a.out.join("metrics.json"), &report.to_json())?;
    write(&a.out.join("metrics.csv"), &report.to_csv())?;
    let mean = report.mean(a.metric).unwrap_or(f64::NAN);
    println!(
        "analyzed {} matrices in {} blocks, mean {} = {mean:.4}",
        report.matrices.len(),
        report.blocks.len(),
        a.metric
    );
    Ok(())
}

fn allocate(a: AllocateArgs) -> Result<(), Failure> {
    if !(a.sparsity > 0.0 && a.sparsity < 1.0) {
        return Err(Failure::Usage(format!("--sparsity {} must lie in (0, 1)", a.sparsity)));
    }
    let mut report = load_report(&a.metrics)?;
    if let Some(m) = a.metric {
        report = report.with_metric(m)?;
    }
    let table = QualityTable::from_analysis(&report)?;
    let specs: Vec<(EndpointSpec, PathBuf)> = if a.tau_sweep {
        let stem = a.out.with_extension("");
        DEFAULT_TAU_SWEEP
            .iter()
            .map(|&t| (EndpointSpec::Tau(t), with_suffix(&stem, &format!(".tau{t}.json"))))
            .collect()
    } else {
        let spec = match (a.tau, a.s1.zip(a.s2), a.min_sparsity) {
            (Some(t), _, _) => EndpointSpec::Tau(t),
            (_, Some((s1, s2)), _) => EndpointSpec::Range { s1, s2 },
            (_, _, Some(m)) => EndpointSpec::MinSparsity(m),
            _ => EndpointSpec::Tau(DEFAULT_TAU),
        };
        vec![(spec, a.out.clone())]
    };
    for (spec, out) in specs {
        let plan = plan_sparsity(&table, a.sparsity, spec, a.granularity, a.tau_matrix)?;
        write(&out, &plan.to_json())?;
        let (lo, hi) = plan
            .per_matrix
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        println!(
            "{}: S = {}, s1 = {:.6}, s2 = {:.6}, layer sparsity in [{lo:.6}, {hi:.6}], {} clamped",
            out.display(),
            plan.target,
            plan.s1,
            plan.s2,
            plan.clamped.len()
        );
    }
    Ok(())
}

fn budget(cmd: BudgetCmd) -> Result<(), Failure> {
    let (plan, out) = match cmd {
        BudgetCmd::Nm {
            metrics,
            m,
            density,
            tau,
            out,
        } => {
            let table = QualityTable::from_analysis(&load_report(&metrics)?)?;
            let members = block_members(&table);
            let plan = allocate_nm(&table.block_q(), &table.block_d(), m, density, tau)?.into_plan(&members)?;
            (plan, out)
        }
        BudgetCmd::Bits {
            metrics,
            options,
            target,
            out,
        } => {
            let table = QualityTable::from_analysis(&load_report(&metrics)?)?;
            let members = block_members(&table);
            let plan = allocate_bits(&table.block_q(), &table.block_d(), &options, target)?.into_plan(&members)?;
            (plan, out)
        }
        BudgetCmd::Ranks {
            metrics,
            model,
            keep,
            strategy,
            tau,
            out,
        } => {
            let table = QualityTable::from_analysis(&load_report(&metrics)?)?;
            let store = model.load()?;
            let entries: Vec<_> = table.blocks.iter().flat_map(|b| &b.matrices).collect();
            let mut full = Vec::with_capacity(entries.len());
            for e in &entries {
                let m = store
                    .get(&e.name)
                    .and_then(|t| t.as_matrix())
                    .ok_or_else(|| Error::from(AllocationError::MissingTensor(e.name.clone())))?;
                full.push(m.rows.min(m.cols) as u32);
            }
            let q: Vec<f64> = entries.iter().map(|e| e.q).collect();
            let names: Vec<Vec<String>> = entries.iter().map(|e| vec![e.name.clone()]).collect();
            let plan = allocate_ranks(&q, &full, keep, strategy, tau)?.into_plan(&names)?;
            (plan, out)
        }
    };
    write(&out, &plan.to_json())?;
    println!("{}: {} layers, budget {}", out.display(), plan.per_layer.len(), plan.budget);
    Ok(())
}

fn block_members(table: &QualityTable) -> Vec<Vec<String>> {
    table
        .blocks
        .iter()
        .map(|b| b.matrices.iter().map(|m| m.name.clone()).collect())
        .collect()
}

fn prune(a: PruneArgs) -> Result<(), Failure> {
    let store = a.model.load()?;
    let plan = CompressionPlan::from_json(&read(&a.plan)?)?;
    let (out, report) = apply_plan(&store, &plan)?;
    let format = a.out_format.unwrap_or_else(|| a.model.format());
    save_checkpoint(&out, &a.out, format)?;
    let json = a.report.unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    write(&json, &report.to_json())?;
    write(&json.with_extension("csv"), &report.to_csv())?;
    match report.target {
        Some(t) => println!(
            "{}: {} matrices, achieved global sparsity {:.6} (plan {t})",
            report.operation,
            report.matrices.len(),
            report.global_sparsity
        ),
        None => println!(
            "{}: {} matrices, achieved global sparsity {:.6}",
            report.operation,
            report.matrices.len(),
            report.global_sparsity
        ),
    }
    Ok(())
}

fn synth(cmd: SynthCmd, seed: u64) -> Result<(), Failure> {
    match cmd {
        SynthCmd::Correlation { alphas, n, seeds, out } => {
            let seeds: Vec<u64> = (0..seeds).map(|i| seed.wrapping_add(i)).collect();
            let table = correlation_experiment(&alphas, n, &seeds)?;
            write(&out, &table.to_csv())?;
            for (a, sr) in table.mean_stable_rank() {
                println!("alpha_true = {a}: mean stable_rank = {sr:.4}");
            }
            match table.pearson_r {
                Some(r) => println!("pearson r(alpha_hill, stable_rank) = {r:.4}"),
                None => println!("pearson r(alpha_hill, stable_rank) = undefined"),
            }
        }
        SynthCmd::Lra {
            model,
            grouping,
            keep,
            tau,
            out,
        } => {
            let store = model.load()?;
            let grouping = group_blocks(&store, &GroupingRules::resolve(&grouping)?)?;
            let cmp = lra_strategy_experiment(&store, &grouping, keep, tau)?;
            write(&out, &cmp.to_csv())?;
            for o in &cmp.outcomes {
                let name = serde_json::to_value(o.strategy).ok();
                println!(
                    "{}: total reconstruction error {:.6}",
                    name.as_ref().and_then(|v| v.as_str()).unwrap_or("?"),
                    o.total_error
                );
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Analyze(a) => analyze(a),
        Cmd::Allocate(a) => allocate(a),
        Cmd::Budget(b) => budget(b),
        Cmd::Prune(p) => prune(p),
        Cmd::Synth(s) => synth(s, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_infeasible() { EXIT_INFEASIBLE } else { EXIT_DATA })
        }
    }
}
