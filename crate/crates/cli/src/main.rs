use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colt::datasets::DataError;
use colt::harness::trace_csv::{CsvError, TraceRow};
use colt::harness::{
    read_rows, render_svg, trace_rows, write_rows, Chart, Checkpoint, CheckpointError, ConfigError, ExperimentConfig,
    DEMO_TRACE,
};
use colt::metrics::{layer_collapse_report, mask_similarity};
use colt::pruning::{prune_rate, Denominator};
use colt::tickets::{
    evaluate_ticket, run_colt, run_lth, train_dense, transfer_ticket, Method, RunOutput, Ticket, TicketError,
};

#[derive(Parser)]
#[command(name = "colt", version, about = "Dense, LTH and COLT pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unpruned baseline.
    Dense(RunArgs),
    /// Iterative magnitude pruning on the full dataset.
    Lth(RunArgs),
    /// Cyclic overlapping pruning on two class partitions.
    Colt(RunArgs),
    /// Retrain a ticket on the configured dataset with a fresh output layer.
    Eval(TicketArgs),
    /// Retrain a ticket on another dataset (the one in --config).
    Transfer(TicketArgs),
    /// Percentage of parameters pruned in both tickets.
    Similarity {
        a: PathBuf,
        b: PathBuf,
    },
    /// Render trace CSV files as SVG line charts.
    Report {
        /// Trace CSV files; all rows are plotted together.
        traces: Vec<PathBuf>,
        /// Plot the bundled demo trace instead.
        #[arg(long, conflicts_with = "traces")]
        demo: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Sets the init, data and head seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    target_sparsity: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct TicketArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ticket: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Data(DataError),
    Exists(PathBuf),
    Io(PathBuf, std::io::Error),
    Checkpoint(PathBuf, CheckpointError),
    Csv(PathBuf, CsvError),
    Incompatible(TicketError),
    Run(TicketError),
    Invalid(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Exists(_) => 5,
            CliError::Io(..) => 6,
            CliError::Checkpoint(..) | CliError::Csv(..) => 7,
            CliError::Incompatible(_) => 8,
            CliError::Run(_) => 9,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config: {e}"),
            CliError::Data(e) => write!(f, "dataset: {e}"),
            CliError::Exists(p) => write!(f, "{} already exists; pass --force to overwrite", p.display()),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Checkpoint(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Csv(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Incompatible(e) => write!(f, "ticket does not fit the model: {e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Invalid(m) => f.write_str(m),
        }
    }
}

fn ticket_error(e: TicketError) -> CliError {
    match e {
        TicketError::Transfer { .. } => CliError::Incompatible(e),
        TicketError::Data(d) => CliError::Data(d),
        other => CliError::Run(other),
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

fn setup(c: &Common) -> Result<Setup> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(CliError::Config)?;
    if let Some(s) = c.seed {
        cfg.seeds = colt::tickets::Seeds::all(s);
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output.clone());
    Ok(Setup {
        cfg,
        out,
        force: c.force,
    })
}

impl Setup {
    /// Output paths, checked up front so nothing runs when any would be clobbered.
    fn claim(&self, names: &[&str]) -> Result<Vec<PathBuf>> {
        let paths: Vec<PathBuf> = names.iter().map(|n| self.out.join(n)).collect();
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::Exists(p.clone()));
            }
        }
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Io(self.out.clone(), e))?;
        Ok(paths)
    }
}

fn write_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    write_rows(file, rows).map_err(|e| CliError::Csv(path.to_path_buf(), e.into()))
}

fn load_ticket(path: &Path) -> Result<Ticket> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_ticket)
        .map_err(|e| CliError::Checkpoint(path.to_path_buf(), e))
}

fn eval_row(method: &str, ticket: &Ticket, accuracy: f64, seed: u64) -> TraceRow {
    TraceRow {
        method: method.to_string(),
        round: ticket.provenance.rounds,
        sparsity_all_pct: ticket.sparsity(Denominator::AllParams).percent(),
        sparsity_eligible_pct: ticket.sparsity(Denominator::Eligible).percent(),
        partition1_acc_pct: None,
        partition2_acc_pct: None,
        full_acc_pct: Some(accuracy),
        similarity_pct: None,
        wall_s: 0.0,
        seed,
    }
}

fn dense(args: &RunArgs) -> Result<()> {
    let s = setup(&args.common)?;
    let paths = s.claim(&["dense.csv"])?;
    let data = s.cfg.dataset.load().map_err(CliError::Data)?;
    let spec = s.cfg.model_for(&data);
    let start = std::time::Instant::now();
    let eval = train_dense(&data, &spec, &s.cfg.training, s.cfg.seeds).map_err(ticket_error)?;
    let ticket = Ticket::dense(&spec, s.cfg.schedule.eligibility, s.cfg.seeds, &s.cfg.dataset.id())
        .map_err(ticket_error)?;
    let mut row = eval_row("dense", &ticket, eval.accuracy, s.cfg.seeds.init);
    row.wall_s = start.elapsed().as_secs_f64();
    write_csv(&paths[0], &[row])?;
    println!("dense: test accuracy {:.2}% ({} parameters)", eval.accuracy, ticket.mask.total());
    Ok(())
}

fn prune(args: &RunArgs, method: Method) -> Result<()> {
    let s = setup(&args.common)?;
    let name = method.as_str();
    let paths = s.claim(&[&format!("{name}.csv"), &format!("{name}.ticket")])?;
    let mut cfg = s.cfg.clone();
    if let Some(t) = args.target_sparsity {
        cfg.schedule.target_sparsity = t;
    }
    if let Some(r) = args.rounds {
        cfg.schedule.max_rounds = r;
    }
    let data = cfg.dataset.load().map_err(CliError::Data)?;
    let spec = cfg.model_for(&data);
    let fraction = match method {
        Method::Lth => cfg.schedule.p_lth,
        _ => cfg.schedule.p_colt,
    };
    let rc = cfg.run_config(fraction).threads_from_env();
    rc.schedule.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    let out: RunOutput = match method {
        Method::Lth => run_lth(&data, &spec, &rc),
        _ => run_colt(&data, &spec, &rc),
    }
    .map_err(ticket_error)?;
    for r in &out.trace.records {
        let acc: Vec<String> = r.val_acc.iter().map(|a| format!("{a:.1}%")).collect();
        eprintln!(
            "{name} round {:>2}: sparsity {} of eligible, {} of all, validation {}",
            r.round,
            r.sparsity_eligible,
            r.sparsity_all,
            acc.join(" / ")
        );
    }
    write_csv(&paths[0], &trace_rows(&out.trace))?;
    Checkpoint::Ticket(out.ticket.clone())
        .save(&paths[1])
        .map_err(|e| CliError::Checkpoint(paths[1].clone(), e))?;
    println!(
        "{name}: {} rounds, final sparsity {} (eligible), ticket written to {}",
        out.trace.rounds(),
        out.ticket.sparsity(Denominator::Eligible),
        paths[1].display()
    );
    Ok(())
}

fn eval(args: &TicketArgs, transfer: bool) -> Result<()> {
    let s = setup(&args.common)?;
    let file = if transfer { "transfer.csv" } else { "eval.csv" };
    let paths = s.claim(&[file])?;
    let ticket = load_ticket(&args.ticket)?;
    let data = s.cfg.dataset.load().map_err(CliError::Data)?;
    let (acc, label) = if transfer {
        let (e, prov) = transfer_ticket(&ticket, &data, &s.cfg.dataset.id(), &s.cfg.training, s.cfg.seeds)
            .map_err(ticket_error)?;
        (e.accuracy, prov.target.unwrap_or_default())
    } else {
        let e = evaluate_ticket(&ticket, &data, &s.cfg.training, s.cfg.seeds).map_err(ticket_error)?;
        (e.accuracy, s.cfg.dataset.id())
    };
    let report = layer_collapse_report(&ticket.mask);
    if report.any_collapsed() {
        eprintln!("warning: collapsed layers {:?}", report.collapsed());
    }
    write_csv(
        &paths[0],
        &[eval_row(ticket.provenance.method.as_str(), &ticket, acc, s.cfg.seeds.init)],
    )?;
    println!(
        "{} ticket at {} sparsity on {label}: test accuracy {acc:.2}%",
        ticket.provenance.method,
        ticket.sparsity(Denominator::Eligible),
    );
    Ok(())
}

fn similarity(a: &Path, b: &Path) -> Result<()> {
    let (ta, tb) = (load_ticket(a)?, load_ticket(b)?);
    let sim = mask_similarity(&ta.mask, &tb.mask)
        .map_err(|e| CliError::Invalid(format!("tickets are not comparable: {e}")))?;
    let sa = prune_rate(&ta.mask, Denominator::AllParams);
    let sb = prune_rate(&tb.mask, Denominator::AllParams);
    println!("sparsity {} / {}, common pruned {sim:.2}% of all parameters", sa, sb);
    Ok(())
}

fn report(traces: &[PathBuf], demo: bool, out: &Path, force: bool) -> Result<()> {
    let rows = if demo {
        read_rows(DEMO_TRACE.as_bytes()).map_err(|e| CliError::Csv("demo".into(), e))?
    } else {
        if traces.is_empty() {
            return Err(CliError::Invalid("give at least one trace CSV or --demo".into()));
        }
        let mut rows = Vec::new();
        for t in traces {
            let f = std::fs::File::open(t).map_err(|e| CliError::Io(t.clone(), e))?;
            rows.extend(read_rows(f).map_err(|e| CliError::Csv(t.clone(), e))?);
        }
        rows
    };
    let charts = [Chart::AccuracyVsSparsity, Chart::SparsityVsRound];
    let paths: Vec<PathBuf> = charts.iter().map(|c| out.join(c.file_name())).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Exists(p.clone()));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    for (chart, path) in charts.iter().zip(&paths) {
        std::fs::write(path, render_svg(&rows, *chart)).map_err(|e| CliError::Io(path.clone(), e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dense(a) => dense(a),
        Command::Lth(a) => prune(a, Method::Lth),
        Command::Colt(a) => prune(a, Method::Colt),
        Command::Eval(a) => eval(a, false),
        Command::Transfer(a) => eval(a, true),
        Command::Similarity { a, b } => similarity(a, b),
        Command::Report {
            traces,
            demo,
            out,
            force,
        } => report(traces, *demo, out, *force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
