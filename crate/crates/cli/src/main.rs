//! `opo`: generate synthetic preference lists, train scorers with any of the
//! eight listwise and pairwise losses, and report held-out metrics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod report;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use opo_core::data::{generate_synthetic, load_jsonl, write_jsonl, Dataset, Mode};
use opo_core::harness::{
    approximation_curve, compare, curve_grid, evaluate_ndcg, linspace, win_rate, CurveKind, CURVE_LABELS,
    CURVE_SCORES,
};
use opo_core::losses::LossKind;
use opo_core::metrics::LabelVector;
use opo_core::scorer::Scorer;
use opo_core::trainer::{sweep, train};
use opo_core::Error;

use report::{emit, render, CurveReport, EvalReport, Format, SweepReport, TrainReport};
use settings::{parse_axis, Settings};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: 1, message }
    }

    pub fn data(message: String) -> Self {
        Self { code: 2, message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidParameter { .. } => 1,
            e if e.is_numerical() => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "opo", version, about = "Listwise preference optimization on synthetic ranking data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML (or .json) file whose keys mirror the training and loss settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL dataset; a synthetic one is generated when absent
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Truncation for the loss and for NDCG
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Responses per list (generated, or subsampled from --data)
    #[arg(long)]
    list_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden width of the feature scorer (0 for linear)
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSONL
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        num_lists: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Train one scorer and report held-out metrics
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Save the trained scorer here
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a saved scorer on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scorer: PathBuf,
        /// Saved scorer to compute the win rate against
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train and evaluate over a hyperparameter grid
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Axis and values, e.g. --grid tau=0.1,1,10 (repeatable)
        #[arg(long)]
        grid: Vec<String>,
    },
    /// Surrogate-versus-exact NDCG curves on the five-item reference list
    Curve {
        #[command(flatten)]
        common: Common,
        /// neural or approx; both when absent
        #[arg(long, value_parser = parse_curve_kind)]
        kind: Option<CurveKind>,
        /// Temperatures or steepnesses, comma separated
        #[arg(long, value_delimiter = ',')]
        params: Vec<f64>,
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
    /// Train every loss from the same initial scorer and compare
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_curve_kind(s: &str) -> Result<CurveKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn settings(common: &Common) -> Result<Settings, CliError> {
    let mut s = Settings::load(common.config.as_deref())?;
    if let Some(kind) = common.loss {
        s.train.loss.kind = kind;
    }
    if let Some(k) = common.k {
        s.train.loss.k = Some(k);
        s.train.eval_k = Some(k);
    }
    if let Some(tau) = common.tau {
        s.train.loss.tau = tau;
    }
    if let Some(alpha) = common.alpha {
        s.train.loss.alpha = alpha;
    }
    if let Some(beta) = common.beta {
        s.train.beta = beta;
    }
    if let Some(size) = common.list_size {
        s.synthetic.list_size = size;
    }
    if let Some(seed) = common.seed {
        s.train.seed = seed;
        s.synthetic.seed = seed;
    }
    Ok(s)
}

fn apply_train_args(s: &mut Settings, args: &TrainArgs) {
    if let Some(e) = args.epochs {
        s.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        s.train.learning_rate = Some(lr);
    }
    if let Some(b) = args.batch_size {
        s.train.batch_size = b;
    }
    if let Some(h) = args.hidden {
        s.hidden = h;
    }
}

fn dataset(common: &Common, s: &Settings) -> Result<Dataset, CliError> {
    match &common.data {
        Some(path) => {
            let d = load_jsonl(path).map_err(|e| match e {
                Error::Io(io) => CliError::data(format!("cannot read {}: {io}", path.display())),
                other => CliError::data(format!("{}: {other}", path.display())),
            })?;
            if d.is_empty() {
                return Err(CliError::data(format!("{} contains no lists", path.display())));
            }
            match common.list_size {
                Some(size) => Ok(d.subsample(size, s.train.seed)?),
                None => Ok(d),
            }
        }
        None => Ok(generate_synthetic(&s.synthetic)?),
    }
}

fn split(d: &Dataset, fraction: f64) -> Result<(Dataset, Dataset), CliError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::usage(format!("holdout_fraction {fraction} must lie in [0, 1)")));
    }
    let held = (d.len() as f64 * fraction).round() as usize;
    Ok(d.split_at(d.len() - held))
}

fn initial_scorer(train_set: &Dataset, s: &Settings) -> Result<Scorer, CliError> {
    Ok(Scorer::for_dataset(train_set, s.hidden, s.train.seed)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            common,
            mode,
            num_lists,
            feature_dim,
            noise_sd,
        } => {
            let mut s = settings(&common)?;
            if let Some(m) = mode {
                s.synthetic.mode = m;
            }
            if let Some(n) = num_lists {
                s.synthetic.num_lists = n;
            }
            if let Some(d) = feature_dim {
                s.synthetic.feature_dim = d;
            }
            if let Some(sd) = noise_sd {
                s.synthetic.label_noise_sd = sd;
            }
            let d = generate_synthetic(&s.synthetic)?;
            let mut buf = Vec::new();
            write_jsonl(&d, &mut buf)?;
            emit(&String::from_utf8(buf).expect("JSON is UTF-8"), common.out.as_deref())
        }
        Command::Train {
            common,
            train: args,
            checkpoint,
        } => {
            let mut s = settings(&common)?;
            apply_train_args(&mut s, &args);
            let d = dataset(&common, &s)?;
            let (train_set, heldout) = split(&d, s.holdout_fraction)?;
            let init = initial_scorer(&train_set, &s)?;
            let held = (!heldout.is_empty()).then_some(&heldout);
            let (trained, history) = train(&s.train, &train_set, &init, held)?;
            if let Some(path) = checkpoint {
                trained.save(&path)?;
            }
            let rc = s.train.reward_config()?;
            let (heldout_ndcg, win) = match held {
                Some(h) => {
                    let ndcg = evaluate_ndcg(&trained.with_config(rc), h, s.train.eval_k, s.train.loss.gain_mode)?;
                    let wr = win_rate(&trained.with_config(rc), &init.with_config(rc), h).ok();
                    (Some(ndcg), wr)
                }
                None => (None, None),
            };
            let report = TrainReport {
                mode: trained.mode(),
                train_lists: train_set.len(),
                heldout_lists: heldout.len(),
                heldout_ndcg,
                win_rate_vs_initial: win,
                config: s.train.clone(),
                history,
            };
            emit(&render(&report, common.format)?, common.out.as_deref())
        }
        Command::Eval {
            common,
            scorer,
            baseline,
        } => {
            let s = settings(&common)?;
            let d = dataset(&common, &s)?;
            let load = |p: &Path| {
                Scorer::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
            };
            let model = load(&scorer)?;
            let rc = s.train.reward_config()?;
            let ndcg = evaluate_ndcg(&model.with_config(rc), &d, s.train.eval_k, s.train.loss.gain_mode)?;
            let win = match baseline {
                Some(b) => Some(win_rate(&model.with_config(rc), &load(&b)?.with_config(rc), &d)?),
                None => None,
            };
            let report = EvalReport {
                lists: d.len(),
                k: s.train.eval_k,
                ndcg,
                win_rate_vs_baseline: win,
            };
            emit(&render(&report, common.format)?, common.out.as_deref())
        }
        Command::Sweep {
            common,
            train: args,
            grid,
        } => {
            let mut s = settings(&common)?;
            apply_train_args(&mut s, &args);
            if !grid.is_empty() {
                s.grid = grid.iter().map(|g| parse_axis(g)).collect::<Result<_, _>>()?;
            }
            if s.grid.is_empty() {
                return Err(CliError::usage("sweep needs at least one --grid axis".to_owned()));
            }
            let d = dataset(&common, &s)?;
            let (train_set, heldout) = split(&d, s.holdout_fraction)?;
            let init = initial_scorer(&train_set, &s)?;
            let rows = sweep(&s.grid, &s.train, &train_set, &heldout, &init)?;
            let report = SweepReport {
                config: s.train.clone(),
                rows,
            };
            emit(&render(&report, common.format)?, common.out.as_deref())
        }
        Command::Curve {
            common,
            kind,
            params,
            points,
        } => {
            let labels = LabelVector::new(CURVE_LABELS.to_vec())?;
            let xs = if points == 201 { curve_grid() } else { linspace(0.0, 1.2, points) };
            let kinds = match kind {
                Some(k) => vec![k],
                None => vec![CurveKind::Neural, CurveKind::Approx],
            };
            let mut curves = Vec::new();
            for k in kinds {
                let values = match (params.is_empty(), k) {
                    (false, _) => params.clone(),
                    (true, CurveKind::Neural) => common.tau.map_or(vec![0.1, 1.0, 10.0], |t| vec![t]),
                    (true, CurveKind::Approx) => common.alpha.map_or(vec![5.0, 25.0, 125.0], |a| vec![a]),
                };
                for v in values {
                    curves.push(approximation_curve(k, &labels, &CURVE_SCORES, v, &xs)?);
                }
            }
            let report = CurveReport {
                labels: CURVE_LABELS.to_vec(),
                scores: CURVE_SCORES.to_vec(),
                curves,
            };
            emit(&render(&report, common.format)?, common.out.as_deref())
        }
        Command::Compare { common, train: args } => {
            let mut s = settings(&common)?;
            apply_train_args(&mut s, &args);
            let d = dataset(&common, &s)?;
            let (train_set, heldout) = split(&d, s.holdout_fraction)?;
            if heldout.is_empty() {
                return Err(CliError::usage("compare needs a non-empty held-out split".to_owned()));
            }
            let init = initial_scorer(&train_set, &s)?;
            let report = compare(&s.train, &train_set, &heldout, &init)?;
            emit(&render(&report, common.format)?, common.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let start = Instant::now();
    match run(cli) {
        Ok(()) => {
            eprintln!("done in {:.2?}", start.elapsed());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
