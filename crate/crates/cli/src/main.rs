//! `fairexp` — train a feature-aware ranker, measure item-exposure
//! disparity, explain it feature by feature, and evaluate the
//! fairness-utility trade-off under feature erasure.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! failure.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fairexp_core::cef::{CandidateScope, TargetSide};
use fairexp_core::error::Error;
use fairexp_core::fairness::DisparitySpec;
use fairexp_core::ingest::FileFormat;
use fairexp_core::ranker::MergeKind;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "fairexp", version, about)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Proceed with a warning when the config no longer matches the one
    /// the data artifacts were produced with.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Product,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    User,
    Item,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum DisparityArg {
    Dp,
    Ek,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    TestCandidates,
    FullCatalog,
}

#[derive(Args)]
struct ExplainFlags {
    /// Methods to run (repeatable); defaults to the config's list.
    #[arg(long = "method")]
    methods: Vec<String>,

    /// Which side the counterfactual intervention touches.
    #[arg(long)]
    target: Option<TargetArg>,

    #[arg(long)]
    lambda: Option<f64>,

    #[arg(long)]
    beta: Option<f64>,

    /// Slate length used for disparity and explanation scoring.
    #[arg(long)]
    k: Option<usize>,

    #[arg(long)]
    disparity: Option<DisparityArg>,

    /// Target exposure ratio for the exact-k disparity.
    #[arg(long)]
    alpha: Option<f64>,

    #[arg(long)]
    max_iters: Option<usize>,

    #[arg(long)]
    scope: Option<ScopeArg>,

    #[arg(long)]
    shapley_samples: Option<usize>,

    #[arg(long)]
    shapley_exact: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse or synthesize the dataset; build splits, groups, matrices.
    Ingest {
        /// Generate a synthetic dataset instead of parsing files.
        #[arg(long)]
        synthetic: bool,

        #[arg(long)]
        interactions: Option<PathBuf>,

        #[arg(long)]
        quadruples: Option<PathBuf>,

        #[arg(long)]
        format: Option<FormatArg>,

        /// Filter threshold: drop users/items with fewer interactions.
        #[arg(long)]
        min_reviews: Option<usize>,
    },
    /// Train the ranking model on the ingested artifacts.
    Train {
        #[arg(long)]
        merge: Option<MergeArg>,

        #[arg(long)]
        lr: Option<f64>,

        #[arg(long)]
        epochs: Option<usize>,

        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Rank features as fairness explanations.
    Explain(ExplainFlags),
    /// Erasure evaluation at fixed erasure levels.
    Evaluate {
        #[arg(long = "method")]
        methods: Vec<String>,

        #[arg(long = "e-level")]
        e_levels: Vec<usize>,
    },
    /// Cumulative-erasure trade-off curves and plot data.
    Curve {
        #[arg(long = "method")]
        methods: Vec<String>,

        #[arg(long)]
        step: Option<usize>,

        #[arg(long)]
        max_e: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Ingest {
            synthetic,
            interactions,
            quadruples,
            format,
            min_reviews,
        } => {
            if let Some(p) = interactions {
                cfg.data.interactions = Some(p);
            }
            if let Some(p) = quadruples {
                cfg.data.quadruples = Some(p);
            }
            if let Some(f) = format {
                cfg.data.format = match f {
                    FormatArg::Tsv => FileFormat::Tsv,
                    FormatArg::Jsonl => FileFormat::Jsonl,
                };
            }
            if let Some(n) = min_reviews {
                cfg.min_reviews = n;
            }
            if synthetic && cfg.data.synthetic.is_none() {
                return Err(Error::data(
                    "--synthetic requires a `data.synthetic` block in the config",
                ));
            }
            if !synthetic && cfg.data.interactions.is_some() {
                // Explicit file paths win over a synthetic block left in
                // the config.
                cfg.data.synthetic = None;
            }
            cfg.resolve_seeds();
            pipeline::cmd_ingest(&cfg)
        }
        Command::Train {
            merge,
            lr,
            epochs,
            batch_size,
        } => {
            if let Some(m) = merge {
                cfg.merge = match m {
                    MergeArg::Product => MergeKind::Product,
                    MergeArg::Concat => MergeKind::Concat,
                };
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            cfg.resolve_seeds();
            pipeline::cmd_train(&cfg, cli.allow_config_mismatch)
        }
        Command::Explain(flags) => {
            if let Some(t) = flags.target {
                cfg.cef.target = match t {
                    TargetArg::User => TargetSide::User,
                    TargetArg::Item => TargetSide::Item,
                    TargetArg::Both => TargetSide::Both,
                };
            }
            if let Some(l) = flags.lambda {
                cfg.cef.lambda = l;
            }
            if let Some(b) = flags.beta {
                cfg.cef.beta = b;
            }
            if let Some(k) = flags.k {
                cfg.cef.k = k;
            }
            match (flags.disparity, flags.alpha) {
                (Some(DisparityArg::Dp), _) => cfg.cef.disparity = DisparitySpec::Dp,
                (Some(DisparityArg::Ek), Some(alpha)) => {
                    cfg.cef.disparity = DisparitySpec::Ek { alpha }
                }
                (Some(DisparityArg::Ek), None) => {
                    return Err(Error::data("--disparity ek requires --alpha"))
                }
                (None, _) => {}
            }
            if let Some(i) = flags.max_iters {
                cfg.cef.max_iters = i;
            }
            if let Some(s) = flags.scope {
                cfg.cef.candidate_scope = match s {
                    ScopeArg::TestCandidates => CandidateScope::TestCandidates,
                    ScopeArg::FullCatalog => CandidateScope::FullCatalog,
                };
            }
            if let Some(s) = flags.shapley_samples {
                cfg.shapley_samples = s;
            }
            if flags.shapley_exact {
                cfg.shapley_exact = true;
            }
            cfg.resolve_seeds();
            let methods = if flags.methods.is_empty() {
                cfg.baselines.clone()
            } else {
                flags.methods.clone()
            };
            pipeline::cmd_explain(&cfg, &methods, cli.allow_config_mismatch)
        }
        Command::Evaluate { methods, e_levels } => {
            if !e_levels.is_empty() {
                cfg.e_levels = e_levels;
            }
            cfg.resolve_seeds();
            let methods = if methods.is_empty() {
                cfg.baselines.clone()
            } else {
                methods
            };
            pipeline::cmd_evaluate(&cfg, &methods, cli.allow_config_mismatch)
        }
        Command::Curve {
            methods,
            step,
            max_e,
        } => {
            if let Some(s) = step {
                cfg.curve_step = s;
            }
            if let Some(m) = max_e {
                cfg.curve_max_e = m;
            }
            cfg.resolve_seeds();
            let methods = if methods.is_empty() {
                cfg.baselines.clone()
            } else {
                methods
            };
            pipeline::cmd_curve(&cfg, &methods, cli.allow_config_mismatch)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
