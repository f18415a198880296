//! `recall`: train, evaluate, ablate, simulate, plot curves, and serve.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "recall", version, about = "Content-aware recall prediction and scheduling")]
struct Cli {
    /// Plain-text key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra key=value setting; repeatable. Dedicated flags take precedence.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Json => "json",
        })
    }
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Study log (JSON Lines or CSV).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Card embeddings (text or binary).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Share of records, in time order, used for training.
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct NetArgs {
    #[arg(long)]
    hidden: Option<usize>,
    /// Number of retrieved history cards.
    #[arg(long)]
    k: Option<usize>,
    /// top-k, past-k, or none.
    #[arg(long)]
    retrieval: Option<String>,
    /// Leave card embeddings out of the network input.
    #[arg(long)]
    no_embeddings: bool,
    /// default, all, none, or a comma-separated list of feature ids.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also fit half-life regression weights and write them here.
        #[arg(long)]
        hlr_out: Option<PathBuf>,
    },
    /// Score the held-out records and print seen/unseen metrics.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// checkpoint, hlr, leitner, sm2, or fsrs.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        hlr_weights: Option<PathBuf>,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Train and evaluate a sweep of input variants.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        /// Comma-separated variants: full, no-embeddings, no-features, all-features, k0, k1, k10, past-k.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Generate synthetic students, write their logs, and evaluate a model trained on them.
    Simulate {
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        n_cards: Option<usize>,
        #[arg(long)]
        n_records: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        /// Output directory for records, cards, embeddings, and the report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only write the generated data.
        #[arg(long)]
        no_train: bool,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Predicted recall of one card over the next 20 days, with no further study.
    Curve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        hlr_weights: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        card: Option<String>,
        /// Curve start (UTC seconds or RFC 3339); defaults to just after the last record.
        #[arg(long)]
        at: Option<String>,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Event log path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Flashcards, one JSON object per line.
        #[arg(long)]
        cards: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        hlr_weights: Option<PathBuf>,
        /// Honor the clock-override header (test deployments only).
        #[arg(long)]
        test_clock: bool,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl DataArgs {
    fn apply(self, s: &mut Settings) {
        s.flag("dataset", path_str(self.dataset))
            .flag("embeddings", path_str(self.embeddings))
            .flag("train_fraction", self.train_fraction);
    }
}

impl NetArgs {
    fn apply(self, s: &mut Settings) {
        s.flag("hidden", self.hidden)
            .flag("k", self.k)
            .flag("retrieval", self.retrieval)
            .flag("features", self.features)
            .flag("learning_rate", self.learning_rate)
            .flag("batch_size", self.batch_size)
            .flag("epochs", self.epochs)
            .flag("dropout", self.dropout)
            .flag("seed", self.seed);
        if self.no_embeddings {
            s.flag("use_embeddings", Some(false));
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train { data, net, out, hlr_out } => {
            data.apply(&mut s);
            net.apply(&mut s);
            s.flag("out", path_str(out)).flag("hlr_out", path_str(hlr_out));
            commands::train(&s)
        }
        Command::Eval {
            data,
            model,
            checkpoint,
            hlr_weights,
            format,
        } => {
            data.apply(&mut s);
            s.flag("model", model)
                .flag("checkpoint", path_str(checkpoint))
                .flag("hlr_weights", path_str(hlr_weights))
                .flag("format", format);
            commands::eval(&s)
        }
        Command::Ablate { data, net, variants, format } => {
            data.apply(&mut s);
            net.apply(&mut s);
            s.flag("variants", variants).flag("format", format);
            commands::ablate(&s)
        }
        Command::Simulate {
            n_users,
            n_cards,
            n_records,
            days,
            out,
            no_train,
            net,
            format,
        } => {
            net.apply(&mut s);
            s.flag("n_users", n_users)
                .flag("n_cards", n_cards)
                .flag("n_records", n_records)
                .flag("days", days)
                .flag("out", path_str(out))
                .flag("format", format);
            commands::simulate(&s, !no_train)
        }
        Command::Curve {
            data,
            model,
            checkpoint,
            hlr_weights,
            user,
            card,
            at,
            format,
        } => {
            data.apply(&mut s);
            s.flag("model", model)
                .flag("checkpoint", path_str(checkpoint))
                .flag("hlr_weights", path_str(hlr_weights))
                .flag("user", user)
                .flag("card", card)
                .flag("at", at)
                .flag("format", format);
            commands::curve(&s)
        }
        Command::Serve {
            bind,
            log,
            cards,
            model,
            checkpoint,
            embeddings,
            hlr_weights,
            test_clock,
        } => {
            s.flag("bind", bind)
                .flag("log", path_str(log))
                .flag("cards", path_str(cards))
                .flag("model", model)
                .flag("checkpoint", path_str(checkpoint))
                .flag("embeddings", path_str(embeddings))
                .flag("hlr_weights", path_str(hlr_weights))
                .switch("test_clock", test_clock);
            commands::serve(&s)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
