use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gazechair_cli::commands::{self, CalibOptions, CalibSource, EvalOptions};
use gazechair_cli::server;
use gazechair_core::calibration::SimUser;
use gazechair_core::classifier::ClassifierKind;
use gazechair_core::safety::World2D;

#[derive(Parser)]
#[command(name = "gazechair", version, about = "Gaze-driven wheelchair tools: corpus, training, evaluation, simulation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cnn,
    WholeTemplate,
    PupilTemplate,
    Lbp,
}

impl From<Kind> for ClassifierKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Cnn => ClassifierKind::Cnn,
            Kind::WholeTemplate => ClassifierKind::WholeTemplate,
            Kind::PupilTemplate => ClassifierKind::PupilTemplate,
            Kind::Lbp => ClassifierKind::Lbp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Synthetic,
    Dir,
    Service,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic users into the corpus directory layout.
    SynthGen {
        #[arg(long, default_value_t = 8)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        frames_per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a classifier on a corpus (all users pooled).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Model JSON for the CNN, a template directory otherwise.
        #[arg(long)]
        out: PathBuf,
        /// JSON training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cnn")]
        kind: Kind,
    },
    /// Acquire, vet and clean a calibration session, then train the CNN.
    Calibrate {
        #[arg(long, value_enum)]
        source: Source,
        /// Where the trained model goes.
        #[arg(long)]
        out: PathBuf,
        /// Session output directory; defaults to the model path with a `.session` extension.
        #[arg(long)]
        session_dir: Option<PathBuf>,
        /// User directory for `--source dir`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Service base URL for `--source service`.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        #[arg(long, default_value_t = 1)]
        user_seed: u64,
        #[arg(long, default_value_t = 0.0)]
        blink_rate: f64,
        #[arg(long, default_value_t = 0)]
        lag_frames: usize,
        /// JSON calibration settings.
        #[arg(long)]
        calib_config: Option<PathBuf>,
        /// JSON training settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cross-validate per user and write reports.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cnn")]
        kind: Kind,
        /// Number of folds; 1 is a single 80/20 holdout, 0 scores the given model as is.
        #[arg(long, default_value_t = 5)]
        cv: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Timed predictions for the latency section; 0 skips it.
        #[arg(long, default_value_t = 0)]
        latency_samples: usize,
    },
    /// Per-frame prediction latency, single-threaded.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "cnn")]
        kind: Kind,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a scripted event file and write per-tick telemetry.
    Simulate {
        #[arg(long)]
        headless: bool,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP and WebSocket simulation service.
    Serve {
        #[arg(long, env = "GAZECHAIR_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Initial world JSON.
        #[arg(long)]
        world: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::SynthGen {
            users,
            frames_per_class,
            out,
            seed,
        } => commands::synth_gen(users, frames_per_class, &out, seed),
        Cmd::Train { corpus, out, config, kind } => commands::train(&corpus, &out, config.as_deref(), kind.into()),
        Cmd::Calibrate {
            source,
            out,
            session_dir,
            corpus,
            url,
            user_seed,
            blink_rate,
            lag_frames,
            calib_config,
            config,
        } => {
            let source = match source {
                Source::Synthetic => CalibSource::Synthetic(SimUser {
                    blink_rate,
                    lag_frames,
                    ..SimUser::new(user_seed)
                }),
                Source::Dir => CalibSource::Dir(corpus.as_deref().context("--source dir needs --corpus")?),
                Source::Service => CalibSource::Service { url: &url, user_seed },
            };
            commands::calibrate_cmd(&CalibOptions {
                source,
                out: &out,
                session_dir: session_dir.as_deref(),
                calib_config: calib_config.as_deref(),
                train_config: config.as_deref(),
            })
            .map(|_| ())
        }
        Cmd::Eval {
            corpus,
            model,
            kind,
            cv,
            report,
            config,
            latency_samples,
        } => commands::eval(&EvalOptions {
            corpus: &corpus,
            model: model.as_deref(),
            kind: kind.into(),
            cv,
            report: &report,
            config: config.as_deref(),
            latency_samples,
        })
        .map(|_| ()),
        Cmd::Bench {
            model,
            kind,
            samples,
            warmup,
            out,
        } => commands::bench(&model, kind.into(), samples, warmup, out.as_deref()).map(|_| ()),
        Cmd::Simulate {
            headless,
            config,
            script,
            out,
        } => {
            if !headless {
                bail!("only --headless replay runs from the command line; use `serve` for interactive sessions");
            }
            let n = commands::simulate(&config, &script, &out)?;
            println!("wrote {n} ticks to {}", out.display());
            Ok(())
        }
        Cmd::Serve { port, host, world } => {
            let world = match world {
                None => World2D::default(),
                Some(p) => World2D::from_json(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::run(SocketAddr::new(host, port), world))
        }
    }
}
