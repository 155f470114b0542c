use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probanet::gradcheck::GradcheckOptions;
use probanet_cli::{
    cmd_count, cmd_gradcheck, cmd_heatmap, cmd_train, exit_code, Variants, EXIT_OK, EXIT_VALIDATION,
};

#[derive(Parser)]
#[command(
    name = "probanet",
    version,
    about = "Proposal-weighting gate experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Random instances per op.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Feature map shape as HxWxC.
        #[arg(long, default_value = "6x6x8", value_parser = parse_shape)]
        shape: (usize, usize, usize),
        /// Check a single op only.
        #[arg(long)]
        op: Option<String>,
    },
    /// Print the gate's extra parameters and MACs.
    Count {
        #[arg(long, default_value_t = 512)]
        channels: usize,
        #[arg(long, default_value_t = 18)]
        anchors: usize,
        #[arg(long, default_value_t = 16)]
        reduction: usize,
        #[arg(long, default_value_t = 38)]
        height: usize,
        #[arg(long, default_value_t = 50)]
        width: usize,
    },
    /// Train baseline and gated variants and write logs, summary and heatmaps.
    Train {
        /// `key = value` config file; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        variant: VariantArgs,
        /// Number of consecutive seeds (overrides the config).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Replay a run and render one gate-weight channel.
    Heatmap {
        /// A run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        channel: usize,
        /// Training step to render; the end of the run when omitted.
        #[arg(long)]
        step: Option<usize>,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct VariantArgs {
    /// Run only the ungated baseline.
    #[arg(long)]
    baseline: bool,
    /// Run only the gated variant.
    #[arg(long)]
    probanet: bool,
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|e| format!("bad dimension `{d}`: {e}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(format!("expected HxWxC, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Gradcheck {
            seed,
            eps,
            seeds,
            shape,
            op,
        } => {
            let opts = GradcheckOptions {
                seed,
                seeds,
                step: eps,
                shape,
                op,
            };
            cmd_gradcheck(&opts, &mut stdout).map(|ok| if ok { EXIT_OK } else { EXIT_VALIDATION })
        }
        Command::Count {
            channels,
            anchors,
            reduction,
            height,
            width,
        } => cmd_count(channels, anchors, reduction, height, width, &mut stdout).map(|_| EXIT_OK),
        Command::Train {
            config,
            out,
            variant,
            seeds,
        } => {
            let variants = match (variant.baseline, variant.probanet) {
                (true, _) => Variants::Baseline,
                (_, true) => Variants::Probanet,
                _ => Variants::Both,
            };
            cmd_train(config.as_deref(), &out, variants, seeds, &mut stdout).map(|_| EXIT_OK)
        }
        Command::Heatmap { run, channel, step } => {
            cmd_heatmap(&run, channel, step, &mut stdout).map(|_| EXIT_OK)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
