//! `spikemamba`: toy experiments, audits and energy reports for spiking Mamba2.
//!
//! Every subcommand resolves its parameters as defaults < `--run-config` file <
//! flags, writes `resolved_config.txt` plus its outputs under `--out`, and
//! exits 0 on success, 1 on invalid input and 2 when a check or contract fails.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "spikemamba", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// key=value file applied on top of the defaults.
    #[arg(long, global = true)]
    run_config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_state: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_head: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Text file; a synthetic held-out corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dense / integer / event projection equivalence and spike-train round trips.
    VerifyEquivalence {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Finite-difference audits of the analytic gradients.
    Gradcheck {
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Per-category energy estimate for a model preset.
    EnergyReport {
        /// 130m, 1.3b or toy.
        #[arg(long)]
        config: Option<String>,
        /// ann, lif, ilif or tilif.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        fr_in: Option<f64>,
        #[arg(long)]
        fr_out: Option<f64>,
        #[arg(long)]
        k: Option<u32>,
        /// Use the published fire rates and compare against the published cells.
        #[arg(long)]
        paper: bool,
    },
    /// Synthetic training text or preference data.
    GenCorpus {
        /// text or prefs.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        lines: Option<usize>,
        /// Number of preference records.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        paired: Option<bool>,
        /// Source text for preference records.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Dense teacher on next-token prediction.
    TrainTeacher {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lines: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Spiking student distilled from a dense teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lines: Option<usize>,
        /// lif, ilif or tilif.
        #[arg(long)]
        neuron: Option<String>,
        #[arg(long)]
        d_max: Option<u32>,
        /// Comma-separated layer indices, `auto` (first, middle, last) or `none`.
        #[arg(long)]
        sgc_layers: Option<String>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        hidden_sgc_only: Option<bool>,
        #[arg(long)]
        freeze_embedding: Option<bool>,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Preference fine-tuning with DPO or KTO.
    Rl {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// JSONL preference records; synthetic ones from the corpus when absent.
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lines: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        z_ref: Option<f64>,
        #[arg(long)]
        weight_desirable: Option<f64>,
        #[arg(long)]
        weight_undesirable: Option<f64>,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Token-level perplexity of a checkpoint.
    EvalPpl {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Histogram of block input or output activations.
    ActivationHist {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        layer: Option<usize>,
        /// u_t or y_t.
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Perplexity change when each channel's maximum activation is clamped.
    ClampAblation {
        #[command(flatten)]
        eval: EvalArgs,
        /// max_to_zero or max_to_one.
        #[arg(long)]
        mode: Option<String>,
        /// u_t or y_t.
        #[arg(long)]
        site: Option<String>,
    },
}

const MODEL_KEYS: &[(&str, &str)] = &[
    ("d_model", "64"),
    ("n_state", "16"),
    ("n_heads", "2"),
    ("d_head", "64"),
    ("n_layers", "2"),
];
const EVAL_KEYS: &[(&str, &str)] = &[("ckpt", ""), ("corpus", ""), ("seq_len", "64"), ("max_windows", "64")];

fn optim_keys(steps: &'static str, lr: &'static str) -> [(&'static str, &'static str); 5] {
    [("steps", steps), ("batch", "8"), ("lr", lr), ("weight_decay", "0"), ("clip", "1")]
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn apply_optim(rc: &mut RunConfig, o: &OptimArgs) -> anyhow::Result<()> {
    rc.flag("steps", &o.steps)?;
    rc.flag("batch", &o.batch)?;
    rc.flag("lr", &o.lr)?;
    rc.flag("weight_decay", &o.weight_decay)?;
    rc.flag("clip", &o.clip)
}

fn apply_eval(rc: &mut RunConfig, e: &EvalArgs) -> anyhow::Result<()> {
    rc.flag("ckpt", &path_str(&e.ckpt))?;
    rc.flag("corpus", &path_str(&e.corpus))?;
    rc.flag("seq_len", &e.seq_len)?;
    rc.flag("max_windows", &e.max_windows)
}

type Runner = fn(&RunConfig) -> anyhow::Result<Outcome>;

/// Builds the resolved configuration and picks the command body.
fn resolve(cli: &Cli) -> anyhow::Result<(RunConfig, Runner)> {
    let (name, mut keys): (&str, Vec<(&str, &str)>) = match &cli.command {
        Command::VerifyEquivalence { .. } => ("verify-equivalence", vec![("instances", "10000")]),
        Command::Gradcheck { .. } => ("gradcheck", vec![("probes", "128")]),
        Command::EnergyReport { .. } => (
            "energy-report",
            vec![("config", "130m"), ("variant", "ann"), ("fr_in", ""), ("fr_out", ""), ("k", ""), ("paper", "false")],
        ),
        Command::GenCorpus { .. } => (
            "gen-corpus",
            vec![("kind", "text"), ("lines", "4000"), ("n", "256"), ("paired", "true"), ("corpus", "")],
        ),
        Command::TrainTeacher { .. } => {
            let mut k = vec![("corpus", ""), ("lines", "4000"), ("seq_len", "64")];
            k.extend_from_slice(MODEL_KEYS);
            k.extend(optim_keys("1500", "0.003"));
            ("train-teacher", k)
        }
        Command::Distill { .. } => {
            let mut k = vec![
                ("teacher", ""),
                ("corpus", ""),
                ("lines", "4000"),
                ("neuron", "tilif"),
                ("d_max", "4"),
                ("sgc_layers", "auto"),
                ("pool_size", "64"),
                ("prompt_len", "8"),
                ("seq_len", "64"),
                ("hidden_sgc_only", "false"),
                ("freeze_embedding", "false"),
            ];
            k.extend(optim_keys("2000", "0.001"));
            ("distill", k)
        }
        Command::Rl { .. } => {
            let mut k = vec![
                ("method", "dpo"),
                ("policy", ""),
                ("prefs", ""),
                ("corpus", ""),
                ("lines", "4000"),
                ("beta", "0.1"),
                ("max_len", "64"),
                ("z_ref", ""),
                ("weight_desirable", "1"),
                ("weight_undesirable", "1"),
            ];
            k.extend(optim_keys("200", "0.0001"));
            ("rl", k)
        }
        Command::EvalPpl { .. } => ("eval-ppl", EVAL_KEYS.to_vec()),
        Command::ActivationHist { .. } => {
            let mut k = EVAL_KEYS.to_vec();
            k.extend([("layer", "0"), ("site", "y_t"), ("bins", "32")]);
            ("activation-hist", k)
        }
        Command::ClampAblation { .. } => {
            let mut k = EVAL_KEYS.to_vec();
            k.extend([("mode", "max_to_zero"), ("site", "y_t")]);
            ("clamp-ablation", k)
        }
    };
    keys.sort();
    let mut rc = RunConfig::new(name, &keys);
    if let Some(p) = &cli.global.run_config {
        rc.merge_file(p)?;
    }
    rc.flag("seed", &cli.global.seed)?;
    rc.flag("precision", &cli.global.precision)?;
    rc.flag("out", &path_str(&cli.global.out))?;
    rc.validate_precision()?;

    let runner: Runner = match &cli.command {
        Command::VerifyEquivalence { instances } => {
            rc.flag("instances", instances)?;
            commands::verify_equivalence
        }
        Command::Gradcheck { probes } => {
            rc.flag("probes", probes)?;
            commands::gradcheck
        }
        Command::EnergyReport { config, variant, fr_in, fr_out, k, paper } => {
            rc.flag("config", config)?;
            rc.flag("variant", variant)?;
            rc.flag("fr_in", fr_in)?;
            rc.flag("fr_out", fr_out)?;
            rc.flag("k", k)?;
            if *paper {
                rc.set("paper", "true")?;
            }
            commands::energy_report
        }
        Command::GenCorpus { kind, lines, n, paired, corpus } => {
            rc.flag("kind", kind)?;
            rc.flag("lines", lines)?;
            rc.flag("n", n)?;
            rc.flag("paired", paired)?;
            rc.flag("corpus", &path_str(corpus))?;
            commands::gen_corpus
        }
        Command::TrainTeacher { corpus, lines, seq_len, model, optim } => {
            rc.flag("corpus", &path_str(corpus))?;
            rc.flag("lines", lines)?;
            rc.flag("seq_len", seq_len)?;
            rc.flag("d_model", &model.d_model)?;
            rc.flag("n_state", &model.n_state)?;
            rc.flag("n_heads", &model.n_heads)?;
            rc.flag("d_head", &model.d_head)?;
            rc.flag("n_layers", &model.n_layers)?;
            apply_optim(&mut rc, optim)?;
            commands::train_teacher_cmd
        }
        Command::Distill {
            teacher,
            corpus,
            lines,
            neuron,
            d_max,
            sgc_layers,
            pool_size,
            prompt_len,
            seq_len,
            hidden_sgc_only,
            freeze_embedding,
            optim,
        } => {
            rc.flag("teacher", &path_str(teacher))?;
            rc.flag("corpus", &path_str(corpus))?;
            rc.flag("lines", lines)?;
            rc.flag("neuron", neuron)?;
            rc.flag("d_max", d_max)?;
            rc.flag("sgc_layers", sgc_layers)?;
            rc.flag("pool_size", pool_size)?;
            rc.flag("prompt_len", prompt_len)?;
            rc.flag("seq_len", seq_len)?;
            rc.flag("hidden_sgc_only", hidden_sgc_only)?;
            rc.flag("freeze_embedding", freeze_embedding)?;
            apply_optim(&mut rc, optim)?;
            commands::distill_cmd
        }
        Command::Rl {
            method,
            policy,
            prefs,
            corpus,
            lines,
            beta,
            max_len,
            z_ref,
            weight_desirable,
            weight_undesirable,
            optim,
        } => {
            rc.flag("method", method)?;
            rc.flag("policy", &path_str(policy))?;
            rc.flag("prefs", &path_str(prefs))?;
            rc.flag("corpus", &path_str(corpus))?;
            rc.flag("lines", lines)?;
            rc.flag("beta", beta)?;
            rc.flag("max_len", max_len)?;
            rc.flag("z_ref", z_ref)?;
            rc.flag("weight_desirable", weight_desirable)?;
            rc.flag("weight_undesirable", weight_undesirable)?;
            apply_optim(&mut rc, optim)?;
            commands::rl_cmd
        }
        Command::EvalPpl { eval } => {
            apply_eval(&mut rc, eval)?;
            commands::eval_ppl_cmd
        }
        Command::ActivationHist { eval, layer, site, bins } => {
            apply_eval(&mut rc, eval)?;
            rc.flag("layer", layer)?;
            rc.flag("site", site)?;
            rc.flag("bins", bins)?;
            commands::activation_hist
        }
        Command::ClampAblation { eval, mode, site } => {
            apply_eval(&mut rc, eval)?;
            rc.flag("mode", mode)?;
            rc.flag("site", site)?;
            commands::clamp_ablation
        }
    };
    Ok((rc, runner))
}

/// Contract and numeric failures from the core map to 2; everything else is invalid input.
fn exit_code(err: &anyhow::Error) -> u8 {
    use spikemamba_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Contract(_) | Error::Numeric { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|(rc, run)| {
        let path = rc.write_resolved()?;
        log::info!("resolved config in {}", path.display());
        run(&rc)
    });
    match result {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
