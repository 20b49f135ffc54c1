use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use natr::checkpoint::Checkpoint;
use natr::config::RunConfig;
use natr::corpus_io::{load_corpus, load_sources, write_synthetic};
use natr::eval::{
    decode_all, encode_corpus, encode_sources, format_hypotheses, max_source_len, report,
    DecodeSettings,
};
use natr::runner;
use natr::selftest;
use natr_core::data::{generate_synthetic, SyntheticTaskConfig};

#[derive(Parser)]
#[command(
    name = "natr",
    version,
    about = "Non-autoregressive translation with a learned rephraser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train, then fine-tune with the rephraser.
    Train(TrainArgs),
    /// Score a checkpoint on a multi-reference corpus.
    Eval(EvalArgs),
    /// Translate a file of source sentences.
    Decode(DecodeArgs),
    /// Run the oracle suites.
    Selftest,
    /// Write the synthetic two-mode task.
    GenData(GenArgs),
}

/// Flags shared by the run-configuring commands; each overrides the
/// matching key of `--config`.
#[derive(Args, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["vanilla", "cmlm", "ctc"])]
    model_kind: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    rephraser: Option<String>,
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    alpha_min: Option<f64>,
    #[arg(long)]
    k_baseline: Option<usize>,
    #[arg(long)]
    rephraser_layers: Option<usize>,
    #[arg(long, value_parser = ["base", "swap"])]
    rephraser_variant: Option<String>,
    /// Fixed α instead of the annealed schedule.
    #[arg(long)]
    static_alpha: Option<f64>,
    /// Mask-predict iteration counts, comma separated.
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any configuration key, as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let mut put = |k: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
            Ok(())
        };
        put("train.seed", self.seed.map(|v| v.to_string()))?;
        put("model.kind", self.model_kind.clone())?;
        put("train.rephraser", self.rephraser.clone())?;
        put("reward.alpha_max", self.alpha_max.map(|v| v.to_string()))?;
        put("reward.alpha_min", self.alpha_min.map(|v| v.to_string()))?;
        put("reward.k_baseline", self.k_baseline.map(|v| v.to_string()))?;
        put(
            "model.rephraser_layers",
            self.rephraser_layers.map(|v| v.to_string()),
        )?;
        put("model.rephraser_variant", self.rephraser_variant.clone())?;
        put(
            "reward.static_alpha",
            self.static_alpha.map(|v| v.to_string()),
        )?;
        put("eval.iterations", self.iterations.clone())?;
        put(
            "train.out",
            self.out.as_ref().map(|p| p.display().to_string()),
        )?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    /// Whether the user said anything about the model shape.
    fn touches_model(&self) -> bool {
        self.config.is_some()
            || self.model_kind.is_some()
            || self.rephraser_layers.is_some()
            || self.rephraser_variant.is_some()
            || self.set.iter().any(|s| s.starts_with("model."))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    valid_interval: Option<u64>,
    /// Fresh optimiser moments when fine-tuning starts.
    #[arg(long)]
    reset_optim: bool,
    /// Fine-tune NAT and rephraser on alternating steps.
    #[arg(long)]
    alternate: bool,
    /// Report the average of the `k` best validation checkpoints.
    #[arg(long, value_name = "K")]
    avg_best: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Append a tab and the geometric-mean token probability to each line.
    #[arg(long)]
    confidence: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    content_vocab: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 10000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    valid_size: usize,
    #[arg(long, default_value_t = 500)]
    test_size: usize,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut c = a.common.config()?;
    let opt = |v: Option<String>, k: &str, c: &mut RunConfig| -> Result<()> {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
        Ok(())
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    opt(path(&a.train), "data.train", &mut c)?;
    opt(path(&a.valid), "data.valid", &mut c)?;
    opt(path(&a.test), "data.test", &mut c)?;
    opt(
        a.pretrain_steps.map(|v| v.to_string()),
        "train.pretrain_steps",
        &mut c,
    )?;
    opt(
        a.finetune_steps.map(|v| v.to_string()),
        "train.finetune_steps",
        &mut c,
    )?;
    opt(
        a.max_tokens.map(|v| v.to_string()),
        "data.max_tokens",
        &mut c,
    )?;
    opt(
        a.valid_interval.map(|v| v.to_string()),
        "train.valid_interval",
        &mut c,
    )?;
    opt(a.avg_best.map(|v| v.to_string()), "train.avg_best", &mut c)?;
    if a.reset_optim {
        c.reset_optim = true;
    }
    if a.alternate {
        c.step.alternate = true;
    }
    let outcome = runner::train(&c)?;
    println!(
        "best validation BLEU {:.2} at step {} ({})",
        outcome.best_bleu,
        outcome.best_step,
        outcome.dir.display()
    );
    if let Some(r) = &outcome.report {
        print!("{}", r.to_text());
    }
    Ok(())
}

/// Loads a checkpoint, warning when the command line describes a different
/// model; the checkpoint's own configuration is used either way.
fn load_checkpoint(path: &Path, common: &Common, cli: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if common.touches_model() {
        let mut from_ckpt = RunConfig::default();
        from_ckpt.model = ckpt.model.clone();
        let model_entries = |c: &RunConfig| -> Vec<(&'static str, String)> {
            c.entries()
                .into_iter()
                .filter(|(k, _)| k.starts_with("model."))
                .collect()
        };
        for ((k, ours), (_, theirs)) in model_entries(cli).iter().zip(model_entries(&from_ckpt)) {
            if *ours != theirs {
                eprintln!("warning: {k} = {ours} on the command line, {theirs} in the checkpoint; using the checkpoint");
            }
        }
    }
    Ok(ckpt)
}

fn settings(c: &RunConfig) -> DecodeSettings {
    DecodeSettings {
        iterations: c.decode_iterations,
        length_candidates: c.length_candidates,
        batch_size: c.eval_batch,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let c = a.common.config()?;
    let ckpt = load_checkpoint(&a.checkpoint, &a.common, &c)?;
    let vocab = ckpt.vocabulary()?;
    let model = ckpt.build_model()?;
    let corpus =
        load_corpus(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let pairs = encode_corpus(&corpus, &vocab, max_source_len(&model)).with_context(|| {
        format!(
            "{} does not match the checkpoint vocabulary",
            a.corpus.display()
        )
    })?;
    let r = report(&model, &pairs, settings(&c), &c.eval_iterations)?;
    print!("{}", r.to_text());
    println!("{}", r.to_json());
    if a.common.out.is_some() {
        fs::create_dir_all(&c.out)?;
        fs::write(c.out.join("report.txt"), r.to_text())?;
        fs::write(c.out.join("report.json"), r.to_json() + "\n")?;
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let mut c = a.common.config()?;
    if a.common.iterations.is_some() {
        match c.eval_iterations.as_slice() {
            [i] => c.decode_iterations = *i,
            _ => bail!("decode takes a single --iterations value"),
        }
    }
    let ckpt = load_checkpoint(&a.checkpoint, &a.common, &c)?;
    let vocab = ckpt.vocabulary()?;
    let model = ckpt.build_model()?;
    let lines = load_sources(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let sources = encode_sources(&lines, &vocab, max_source_len(&model))
        .with_context(|| format!("{}", a.input.display()))?;
    let results = decode_all(&model, &sources, settings(&c))?;
    fs::write(
        &a.output,
        format_hypotheses(&results, &vocab, a.confidence)?,
    )
    .with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

const SELFTEST_BUDGET: Duration = Duration::from_secs(300);

fn cmd_selftest() -> Result<bool> {
    let mut ok = true;
    let mut total = Duration::ZERO;
    for r in selftest::run_all() {
        total += r.elapsed;
        ok &= r.passed;
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<24} {:>7.2}s  {}",
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        );
    }
    if total > SELFTEST_BUDGET {
        eprintln!(
            "warning: self-test took {:.0}s, over the {}s budget",
            total.as_secs_f64(),
            SELFTEST_BUDGET.as_secs()
        );
    }
    Ok(ok)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = SyntheticTaskConfig {
        content_vocab: a.content_vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        train_size: a.train_size,
        valid_size: a.valid_size,
        test_size: a.test_size,
        seed: a.seed,
        ..SyntheticTaskConfig::default()
    };
    let corpora = generate_synthetic(&cfg)?;
    write_synthetic(&a.out, &cfg, &corpora)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Decode(a) => cmd_decode(a).map(|_| true),
        Command::Selftest => cmd_selftest(),
        Command::GenData(a) => cmd_gen(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
