//! The two-stage training run: pre-training, then fine-tuning with the
//! rephraser, with periodic validation and checkpoints.
//!
//! A run directory holds `config.txt` (effective configuration),
//! `metrics.tsv` (one line per validation interval), `last.ckpt`,
//! `best.ckpt`, `avg.ckpt` when averaging, and `report.txt` /
//! `report.json` when a test corpus is configured.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use natr_core::autograd::Tensor;
use natr_core::data::EncodedPair;
use natr_core::model::{ModelKind, NatModel};
use natr_core::train::{StepStats, Trainer};
use natr_core::{Corpus, Vocabulary};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus_io::load_corpus;
use crate::eval::{encode_corpus, evaluate, report, DecodeSettings, Report};
use crate::prefetch::{worker_count, BatchPlan, BatchStream};

pub const METRICS_HEADER: &str = "step\tstage\tnat_loss\tlength_loss\trephraser_loss\treward\talpha\tr_sim\tr_loss\tbaseline\tskipped\tvalid_bleu";

pub struct RunData {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedPair>,
    pub valid: Vec<EncodedPair>,
    pub test: Option<Vec<EncodedPair>>,
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("reading {}", path.display()))
}

/// Reads the corpora named in `cfg` and builds the vocabulary from the
/// training and validation sides.
pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| anyhow!("no training corpus (data.train)"))?;
    let valid_path = cfg
        .valid_path
        .as_ref()
        .ok_or_else(|| anyhow!("no validation corpus (data.valid)"))?;
    let train = load(train_path)?;
    let valid = load(valid_path)?;
    let test = cfg.test_path.as_deref().map(load).transpose()?;
    let vocab = Vocabulary::from_corpora([&train, &valid]);
    let max = match cfg.model.model_kind {
        ModelKind::Ctc => cfg.model.max_len / cfg.model.ctc_upsample.max(1),
        _ => cfg.model.max_len,
    };
    let enc = |c: &Corpus, p: &Path| {
        encode_corpus(c, &vocab, max).with_context(|| format!("{}", p.display()))
    };
    Ok(RunData {
        train: enc(&train, train_path)?,
        valid: enc(&valid, valid_path)?,
        test: match (&test, &cfg.test_path) {
            (Some(t), Some(p)) => Some(enc(t, p)?),
            _ => None,
        },
        vocab,
    })
}

/// Interval means of the step statistics.
#[derive(Default)]
struct Accumulator {
    n: usize,
    sum: StepStats,
    skipped: usize,
}

impl Accumulator {
    fn add(&mut self, s: &StepStats) {
        self.n += 1;
        self.sum.nat_loss += s.nat_loss;
        self.sum.length_loss += s.length_loss;
        self.sum.rephraser_loss += s.rephraser_loss;
        self.sum.reward += s.reward;
        self.sum.alpha += s.alpha;
        self.sum.r_sim += s.r_sim;
        self.sum.r_loss += s.r_loss;
        self.sum.baseline += s.baseline;
        self.skipped += s.skipped;
    }

    fn row(&self, step: u64, stage: &str, bleu: f64) -> String {
        let n = self.n.max(1) as f64;
        let s = &self.sum;
        format!(
            "{step}\t{stage}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.4}",
            s.nat_loss / n,
            s.length_loss / n,
            s.rephraser_loss / n,
            s.reward / n,
            s.alpha / n,
            s.r_sim / n,
            s.r_loss / n,
            s.baseline / n,
            self.skipped,
            bleu
        )
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    /// `(step, validation BLEU)` at every interval.
    pub valid_trace: Vec<(u64, f64)>,
    pub best_step: u64,
    pub best_bleu: f64,
    /// Weights used for the final report: averaged, best or last.
    pub final_model: NatModel<f32>,
    pub vocab: Vocabulary,
    pub report: Option<Report>,
}

impl RunOutcome {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

struct Snapshot {
    bleu: f64,
    step: u64,
    weights: Vec<Vec<f32>>,
}

fn average(model: &NatModel<f32>, snaps: &[Snapshot]) -> NatModel<f32> {
    let mut out = model.clone();
    let n = snaps.len() as f32;
    let ids: Vec<_> = out.params().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = out.params().value(id).shape.clone();
        let len = snaps[0].weights[k].len();
        let data = (0..len)
            .map(|j| snaps.iter().map(|s| s.weights[k][j]).sum::<f32>() / n)
            .collect();
        *out.params_mut().value_mut(id) = Tensor::new(shape, data);
    }
    out
}

fn weights(model: &NatModel<f32>) -> Vec<Vec<f32>> {
    model
        .params()
        .iter()
        .map(|(_, p)| p.value.data.clone())
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Seeds for model initialisation, the trainer's sampler and batching.
fn derive_seeds(seed: u64) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.gen(), rng.gen(), rng.gen())
}

/// Trains with the corpora named in `cfg`.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = load_data(cfg)?;
    train_with(cfg, data)
}

pub fn train_with(cfg: &RunConfig, data: RunData) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.finalize()?;
    cfg.model.vocab_size = data.vocab.len();
    cfg.model.validate()?;
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.txt"), &cfg.echo())?;

    let (model_seed, sampler_seed, batch_seed) = derive_seeds(cfg.seed);
    let model = NatModel::new(cfg.model.clone(), model_seed)?;
    let mut trainer = Trainer::new(model, cfg.adam, cfg.step.clone(), sampler_seed)?;
    let settings = DecodeSettings {
        iterations: cfg.decode_iterations,
        length_candidates: cfg.length_candidates,
        batch_size: cfg.eval_batch,
    };
    let plan = BatchPlan {
        max_tokens: cfg.max_tokens,
        seed: batch_seed,
        kind: cfg.model.model_kind,
    };
    let mut stream = BatchStream::new(Arc::new(data.train), plan, worker_count());

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let metrics_path = dir.join("metrics.tsv");
    write_file(&metrics_path, &metrics)?;

    let total = cfg.pretrain_steps + cfg.finetune_steps;
    let interval = cfg.valid_interval.max(1);
    let mut acc = Accumulator::default();
    let mut trace = Vec::new();
    let mut snaps: Vec<Snapshot> = Vec::new();
    let mut best: Option<(f64, u64)> = None;
    for step in 0..total {
        let finetune = step >= cfg.pretrain_steps;
        if finetune && step == cfg.pretrain_steps && cfg.reset_optim {
            trainer.adam.reset();
        }
        let batch = stream.next_batch().map_err(|e| anyhow!(e))?;
        let result = if finetune {
            trainer.finetune_step(&batch)
        } else {
            trainer.pretrain_step(&batch)
        };
        let stats = result.map_err(|e| {
            let (epoch, index) = stream.position();
            anyhow!(
                "{e} (epoch {epoch}, batch {index}, {} sentences starting at corpus line {})",
                batch.size(),
                batch.indices.first().map_or(0, |i| i + 1)
            )
        })?;
        acc.add(&stats);

        let done = step + 1;
        if done % interval == 0 || done == total {
            let bleu = evaluate(&trainer.model, &data.valid, settings)?.bleu;
            let row = acc.row(done, if finetune { "finetune" } else { "pretrain" }, bleu);
            writeln!(metrics, "{row}").expect("writing to a String");
            write_file(&metrics_path, &metrics)?;
            acc = Accumulator::default();
            trace.push((done, bleu));
            // Checkpoints are selected among fine-tuning validations; a run
            // without fine-tuning selects among pre-training ones.
            let selectable = finetune || cfg.finetune_steps == 0;
            if selectable && best.is_none_or(|(b, _)| bleu > b) {
                best = Some((bleu, done));
                Checkpoint::of_trainer(&trainer, &data.vocab).save(&dir.join("best.ckpt"))?;
            }
            if selectable && cfg.avg_best > 1 {
                snaps.push(Snapshot {
                    bleu,
                    step: done,
                    weights: weights(&trainer.model),
                });
                snaps.sort_by(|a, b| b.bleu.total_cmp(&a.bleu).then(a.step.cmp(&b.step)));
                snaps.truncate(cfg.avg_best);
            }
        }
    }
    Checkpoint::of_trainer(&trainer, &data.vocab).save(&dir.join("last.ckpt"))?;

    let final_model = if cfg.avg_best > 1 && !snaps.is_empty() {
        let m = average(&trainer.model, &snaps);
        Checkpoint::of_model(&m, cfg.adam, &data.vocab).save(&dir.join("avg.ckpt"))?;
        m
    } else if best.is_some() {
        Checkpoint::load(&dir.join("best.ckpt"))?.build_model()?
    } else {
        trainer.model.clone()
    };
    let report = match &data.test {
        Some(test) => {
            let r = report(&final_model, test, settings, &cfg.eval_iterations)?;
            write_file(&dir.join("report.txt"), &r.to_text())?;
            write_file(&dir.join("report.json"), &(r.to_json() + "\n"))?;
            Some(r)
        }
        None => None,
    };
    let (best_bleu, best_step) = best.unwrap_or((0.0, 0));
    Ok(RunOutcome {
        dir,
        valid_trace: trace,
        best_step,
        best_bleu,
        final_model,
        vocab: data.vocab,
        report,
    })
}
