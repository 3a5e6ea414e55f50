use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{rmsprop_step, CurriculumPhase, Objective, OptimizerConfig};
use crate::collapse::CollapseMode;
use crate::ctc::{best_path_decode, LabelSeq};
use crate::data::{line_crops, normalize, Alphabet, LineJoin, ParagraphSample};
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::layers::ImagePlane;
use crate::model::Model;

/// Where training stands: the next phase and epoch within it to run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    pub phase: usize,
    pub epoch: usize,
}

/// A normalized image with its encoded targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: ImagePlane,
    pub target: LabelSeq,
    pub lines: Vec<LabelSeq>,
    pub reference: String,
}

pub fn build_samples(
    samples: &[ParagraphSample],
    alphabet: &Alphabet,
    join: LineJoin,
    source: &Path,
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            let reference = s.transcript(join);
            Ok(TrainSample {
                image: normalize(&s.image),
                target: alphabet.encode(&reference, source)?,
                lines: s.lines.iter().map(|l| alphabet.encode(&l.text, source)).collect::<Result<_>>()?,
                reference,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// Counts epochs across all phases, from 1.
    pub epoch: usize,
    pub phase: String,
    pub mean_loss: f64,
    /// From the decodes made during the epoch, before each batch update.
    pub train_cer: f64,
    pub val_cer: Option<f64>,
    pub skipped: usize,
    pub seconds: f64,
}

impl EpochSummary {
    /// `epoch  phase  mean-loss  train-CER  val-CER  wall-seconds`
    pub fn log_line(&self) -> String {
        let val = self.val_cer.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        format!(
            "{}\t{}\t{:.9}\t{:.4}\t{}\t{:.3}",
            self.epoch, self.phase, self.mean_loss, self.train_cer, val, self.seconds
        )
    }
}

/// Tab-separated training log with `#` comment lines for events.
pub struct LogWriter<'a> {
    out: Box<dyn Write + 'a>,
}

impl<'a> LogWriter<'a> {
    pub const HEADER: &'static str = "epoch\tphase\tmean_loss\ttrain_cer\tval_cer\tseconds";

    pub fn new(out: impl Write + 'a, header: bool) -> std::io::Result<Self> {
        let mut w = LogWriter { out: Box::new(out) };
        if header {
            writeln!(w.out, "{}", Self::HEADER)?;
        }
        Ok(w)
    }

    pub fn sink() -> Self {
        LogWriter { out: Box::new(std::io::sink()) }
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("training log", e))
    }
}

fn shuffle_seed(seed: u64, phase: usize, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((phase as u64) << 32 | epoch as u64)
}

pub struct EpochStats {
    pub mean_loss: f64,
    pub train_cer: f64,
    pub skipped: usize,
}

/// One pass over `data` in an order drawn from `seed`, with an RMSProp step
/// on the mean gradient of each mini-batch. Samples whose target cannot fit
/// the frame count are skipped.
pub fn train_epoch(
    model: &mut Model,
    data: &[TrainSample],
    cfg: &OptimizerConfig,
    objective: Objective,
    seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut loss_sum, mut trained, mut skipped, mut edits, mut chars) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let mut acc = model.params().zero_grads();
        let mut count = 0usize;
        for &i in batch {
            let s = &data[i];
            match model.loss_and_grad(&s.image, &s.target, &s.lines, objective) {
                Ok((loss, logits, gs)) => {
                    acc.add_assign(&gs);
                    loss_sum += loss;
                    count += 1;
                    edits += edit_distance(best_path_decode(&logits).labels(), s.target.labels());
                    chars += s.target.len();
                }
                Err(Error::Infeasible { .. } | Error::Pairing { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if count == 0 {
            continue;
        }
        acc.scale(1.0 / count as f64);
        let params = model.params_mut();
        params.accumulate(&acc);
        for p in params.iter_mut() {
            rmsprop_step(p, cfg)?;
        }
        trained += count;
    }
    let train_cer = if chars == 0 { 0.0 } else { 100.0 * edits as f64 / chars as f64 };
    Ok(EpochStats {
        mean_loss: if trained == 0 { f64::NAN } else { loss_sum / trained as f64 },
        train_cer,
        skipped,
    })
}

fn validation_cer(model: &Model, data: &[TrainSample]) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let (mut edits, mut chars) = (0, 0);
    for s in data {
        let (logits, _) = model.forward(&s.image)?;
        edits += edit_distance(best_path_decode(&logits).labels(), s.target.labels());
        chars += s.target.len();
    }
    Ok(Some(if chars == 0 { 0.0 } else { 100.0 * edits as f64 / chars as f64 }))
}

/// Training and validation samples of one phase.
#[derive(Debug, Clone, Default)]
pub struct PhaseData {
    pub train: Vec<TrainSample>,
    pub validation: Vec<TrainSample>,
}

impl PhaseData {
    /// Crops paragraphs to the phase's line budget (see [`line_crops`]) and
    /// keeps the first `validation_slice` validation samples.
    #[allow(clippy::too_many_arguments)]
    pub fn for_phase(
        phase: &CurriculumPhase,
        train: &[ParagraphSample],
        validation: &[ParagraphSample],
        alphabet: &Alphabet,
        join: LineJoin,
        margin: usize,
        validation_slice: usize,
        source: &Path,
    ) -> Result<Self> {
        let crop = |samples: &[ParagraphSample]| -> Result<Vec<ParagraphSample>> {
            match phase.max_lines {
                Some(n) => Ok(samples
                    .iter()
                    .map(|s| line_crops(s, n, margin))
                    .collect::<Result<Vec<_>>>()?
                    .concat()),
                None => Ok(samples.to_vec()),
            }
        };
        let mut val = crop(validation)?;
        val.truncate(validation_slice);
        Ok(PhaseData {
            train: build_samples(&crop(train)?, alphabet, join, source)?,
            validation: build_samples(&val, alphabet, join, source)?,
        })
    }

    pub fn max_lines(&self) -> usize {
        self.train.iter().map(|s| s.lines.len()).max().unwrap_or(1)
    }
}

pub struct CurriculumRun<'a> {
    pub phases: &'a [CurriculumPhase],
    pub data: &'a [PhaseData],
    pub optimizer: &'a OptimizerConfig,
    pub seed: u64,
    pub start: Progress,
    /// Attention steps for whole-paragraph phases that leave `steps` unset.
    pub paragraph_steps: Option<usize>,
    /// Receives a checkpoint after every phase and `model.ckpt` at the end.
    pub checkpoint_dir: Option<&'a Path>,
}

impl CurriculumRun<'_> {
    fn steps(&self, p: usize) -> usize {
        let phase = &self.phases[p];
        phase
            .steps
            .or(if phase.max_lines.is_none() { self.paragraph_steps } else { None })
            .unwrap_or_else(|| self.data[p].max_lines())
    }
}

/// Trains phase after phase. Parameters carry over between phases; the
/// attention network is redrawn when the first attention phase starts.
pub fn run_curriculum(model: &mut Model, run: &CurriculumRun, log: &mut LogWriter) -> Result<Vec<EpochSummary>> {
    if run.data.len() != run.phases.len() {
        return Err(Error::Config(format!("{} phases but data for {}", run.phases.len(), run.data.len())));
    }
    run.optimizer.validate()?;
    let first_attention = run.phases.iter().position(|p| p.collapse == CollapseMode::Attention);
    let mut summaries = Vec::new();
    for p in run.start.phase..run.phases.len() {
        let phase = &run.phases[p];
        phase.validate()?;
        let first_epoch = if p == run.start.phase { run.start.epoch } else { 0 };
        if first_epoch == 0 {
            if p == 0 && phase.collapse == CollapseMode::Attention {
                log.line(&format!("# cold start: phase {} uses attention without standard-collapse pretraining", phase.name))?;
            }
            let before = model.shared_checksum();
            if Some(p) == first_attention {
                model.reinit_attention()?;
            }
            let after = model.shared_checksum();
            if before != after {
                return Err(Error::Config(format!("phase {} changed shared parameters at handoff", phase.name)));
            }
            log.line(&format!("# phase {} collapse={:?} steps={} shared={after}", phase.name, phase.collapse, run.steps(p)))?;
        }
        model.set_collapse(phase.collapse, run.steps(p));
        let data = &run.data[p];
        let global_base: usize = run.phases[..p].iter().map(|q| q.epochs).sum();
        for epoch in first_epoch..phase.epochs {
            let started = Instant::now();
            let stats = train_epoch(model, &data.train, run.optimizer, phase.objective, shuffle_seed(run.seed, p, epoch))?;
            let summary = EpochSummary {
                epoch: global_base + epoch + 1,
                phase: phase.name.clone(),
                mean_loss: stats.mean_loss,
                train_cer: stats.train_cer,
                val_cer: validation_cer(model, &data.validation)?,
                skipped: stats.skipped,
                seconds: started.elapsed().as_secs_f64(),
            };
            log.line(&summary.log_line())?;
            if stats.skipped > 0 {
                log.line(&format!("# skipped {} infeasible samples", stats.skipped))?;
            }
            summaries.push(summary);
        }
        if let Some(dir) = run.checkpoint_dir {
            model.save(&dir.join(format!("phase{}-{}.ckpt", p + 1, phase.name)), Progress { phase: p + 1, epoch: 0 })?;
        }
    }
    if let Some(dir) = run.checkpoint_dir {
        model.save(&dir.join("model.ckpt"), Progress { phase: run.phases.len(), epoch: 0 })?;
    }
    Ok(summaries)
}
