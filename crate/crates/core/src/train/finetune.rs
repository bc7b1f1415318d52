use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxc_grad::{Graph, Tensor};

use super::{batch_ids, draw_batch, load_waves, step_error, Adam, Checkpoint, MetricsRow, TriStateSchedule};
use crate::audio::{UtteranceRecord, Waveform};
use crate::config::{first_difference, Config};
use crate::ctc::{ctc_greedy, ctc_loss_node};
use crate::error::{Error, Result};
use crate::model::{Model, CTC_HEAD_BIAS, CTC_HEAD_WEIGHT};
use crate::vocab::CharVocab;

/// Supervised CTC fine-tuning on transcribed records.
///
/// Adds a randomly initialized character head (unless the checkpoint
/// already has one for the same vocabulary) and trains without masking.
/// Utterances whose transcript cannot be aligned to their frames are
/// skipped with a warning.
pub fn finetune_run(
    cfg: &Config,
    pretrained: &Checkpoint,
    records: &[UtteranceRecord],
    seed: u64,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    cfg.validate()?;
    if let Some(field) = first_difference(&pretrained.model.config, &cfg.model) {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: model.{field} differs from the config"
        )));
    }
    if records.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty manifest".into()));
    }
    let vocab = cfg.char_vocab()?;
    let mut model = pretrained.model.clone();
    match (&pretrained.vocab, model.has_ctc_head()) {
        (Some(v), true) if *v != vocab => {
            return Err(Error::Checkpoint(
                "checkpoint head was trained for a different vocabulary".into(),
            ))
        }
        (_, true) => {}
        (_, false) => model.add_ctc_head(vocab.n_labels(), seed ^ 0x5eed),
    }

    let targets: Vec<Vec<usize>> = records
        .iter()
        .map(|r| {
            vocab
                .encode(&r.transcript)
                .map_err(|e| Error::from(e).for_utterance(&r.id))
        })
        .collect::<Result<_>>()?;
    let waves = load_waves(records)?;

    let fc = &cfg.finetune;
    let cached: Option<Vec<Tensor>> = if fc.freeze_encoder {
        Some(
            records
                .iter()
                .zip(&waves)
                .map(|(r, w)| encoder_output(&model, w).map_err(|e| e.for_utterance(&r.id)))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(fc.steps);
    if fc.steps > 0 {
        let sched = TriStateSchedule::new(fc.steps, 1.0)?;
        let mut adam = Adam::new(fc.adam.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for step in 0..fc.steps {
            let idx = draw_batch(&mut rng, records.len(), fc.batch_size);
            let scale = sched.lr_at(step)?;
            let loss = ctc_step(&mut model, &mut adam, fc, &idx, &waves, cached.as_deref(), &targets, records, scale)
                .map_err(|e| step_error(e, step, || batch_ids(records, &idx)))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    utterances: batch_ids(records, &idx),
                });
            }
            if step % 100 == 0 || step + 1 == fc.steps {
                log::info!("finetune step {step}: ctc {loss:.4}");
            }
            metrics.push(MetricsRow {
                step,
                lr: scale * fc.head_lr,
                loss,
                contrastive: None,
                diversity: None,
                perplexity: None,
            });
        }
    }
    let mut ck = Checkpoint::new(model, cfg.clone(), seed);
    ck.vocab = Some(vocab);
    ck.pretrain_steps = pretrained.pretrain_steps;
    ck.finetune_steps = pretrained.finetune_steps + fc.steps;
    Ok((ck, metrics))
}

fn encoder_output(model: &Model, w: &Waveform) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = model.frozen_binder();
    let z = model.encode_wave(&mut g, &mut b, w)?;
    Ok(g.value(z)?.clone())
}

#[allow(clippy::too_many_arguments)]
fn ctc_step(
    model: &mut Model,
    adam: &mut Adam,
    fc: &super::FinetuneConfig,
    idx: &[usize],
    waves: &[Waveform],
    cached: Option<&[Tensor]>,
    targets: &[Vec<usize>],
    records: &[UtteranceRecord],
    scale: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let (grads, loss) = {
        let mut b = model
            .binder()
            .freeze_prefix("quantizer.")
            .freeze_prefix("final_proj.")
            .freeze_prefix("mask_embedding");
        if fc.freeze_encoder {
            b = b.freeze_prefix("encoder.");
        }
        let mut losses = Vec::with_capacity(idx.len());
        for &i in idx {
            let z = match cached {
                Some(zs) => g.constant(zs[i].clone()),
                None => model.encode_wave(&mut g, &mut b, &waves[i])?,
            };
            let lp = model.ctc_head(&mut g, &mut b, z)?;
            match ctc_loss_node(&mut g, lp, &targets[i]) {
                Ok(l) => losses.push(l),
                Err(Error::Objective(msg)) => {
                    log::warn!("skipping utterance {}: {msg}", records[i].id);
                }
                Err(e) => return Err(e),
            }
        }
        if losses.is_empty() {
            return Err(Error::Objective(
                "no utterance in the batch has an alignable transcript".into(),
            ));
        }
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = g.add(sum, l)?;
        }
        let mean = g.scale(sum, 1.0 / losses.len() as f64)?;
        let loss = g.value(mean)?.data()[0];
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = g.backward(mean)?;
        (b.collect(&g, &grads)?, loss)
    };
    adam.step(&mut model.params, &grads, |name| {
        if name == CTC_HEAD_WEIGHT || name == CTC_HEAD_BIAS {
            scale * fc.head_lr
        } else {
            scale * fc.body_lr
        }
    })?;
    Ok(loss)
}

/// Best-path transcript of a waveform under a fine-tuned model.
pub fn transcribe_greedy(model: &Model, vocab: &CharVocab, w: &Waveform) -> Result<String> {
    Ok(ctc_greedy(&model.ctc_log_probs(w)?, vocab))
}
