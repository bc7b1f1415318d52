use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxc_grad::Graph;

use super::{batch_ids, draw_batch, load_waves, step_error, Adam, Checkpoint, MetricsRow, TriStateSchedule};
use crate::audio::{UtteranceRecord, Waveform};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{frame_count, Model};
use crate::objective::pretrain_loss;

/// Self-supervised pretraining from a fresh model initialized with `seed`.
///
/// Each step draws a batch, computes the masked contrastive plus diversity
/// loss with hard straight-through quantization at the current temperature,
/// and applies one Adam update at the scheduled learning rate.
pub fn pretrain_run(
    cfg: &Config,
    records: &[UtteranceRecord],
    seed: u64,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty manifest".into()));
    }
    let waves = load_waves(records)?;
    for (r, w) in records.iter().zip(&waves) {
        let frames = frame_count(&cfg.model.encoder, w.len()).map_err(|e| e.for_utterance(&r.id))?;
        if frames < 2 {
            return Err(Error::Objective(format!(
                "{frames} frame(s) cannot hold two masked steps"
            ))
            .for_utterance(&r.id));
        }
    }

    let mut model = Model::new(cfg.model.clone(), seed)?;
    let pc = &cfg.pretrain;
    let mut metrics = Vec::with_capacity(pc.steps);
    if pc.steps > 0 {
        let sched = TriStateSchedule::new(pc.steps, pc.peak_lr)?;
        let mut adam = Adam::new(pc.adam.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for step in 0..pc.steps {
            let idx = draw_batch(&mut rng, waves.len(), pc.batch_size);
            let batch: Vec<Waveform> = idx.iter().map(|&i| waves[i].clone()).collect();
            let lr = sched.lr_at(step)?;
            let tau = cfg.model.quantizer.tau_at(step);
            let row = train_step(&mut model, &mut adam, cfg, &batch, tau, lr, &mut rng)
                .map_err(|e| step_error(e, step, || batch_ids(records, &idx)))?;
            if !row.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    utterances: batch_ids(records, &idx),
                });
            }
            if step % 50 == 0 || step + 1 == pc.steps {
                log::info!(
                    "pretrain step {step}: loss {:.4} lr {:.2e} perplexity {:.2}",
                    row.loss,
                    lr,
                    row.perplexity.unwrap_or(0.0)
                );
            }
            metrics.push(MetricsRow { step, lr, ..row });
        }
    }
    let mut ck = Checkpoint::new(model, cfg.clone(), seed);
    ck.pretrain_steps = pc.steps;
    Ok((ck, metrics))
}

fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &Config,
    batch: &[Waveform],
    tau: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MetricsRow> {
    let mut g = Graph::new();
    let (out, grads) = {
        let mut b = model.binder();
        let out = pretrain_loss(model, &mut g, &mut b, batch, &cfg.objective, tau, true, rng)?;
        let grads = g.backward(out.loss)?;
        (out, b.collect(&g, &grads)?)
    };
    let loss = g.value(out.loss)?.data()[0];
    if !loss.is_finite() {
        return Ok(MetricsRow {
            step: 0,
            lr,
            loss,
            contrastive: None,
            diversity: None,
            perplexity: None,
        });
    }
    adam.step(&mut model.params, &grads, |_| lr)?;
    let perplexity = out.perplexity.iter().sum::<f64>() / out.perplexity.len() as f64;
    Ok(MetricsRow {
        step: 0,
        lr,
        loss,
        contrastive: Some(out.contrastive),
        diversity: Some(out.diversity),
        perplexity: Some(perplexity),
    })
}
