mod common;

use std::collections::BTreeMap;

use voxc_core::audio::{load_manifest, synth_corpus, SynthSpec, UtteranceRecord};
use voxc_core::train::{
    adam_step, finetune_run, metrics_csv, pretrain_run, Adam, AdamConfig, Checkpoint,
    TriStateSchedule,
};
use voxc_grad::{ParamStore, Tensor};

use common::tiny_config;

fn corpus(dir: &std::path::Path) -> Vec<UtteranceRecord> {
    let spec = SynthSpec {
        n_speakers: 2,
        utterances_per_speaker: 2,
        ..Default::default()
    };
    load_manifest(synth_corpus(&spec, dir).unwrap()).unwrap()
}

#[test]
fn adam_converges_on_a_quadratic() {
    let mut params = ParamStore::new();
    params.insert("theta", Tensor::vector(vec![0.0]).unwrap());
    let mut adam = Adam::new(AdamConfig::default());
    let mut prev = 3.0f64;
    for step in 0..2000 {
        let theta = params.get("theta").unwrap().data()[0];
        let grads = BTreeMap::from([("theta".to_string(), Tensor::vector(vec![2.0 * (theta - 3.0)]).unwrap())]);
        adam_step(&mut adam, &mut params, &grads, 0.01).unwrap();
        let dist = (params.get("theta").unwrap().data()[0] - 3.0).abs();
        if dist < 0.01 {
            return;
        }
        assert!(dist <= prev + 1e-12, "step {step}: moved away");
        prev = dist;
    }
    panic!("did not reach the minimizer");
}

#[test]
fn schedule_is_continuous_at_breakpoints() {
    let s = TriStateSchedule::new(1000, 1.0).unwrap();
    // Across each breakpoint the step-to-step change never exceeds the
    // slope of the neighbouring linear phase.
    let warm_slope = 1.0 / 100.0;
    let decay_slope = 1.0 / 500.0;
    let d = |a: usize, b: usize| (s.lr_at(a).unwrap() - s.lr_at(b).unwrap()).abs();
    assert!(d(99, 100) <= warm_slope + 1e-12 && d(100, 101) == 0.0);
    assert!(d(499, 500) == 0.0 && d(500, 501) <= decay_slope + 1e-12);
    assert_eq!(s.lr_at(100).unwrap(), 1.0);
    assert_eq!(s.lr_at(500).unwrap(), 1.0);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = corpus(dir.path());
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 3;
    cfg.pretrain.batch_size = 2;
    cfg.finetune.steps = 3;
    cfg.finetune.batch_size = 2;
    cfg.finetune.freeze_encoder = false;

    let (a, ma) = pretrain_run(&cfg, &records, 5).unwrap();
    let (b, mb) = pretrain_run(&cfg, &records, 5).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(metrics_csv(&ma), metrics_csv(&mb));
    assert!(ma.iter().all(|r| r.loss.is_finite()));
    let (c, _) = pretrain_run(&cfg, &records, 6).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());

    let path = dir.path().join("pre.ckpt");
    a.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), a.to_bytes());
    assert_eq!(back.fingerprint(), a.fingerprint());

    let (fa, fma) = finetune_run(&cfg, &a, &records, 5).unwrap();
    let (fb, fmb) = finetune_run(&cfg, &a, &records, 5).unwrap();
    assert_eq!(fa.to_bytes(), fb.to_bytes());
    assert_eq!(metrics_csv(&fma), metrics_csv(&fmb));
    assert!(fma.iter().all(|r| r.loss.is_finite()));
    assert_eq!((fa.pretrain_steps, fa.finetune_steps), (3, 3));
    assert!(fa.vocab.is_some());
}

#[test]
fn finetune_rejects_a_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let records = corpus(dir.path());
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 0;
    let (ck, _) = pretrain_run(&cfg, &records, 1).unwrap();
    cfg.model.context.ffn_dim = 24;
    let err = finetune_run(&cfg, &ck, &records, 1).unwrap_err().to_string();
    assert!(err.contains("context.ffn_dim"), "{err}");
}
