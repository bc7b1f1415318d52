mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxc_core::model::{
    apply_mask, contextualize, encode, frame_count, quantize, sample_mask, utterance_embedding,
    MaskPlan, Model,
};
use voxc_grad::check::{central_difference, relative_error};
use voxc_grad::{Graph, Tensor};

use common::{random_matrix, span_union, tiny_config};

#[test]
fn frame_count_matches_encoder_output() {
    let cfg = tiny_config();
    let model = Model::new(cfg.model.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(40..3000);
        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let mut b = model.frozen_binder();
        let z = encode(&cfg.model.encoder, &mut g, &mut b, &samples).unwrap();
        assert_eq!(g.shape(z).unwrap()[0], frame_count(&cfg.model.encoder, n).unwrap(), "n={n}");
    }
}

#[test]
fn default_encoder_on_one_second() {
    let cfg = voxc_core::config::Config::default();
    assert_eq!(frame_count(&cfg.model.encoder, 16_000).unwrap(), 199);
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let samples: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.01).sin()).collect();
    let run = || {
        let mut g = Graph::new();
        let mut b = model.frozen_binder();
        let z = encode(&cfg.model.encoder, &mut g, &mut b, &samples).unwrap();
        g.value(z).unwrap().clone()
    };
    let z = run();
    assert_eq!(z.shape(), &[199, 64]);
    assert_eq!(z, run());
    let mut g = Graph::new();
    let mut b = model.frozen_binder();
    assert!(encode(&cfg.model.encoder, &mut g, &mut b, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantizer_probabilities_are_distributions(seed in any::<u64>(), tau in 0.1f64..3.0, hard in any::<bool>()) {
        let cfg = tiny_config().model;
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_matrix(&mut rng, 7, cfg.encoder.dim());
        let noise = voxc_core::model::gumbel_noise(&mut rng, 7, cfg.quantizer.groups * cfg.quantizer.entries);
        let mut g = Graph::new();
        let mut b = model.frozen_binder();
        let zv = g.constant(z);
        let out = quantize(&cfg.quantizer, &mut g, &mut b, zv, tau, Some(&noise), hard).unwrap();
        let v = cfg.quantizer.entries;
        for row in g.value(out.probs).unwrap().data().chunks(v) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for &p in &out.perplexity {
            prop_assert!((1.0 - 1e-9..=v as f64 + 1e-9).contains(&p));
        }
        prop_assert_eq!(g.shape(out.q).unwrap(), &[7, cfg.quantizer.dim]);
    }

    #[test]
    fn apply_mask_touches_only_masked_rows(seed in any::<u64>(), frames in 1usize..30, n in 0usize..6, span in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts: Vec<usize> = (0..n.min(frames)).map(|_| rng.gen_range(0..frames)).collect();
        let plan = MaskPlan::from_starts(frames, &starts, span).unwrap();
        prop_assert_eq!(plan.masked(), &span_union(frames, &starts, span));
        let z = random_matrix(&mut rng, frames, 4);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let e = g.constant(Tensor::vector(vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let out = apply_mask(&mut g, zv, &plan, e).unwrap();
        let out = g.value(out).unwrap();
        let mut changed = 0;
        for t in 0..frames {
            if plan.is_masked(t) {
                prop_assert_eq!(out.row(t), &[9.0, 8.0, 7.0, 6.0]);
                changed += 1;
            } else {
                prop_assert_eq!(out.row(t), z.row(t));
            }
        }
        prop_assert_eq!(changed, plan.masked().len());
    }

    #[test]
    fn embeddings_have_unit_norm(seed in any::<u64>(), rows in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = utterance_embedding(&random_matrix(&mut rng, rows, 6)).unwrap();
        if !e.degenerate {
            let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn span_rules() {
    let cases: [(usize, &[usize], usize, &[usize]); 3] = [
        (10, &[4], 3, &[4, 5, 6]),
        (10, &[2, 3], 2, &[2, 3, 4]),
        (10, &[8], 3, &[8, 9]),
    ];
    for (frames, starts, span, want) in cases {
        let plan = MaskPlan::from_starts(frames, starts, span).unwrap();
        assert_eq!(plan.masked().iter().copied().collect::<Vec<_>>(), want);
    }
}

#[test]
fn masked_fraction_matches_monte_carlo_oracle() {
    let mut cfg = tiny_config().model.mask;
    cfg.p = 0.065;
    cfg.span = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    let mean = (0..trials)
        .map(|_| sample_mask(500, &cfg, &mut rng).masked().len() as f64 / 500.0)
        .sum::<f64>()
        / trials as f64;
    let oracle = common::masked_fraction_oracle(500, 0.065, 10, trials, 6);
    assert!((mean - oracle).abs() <= 0.02, "{mean} vs {oracle}");
}

#[test]
fn context_is_permutation_equivariant_without_positional_conv() {
    let mut cfg = tiny_config().model;
    cfg.context.pos_conv_kernel = 0;
    let model = Model::new(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames = 12;
    let z = random_matrix(&mut rng, frames, cfg.encoder.dim());
    let mut perm: Vec<usize> = (0..frames).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

    let run = |x: Tensor| {
        let mut g = Graph::new();
        let mut b = model.frozen_binder();
        let xv = g.constant(x);
        let c = contextualize(&cfg.context, &mut g, &mut b, xv).unwrap();
        g.value(c).unwrap().clone()
    };
    let (c, cp) = (run(z), run(permuted));
    assert_eq!(c.shape(), &[frames, cfg.context.d_model]);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in cp.row(k).iter().zip(c.row(i)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn soft_quantizer_gradient_matches_finite_differences() {
    let cfg = tiny_config().model;
    let model = Model::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = random_matrix(&mut rng, 5, cfg.encoder.dim());
    let w = random_matrix(&mut rng, 5, cfg.quantizer.dim);
    let loss = |zt: Tensor, grad: bool| {
        let mut g = Graph::new();
        let mut b = model.frozen_binder();
        let zv = if grad { g.param(zt) } else { g.constant(zt) };
        let q = quantize(&cfg.quantizer, &mut g, &mut b, zv, 0.7, None, false).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(q.q, wv).unwrap();
        let s = g.sum_all(prod).unwrap();
        let value = g.value(s).unwrap().data()[0];
        let grad = grad.then(|| g.backward(s).unwrap().get(&g, zv).unwrap().into_data());
        (value, grad)
    };
    let analytic = loss(z.clone(), true).1.unwrap();
    let numeric = central_difference(
        |x| loss(Tensor::new(z.shape().to_vec(), x.to_vec()).unwrap(), false).0,
        z.data(),
        1e-5,
    );
    assert!(relative_error(&analytic, &numeric) <= 1e-4);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let err = common::end_to_end_fd(seed);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}
