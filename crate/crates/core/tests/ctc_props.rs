mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxc_core::ctc::{ctc_greedy, ctc_loss, ctc_loss_node, ctc_oracle};
use voxc_core::vocab::CharVocab;
use voxc_grad::check::{central_difference, relative_error};
use voxc_grad::{Graph, Tensor};

fn random_probs(rng: &mut impl Rng, t: usize, n: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn log_tensor(p: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(&p.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn loss_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let t = rng.gen_range(1..=6);
        let chars = rng.gen_range(1..=3);
        let probs = random_probs(&mut rng, t, chars + 1);
        let len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=chars)).collect();
        let oracle = ctc_oracle(&Tensor::from_rows(&probs).unwrap(), &target).unwrap();
        let loss = ctc_loss(&log_tensor(&probs), &target).unwrap();
        if oracle.is_infinite() {
            assert!(loss.is_infinite(), "case {case}");
        } else {
            assert!((loss - oracle).abs() <= 1e-9, "case {case}: {loss} vs {oracle}");
        }
    }
}

#[test]
fn all_targets_carry_total_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let t = rng.gen_range(1..=4);
        let chars = 2;
        let probs = log_tensor(&random_probs(&mut rng, t, chars + 1));
        let mut total = 0.0;
        let mut stack = vec![Vec::<usize>::new()];
        while let Some(target) = stack.pop() {
            total += (-ctc_loss(&probs, &target).unwrap()).exp();
            if target.len() < t {
                for c in 1..=chars {
                    let mut next = target.clone();
                    next.push(c);
                    stack.push(next);
                }
            }
        }
        assert!((total - 1.0).abs() <= 1e-6, "{total}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t = rng.gen_range(4..=7);
        let logits = Tensor::matrix(t, 4, (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let target = vec![1, 2, 2];
        let loss = |x: &Tensor, grad: bool| {
            let mut g = Graph::new();
            let v = if grad { g.param(x.clone()) } else { g.constant(x.clone()) };
            let lp = g.log_softmax_rows(v).unwrap();
            let l = ctc_loss_node(&mut g, lp, &target).unwrap();
            let value = g.value(l).unwrap().data()[0];
            (value, grad.then(|| g.backward(l).unwrap().get(&g, v).unwrap().into_data()))
        };
        let analytic = loss(&logits, true).1.unwrap();
        let numeric = central_difference(
            |x| loss(&Tensor::matrix(t, 4, x.to_vec()).unwrap(), false).0,
            logits.data(),
            1e-5,
        );
        assert!(relative_error(&analytic, &numeric) <= 1e-5);
    }
}

#[test]
fn greedy_output_is_bounded_and_blank_free() {
    let vocab = CharVocab::new("ab".chars()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let t = rng.gen_range(0..10);
        let lp = if t == 0 {
            Tensor::zeros(&[0, 3])
        } else {
            log_tensor(&random_probs(&mut rng, t, 3))
        };
        let text = ctc_greedy(&lp, &vocab);
        assert!(text.chars().count() <= t);
        assert!(text.chars().all(|c| vocab.contains(c)));
    }
}
