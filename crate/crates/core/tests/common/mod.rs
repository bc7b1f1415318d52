//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxc_core::audio::Waveform;
use voxc_core::config::Config;
use voxc_core::model::{
    apply_mask, contextualize, encode, ConvLayer, EncoderConfig, MaskPlan, Model,
};
use voxc_core::objective::pretrain_loss;
use voxc_grad::check::{central_difference, relative_error};
use voxc_grad::{Graph, Tensor};

/// A model small enough for finite-difference checks.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.encoder = EncoderConfig {
        layers: [(10, 5), (3, 2), (3, 2)]
            .into_iter()
            .map(|(kernel, stride)| ConvLayer {
                out_channels: 8,
                kernel,
                stride,
            })
            .collect(),
    };
    cfg.model.quantizer.groups = 2;
    cfg.model.quantizer.entries = 4;
    cfg.model.quantizer.dim = 8;
    cfg.model.context.d_model = 8;
    cfg.model.context.n_layers = 1;
    cfg.model.context.n_heads = 2;
    cfg.model.context.ffn_dim = 16;
    cfg.model.context.pos_conv_kernel = 3;
    cfg.model.context.pos_conv_groups = 2;
    cfg.model.mask.p = 0.1;
    cfg.model.mask.span = 3;
    cfg.objective.contrastive.distractors = 3;
    cfg
}

pub fn random_wave(rng: &mut impl Rng, n: usize) -> Waveform {
    Waveform::new((0..n).map(|_| rng.gen_range(-0.9..0.9)).collect(), 16_000).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Word-level edit distance by the textbook full-table DP.
pub fn edit_distance(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

/// Rate with the `max(1, words)` denominator.
pub fn wer_oracle(reference: &str, hypothesis: &str) -> f64 {
    let n = reference.split_whitespace().count().max(1);
    edit_distance(reference, hypothesis) as f64 / n as f64
}

fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &l in path {
        if l != prev && l != 0 {
            out.push(l);
        }
        prev = l;
    }
    out
}

/// Probability of every labelling reachable in `probs.len()` frames,
/// summed over all paths (blank is label 0).
pub fn labelling_probs(probs: &[Vec<f64>]) -> BTreeMap<Vec<usize>, f64> {
    let t = probs.len();
    let n = probs.first().map_or(1, |r| r.len());
    let mut out = BTreeMap::new();
    let total = n.pow(t as u32);
    for code in 0..total {
        let mut c = code;
        let mut path = Vec::with_capacity(t);
        let mut p = 1.0;
        for row in probs {
            let l = c % n;
            c /= n;
            path.push(l);
            p *= row[l];
        }
        *out.entry(collapse_path(&path)).or_insert(0.0) += p;
    }
    out
}

/// Most probable labelling; ties go to the lexicographically smaller text.
pub fn best_labelling(probs: &[Vec<f64>], chars: &[char]) -> (String, f64) {
    let mut best: Option<(String, f64)> = None;
    for (labels, p) in labelling_probs(probs) {
        let text: String = labels.iter().map(|&l| chars[l - 1]).collect();
        let better = match &best {
            None => true,
            Some((bt, bp)) => p > *bp || (p == *bp && text < *bt),
        };
        if better {
            best = Some((text, p));
        }
    }
    best.unwrap_or_default()
}

/// Mean masked fraction over `trials` masks drawn by partial Fisher-Yates.
pub fn masked_fraction_oracle(frames: usize, p: f64, span: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let n_starts = ((p * frames as f64).round() as usize).max(1).min(frames);
    let mut idx: Vec<usize> = (0..frames).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        let (starts, _) = idx.partial_shuffle(&mut rng, n_starts);
        let mut masked = vec![false; frames];
        for &s in starts.iter() {
            for m in masked.iter_mut().skip(s).take(span) {
                *m = true;
            }
        }
        total += masked.iter().filter(|&&m| m).count() as f64 / frames as f64;
    }
    total / trials as f64
}

/// Masked set computed directly from the span rule.
pub fn span_union(frames: usize, starts: &[usize], span: usize) -> BTreeSet<usize> {
    starts
        .iter()
        .flat_map(|&s| s..(s + span).min(frames))
        .collect()
}

/// Picks `count` distinct random `(parameter, flat index)` coordinates.
fn pick_coordinates(model: &Model, rng: &mut impl Rng, count: usize, skip: &[&str]) -> Vec<(String, usize)> {
    let names: Vec<&String> = model
        .params
        .names()
        .filter(|n| !skip.iter().any(|s| n.starts_with(s)))
        .collect();
    let mut picked: Vec<(String, usize)> = Vec::with_capacity(count);
    while picked.len() < count {
        let name = names[rng.gen_range(0..names.len())];
        let len = model.params.get(name).unwrap().len();
        let coord = (name.clone(), rng.gen_range(0..len));
        if !picked.contains(&coord) {
            picked.push(coord);
        }
    }
    picked
}

fn with_values(model: &Model, coords: &[(String, usize)], x: &[f64]) -> Model {
    let mut m = model.clone();
    for ((name, i), v) in coords.iter().zip(x) {
        m.params.get_mut(name).unwrap().data_mut()[*i] = *v;
    }
    m
}

fn fd_check<L, G>(model: &Model, coords: &[(String, usize)], loss: L, grad: G) -> f64
where
    L: Fn(&Model) -> f64,
    G: Fn(&Model) -> BTreeMap<String, Tensor>,
{
    let x0: Vec<f64> = coords
        .iter()
        .map(|(n, i)| model.params.get(n).unwrap().data()[*i])
        .collect();
    let grads = grad(model);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(n, i)| grads.get(n).map_or(0.0, |t| t.data()[*i]))
        .collect();
    let numeric = central_difference(|x| loss(&with_values(model, coords, x)), &x0, 1e-5);
    relative_error(&analytic, &numeric)
}

/// Finite-difference check of waveform -> encode -> mask -> contextualize
/// -> weighted sum, on 5 random parameters.
pub fn end_to_end_fd(seed: u64) -> f64 {
    let cfg = tiny_config();
    let model = Model::new(cfg.model.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = random_wave(&mut rng, 800);
    let coords = pick_coordinates(&model, &mut rng, 5, &["quantizer.", "final_proj."]);
    let frames = voxc_core::model::frame_count(&cfg.model.encoder, wave.len()).unwrap();
    let plan = MaskPlan::from_starts(frames, &[1, frames / 2], cfg.model.mask.span).unwrap();
    let weights = random_matrix(&mut rng, frames, cfg.model.context.d_model);

    let forward = |m: &Model, g: &mut Graph, b: &mut voxc_grad::ParamBinder| {
        let z = encode(&m.config.encoder, g, b, wave.samples()).unwrap();
        let e = b.get(g, "mask_embedding").unwrap();
        let zm = apply_mask(g, z, &plan, e).unwrap();
        let c = contextualize(&m.config.context, g, b, zm).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(c, w).unwrap();
        g.sum_all(prod).unwrap()
    };
    fd_check(
        &model,
        &coords,
        |m| {
            let mut g = Graph::new();
            let mut b = m.frozen_binder();
            let y = forward(m, &mut g, &mut b);
            g.value(y).unwrap().data()[0]
        },
        |m| {
            let mut g = Graph::new();
            let mut b = m.binder();
            let y = forward(m, &mut g, &mut b);
            let grads = g.backward(y).unwrap();
            b.collect(&g, &grads).unwrap()
        },
    )
}

/// Finite-difference check of the pretraining loss (soft quantization,
/// masks, noise and distractors frozen by reseeding) on 5 random parameters.
pub fn pretrain_loss_fd(seed: u64) -> f64 {
    let cfg = tiny_config();
    let model = Model::new(cfg.model.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = vec![random_wave(&mut rng, 800), random_wave(&mut rng, 1000)];
    let coords = pick_coordinates(&model, &mut rng, 5, &[]);
    let noise_seed = rng.gen::<u64>();
    let tau = 1.5;

    let run = |m: &Model, trainable: bool| {
        let mut g = Graph::new();
        let mut b = if trainable { m.binder() } else { m.frozen_binder() };
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        let out = pretrain_loss(m, &mut g, &mut b, &batch, &cfg.objective, tau, false, &mut r).unwrap();
        let loss = g.value(out.loss).unwrap().data()[0];
        let grads = if trainable {
            let gr = g.backward(out.loss).unwrap();
            b.collect(&g, &gr).unwrap()
        } else {
            BTreeMap::new()
        };
        (loss, grads)
    };
    fd_check(&model, &coords, |m| run(m, false).0, |m| run(m, true).1)
}
