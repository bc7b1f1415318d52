//! Central finite differences, used as an independent gradient oracle.

/// Numerical gradient of `f` at `x` by central differences with step
/// `h_scale * (1 + |x_i|)` per coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h_scale: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = h_scale * (1.0 + x[i].abs());
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Outcome of checking one primitive against finite differences.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub relative_error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Differentiable primitives with input shapes, value ranges and a builder.
fn cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Build)> {
    let m34 = || (vec![3, 4], -2.0, 2.0);
    vec![
        ("add", vec![m34(), m34()], |g, v| g.add(v[0], v[1])),
        ("sub", vec![m34(), m34()], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![m34(), m34()], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![m34(), (vec![4], -1.0, 1.0)], |g, v| g.add_row(v[0], v[1])),
        ("scale_rows", vec![m34(), (vec![3], -1.0, 1.0)], |g, v| g.scale_rows(v[0], v[1])),
        ("scale", vec![m34()], |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", vec![m34()], |g, v| g.add_scalar(v[0], 0.3)),
        ("matmul", vec![m34(), (vec![4, 2], -2.0, 2.0)], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![m34()], |g, v| g.transpose(v[0])),
        ("exp", vec![m34()], |g, v| g.exp(v[0])),
        ("log", vec![(vec![3, 4], 0.5, 3.0)], |g, v| g.log(v[0])),
        ("pow", vec![(vec![3, 4], 0.5, 3.0)], |g, v| g.pow(v[0], 1.7)),
        ("pow_int", vec![m34()], |g, v| g.pow(v[0], 3.0)),
        ("sum_axis", vec![(vec![2, 3, 4], -2.0, 2.0)], |g, v| g.sum_axis(v[0], 1)),
        ("mean_axis", vec![m34()], |g, v| g.mean_axis(v[0], 0)),
        ("softmax_rows", vec![m34()], |g, v| g.softmax_rows(v[0])),
        ("log_softmax_rows", vec![m34()], |g, v| g.log_softmax_rows(v[0])),
        ("gather_rows", vec![m34()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        ("gather_per_row", vec![m34()], |g, v| {
            g.gather_per_row(v[0], &[vec![0, 3], vec![1, 1], vec![2, 0]])
        }),
        ("gelu", vec![(vec![3, 4], -4.0, 4.0)], |g, v| g.gelu(v[0])),
        (
            "layer_norm",
            vec![m34(), (vec![4], 0.5, 1.5), (vec![4], -1.0, 1.0)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "conv1d",
            vec![(vec![2, 11], -2.0, 2.0), (vec![3, 2, 3], -1.0, 1.0), (vec![3], -1.0, 1.0)],
            |g, v| g.conv1d(v[0], v[1], v[2], 2),
        ),
        (
            "conv1d_grouped",
            vec![(vec![4, 10], -2.0, 2.0), (vec![4, 2, 3], -1.0, 1.0), (vec![4], -1.0, 1.0)],
            |g, v| g.conv1d_grouped(v[0], v[1], v[2], 1, 2),
        ),
        ("pad_time", vec![(vec![2, 5], -2.0, 2.0)], |g, v| g.pad_time(v[0], 2, 1)),
        ("reshape", vec![m34()], |g, v| g.reshape(v[0], vec![2, 6])),
        ("slice_cols", vec![m34()], |g, v| g.slice_cols(v[0], 1, 2)),
        ("concat_cols", vec![m34(), (vec![3, 2], -2.0, 2.0)], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("replace_rows", vec![m34(), (vec![4], -1.0, 1.0)], |g, v| {
            g.replace_rows(v[0], &[false, true, false], v[1])
        }),
    ]
}

/// Checks every differentiable primitive against central differences for
/// one random draw of inputs. The loss is a random weighted sum of the
/// primitive's output.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, specs, build) in cases() {
        let inputs: Vec<Tensor> = specs
            .iter()
            .map(|(s, lo, hi)| rand_tensor(&mut rng, s, *lo, *hi))
            .collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let weights = rand_tensor(&mut rng, g.shape(y)?, -1.0, 1.0);
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w)?;
        let loss = g.sum_all(prod)?;
        let grads = g.backward(loss)?;

        let mut worst: f64 = 0.0;
        for (k, &v) in vars.iter().enumerate() {
            let analytic = grads.get(&g, v)?;
            let numeric = central_difference(
                |probe| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let t = if j == k {
                                Tensor::new(t.shape().to_vec(), probe.to_vec()).expect("same shape")
                            } else {
                                t.clone()
                            };
                            g.constant(t)
                        })
                        .collect();
                    let y = build(&mut g, &vars).expect("forward succeeds near the probe");
                    g.value(y)
                        .expect("own var")
                        .data()
                        .iter()
                        .zip(weights.data())
                        .map(|(a, b)| a * b)
                        .sum()
                },
                inputs[k].data(),
                1e-4,
            );
            worst = worst.max(relative_error(analytic.data(), &numeric));
        }
        out.push(PrimitiveCheck {
            name,
            relative_error: worst,
        });
    }
    Ok(out)
}
