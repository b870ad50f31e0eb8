//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_loss, LayerSpec, Model, NnError, Tensor};

/// A small model whose gradients are checked, with one input batch and
/// matching targets in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Case {
    /// Layer kind the case is built around.
    pub focus: &'static str,
    pub model: Model<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Layer kinds in file-format order.
pub const KINDS: [&str; 8] = [
    "dense",
    "conv1d",
    "conv_transpose1d",
    "dropout",
    "relu",
    "sigmoid",
    "flatten",
    "reshape",
];

const DROPOUT_SEED: u64 = 0x5eed;

fn loss(model: &mut Model<f64>, case_x: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64, NnError> {
    model.reseed_dropout(DROPOUT_SEED);
    let y = model.forward(case_x, true)?;
    Ok(bce_loss(&y, target)?.0 + model.l2_penalty())
}

/// Compares every parameter gradient against `(L(θ+ε) − L(θ−ε)) / 2ε`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-7)`.
pub fn check(model: &mut Model<f64>, x: &Tensor<f64>, target: &Tensor<f64>, eps: f64) -> Result<Report, NnError> {
    model.reseed_dropout(DROPOUT_SEED);
    let y = model.forward(x, true)?;
    let (_, g) = bce_loss(&y, target)?;
    model.zero_grad();
    model.backward(&g)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, a) in grads.iter().enumerate() {
            let orig = model.params()[pi].value[j];
            model.params_mut()[pi].value[j] = orig + eps;
            let hi = loss(model, x, target)?;
            model.params_mut()[pi].value[j] = orig - eps;
            let lo = loss(model, x, target)?;
            model.params_mut()[pi].value[j] = orig;
            let n = (hi - lo) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    model.clear_cache();
    Ok(Report {
        max_rel_error: worst,
        checked,
    })
}

fn uniform_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Randomized small model exercising the layer kind `KINDS[kind]`, with
/// parametric layers on both sides so its input gradient is checked too.
pub fn random_case(kind: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l2 = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 0.05 } else { 0.0 };
    let batch = rng.random_range(1..4);
    let n_in = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    let n_out = rng.random_range(1..4);
    let len: usize = rng.random_range(4..11);
    let ch = rng.random_range(1..3);
    let filters = rng.random_range(1..4);
    let kernel = rng.random_range(1..6);
    let stride: usize = rng.random_range(1..4);
    let conv_out = len.div_ceil(stride);

    let conv = |in_len, in_channels, filters, l2| LayerSpec::Conv1d {
        in_len,
        in_channels,
        filters,
        kernel,
        stride,
        l2,
    };
    let dense = |inputs, units, l2| LayerSpec::Dense { inputs, units, l2 };

    let (input_shape, specs): (Vec<usize>, Vec<LayerSpec>) = match KINDS[kind] {
        "dense" => (
            vec![n_in],
            vec![
                dense(n_in, hidden, l2(&mut rng)),
                LayerSpec::Sigmoid,
                dense(hidden, n_out, l2(&mut rng)),
                LayerSpec::Sigmoid,
            ],
        ),
        "conv1d" => {
            let len2 = conv_out.div_ceil(stride);
            (
                vec![len, ch],
                vec![
                    conv(len, ch, filters, l2(&mut rng)),
                    LayerSpec::Sigmoid,
                    conv(conv_out, filters, 2, l2(&mut rng)),
                    LayerSpec::Flatten,
                    dense(len2 * 2, n_out, 0.0),
                    LayerSpec::Sigmoid,
                ],
            )
        }
        "conv_transpose1d" => {
            let short = rng.random_range(2..5);
            (
                vec![short, ch],
                vec![
                    LayerSpec::ConvTranspose1d {
                        in_len: short,
                        in_channels: ch,
                        filters,
                        kernel,
                        stride,
                        l2: l2(&mut rng),
                    },
                    LayerSpec::Sigmoid,
                    LayerSpec::ConvTranspose1d {
                        in_len: short * stride,
                        in_channels: filters,
                        filters: 1,
                        kernel: rng.random_range(1..6),
                        stride: 1,
                        l2: l2(&mut rng),
                    },
                    LayerSpec::Sigmoid,
                ],
            )
        }
        "dropout" | "relu" | "sigmoid" => {
            let mid = match KINDS[kind] {
                "dropout" => LayerSpec::Dropout {
                    rate: rng.random_range(0.1..0.6),
                },
                "relu" => LayerSpec::Relu,
                _ => LayerSpec::Sigmoid,
            };
            (
                vec![n_in],
                vec![
                    dense(n_in, hidden, l2(&mut rng)),
                    mid,
                    dense(hidden, n_out, 0.0),
                    LayerSpec::Sigmoid,
                ],
            )
        }
        "flatten" => (
            vec![len, ch],
            vec![
                conv(len, ch, filters, 0.0),
                LayerSpec::Flatten,
                dense(conv_out * filters, n_out, 0.0),
                LayerSpec::Sigmoid,
            ],
        ),
        "reshape" => (
            vec![n_in],
            vec![
                dense(n_in, len * ch, 0.0),
                LayerSpec::Reshape { shape: vec![len, ch] },
                conv(len, ch, 1, 0.0),
                LayerSpec::Flatten,
                LayerSpec::Sigmoid,
            ],
        ),
        other => unreachable!("unknown kind {other}"),
    };
    let model = Model::build(&input_shape, &specs, rng.random()).expect("consistent case");
    let mut xs = vec![batch];
    xs.extend_from_slice(&input_shape);
    let input = uniform_tensor(xs, -1.0, 1.0, &mut rng);
    let mut ys = vec![batch];
    ys.extend(model.output_shape());
    let target = uniform_tensor(ys, 0.0, 1.0, &mut rng);
    Case {
        focus: KINDS[kind],
        model,
        input,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_matches_finite_differences() {
        for trial in 0..50u64 {
            for kind in 0..KINDS.len() {
                let mut case = random_case(kind, trial * 31 + kind as u64);
                let r = check(&mut case.model, &case.input, &case.target, 1e-5).unwrap();
                assert!(
                    r.max_rel_error < 1e-4,
                    "{} trial {trial}: {:e} over {}",
                    case.focus,
                    r.max_rel_error,
                    r.checked
                );
            }
        }
    }

    #[test]
    fn three_layer_toy_model() {
        let specs = [
            LayerSpec::Dense { inputs: 3, units: 5, l2: 0.1 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 5, units: 4, l2: 0.0 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 4, units: 2, l2: 0.0 },
            LayerSpec::Sigmoid,
        ];
        let mut model = Model::build(&[3], &specs, 4).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -0.3, 0.9, -1.0, 0.2, 0.4]).unwrap();
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = check(&mut model, &x, &t, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
