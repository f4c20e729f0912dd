use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{loss_and_grad, loss_grads, Mode, ModelParams};
use super::tensor::Tensor;
use super::NnError;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over weights of |analytic - central| / max(1e-8, |analytic| + |central|)
    pub max_rel_error: f64,
    pub weights_checked: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Loss of a training-mode pass with dropout masks pinned by `mask_seed`; the
/// rng stream is independent of the weights, so repeated evaluations see
/// identical masks.
fn loss_at(
    model: &ModelParams<f64>,
    x: &Tensor<f64>,
    labels: &[u16],
    mask_seed: u64,
) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let fwd = model.forward(x, Mode::Train(&mut rng))?;
    let (ce, _, _) = loss_and_grad(fwd.output(), labels)?;
    Ok(ce + model.l2_penalty())
}

/// Central finite differences over every trainable weight at 64-bit precision.
///
/// Uses the fourth-order five-point stencil so `epsilon` can stay large
/// enough (around 1e-4) to keep loss-cancellation noise below the smallest
/// gradients worth resolving; the O(epsilon^4) truncation term is negligible
/// at that scale.
pub fn fd_gradients(
    model: &ModelParams<f64>,
    x: &Tensor<f64>,
    labels: &[u16],
    epsilon: f64,
    mask_seed: u64,
) -> Result<Vec<Tensor<f64>>, NnError> {
    let mut work = model.clone();
    let layer_count = work.layer_params().len();
    let mut grads = Vec::new();
    for layer in 0..layer_count {
        for pi in 0..work.layer_params()[layer].len() {
            if !work.layer_params()[layer][pi].trainable {
                continue;
            }
            let len = work.layer_params()[layer][pi].tensor.len();
            let shape = work.layer_params()[layer][pi].tensor.shape().to_vec();
            let mut g = vec![0.0f64; len];
            for i in 0..len {
                let old = work.layer_params()[layer][pi].tensor.data()[i];
                let at = |v: f64, work: &mut ModelParams<f64>| -> Result<f64, NnError> {
                    work.layer_params_mut()[layer][pi].tensor.data_mut()[i] = v;
                    loss_at(work, x, labels, mask_seed)
                };
                let p2 = at(old + 2.0 * epsilon, &mut work)?;
                let p1 = at(old + epsilon, &mut work)?;
                let m1 = at(old - epsilon, &mut work)?;
                let m2 = at(old - 2.0 * epsilon, &mut work)?;
                work.layer_params_mut()[layer][pi].tensor.data_mut()[i] = old;
                g[i] = (m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * epsilon);
            }
            grads.push(Tensor::new(shape, g)?);
        }
    }
    Ok(grads)
}

/// Relative-error comparison used by all gradient checks.
pub fn max_rel_error(analytic: &[Tensor<f64>], fd: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient tensor count");
    let mut worst = 0.0f64;
    for (a, c) in analytic.iter().zip(fd) {
        assert_eq!(a.shape(), c.shape(), "gradient tensor shape");
        for (&av, &cv) in a.data().iter().zip(c.data()) {
            let rel = (av - cv).abs() / REL_FLOOR.max(av.abs() + cv.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// Checks an f64 model's analytic gradients against central finite
/// differences.
///
/// The batch must be free of max-pooling ties: a tie makes the loss
/// non-differentiable there, so the caller should resample its inputs.
pub fn gradient_check(
    model: &ModelParams<f64>,
    x: &Tensor<f64>,
    labels: &[u16],
    epsilon: f64,
    mask_seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, analytic, fwd, _) = loss_grads(model, x, labels, Mode::Train(&mut rng))?;
    if fwd.had_pool_tie() {
        return Err(NnError::Usage(
            "max-pooling tie in gradient-check batch; resample inputs".into(),
        ));
    }
    let fd = fd_gradients(model, x, labels, epsilon, mask_seed)?;
    Ok(GradCheckReport {
        max_rel_error: max_rel_error(&analytic.tensors, &fd),
        weights_checked: fd.iter().map(|t| t.len()).sum(),
    })
}

/// Checks a 32-bit model's analytic gradients against the 64-bit
/// finite-difference reference taken at the same (exactly widened) weights.
pub fn gradient_check_cast(
    model32: &ModelParams<f32>,
    x64: &Tensor<f64>,
    labels: &[u16],
    epsilon: f64,
    mask_seed: u64,
) -> Result<GradCheckReport, NnError> {
    let x32: Tensor<f32> = x64.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, analytic32, fwd, _) = loss_grads(model32, &x32, labels, Mode::Train(&mut rng))?;
    if fwd.had_pool_tie() {
        return Err(NnError::Usage(
            "max-pooling tie in gradient-check batch; resample inputs".into(),
        ));
    }
    let model64: ModelParams<f64> = model32.cast();
    let fd = fd_gradients(&model64, x64, labels, epsilon, mask_seed)?;
    let analytic: Vec<Tensor<f64>> = analytic32.tensors.iter().map(|t| t.cast()).collect();
    Ok(GradCheckReport {
        max_rel_error: max_rel_error(&analytic, &fd),
        weights_checked: fd.iter().map(|t| t.len()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        scaled_input(shape, seed, 1.0)
    }

    fn scaled_input(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect(),
        )
        .unwrap()
    }

    fn check(specs: Vec<LayerSpec>, input: &[usize], batch: usize, classes: usize, eps: f64) -> f64 {
        check_scaled(specs, input, batch, classes, eps, 1.0)
    }

    fn check_scaled(
        specs: Vec<LayerSpec>,
        input: &[usize],
        batch: usize,
        classes: usize,
        eps: f64,
        scale: f64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let model = ModelParams::<f64>::new(specs, input, 0.005, &mut rng).unwrap();
        let mut shape = vec![batch];
        shape.extend_from_slice(input);
        let x = scaled_input(&shape, 200, scale);
        let labels: Vec<u16> = (0..batch).map(|i| (i % classes) as u16).collect();
        gradient_check(&model, &x, &labels, eps, 300)
            .unwrap()
            .max_rel_error
    }

    /// Every layer kind participates in at least one of these stacks; each
    /// must agree with central differences to 1e-5 at 64-bit.
    #[test]
    fn dense_softmax_stack_matches_fd() {
        let specs = vec![
            LayerSpec::Dense {
                inputs: 6,
                units: 5,
                l2: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 5,
                units: 3,
                l2: false,
            },
            LayerSpec::Softmax,
        ];
        let e = check(specs, &[6], 4, 3, 1e-5);
        assert!(e < 1e-6, "max rel error {e}");
    }

    #[test]
    fn conv2d_bn_pool_stack_matches_fd() {
        let specs = vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 3,
                kh: 3,
                kw: 3,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 12,
                units: 3,
                l2: true,
            },
            LayerSpec::Softmax,
        ];
        let e = check(specs, &[6, 6, 1], 3, 3, 2e-4);
        assert!(e < 1e-5, "max rel error {e}");
    }

    #[test]
    fn conv1d_dropout_stack_matches_fd() {
        let specs = vec![
            LayerSpec::Conv1d {
                in_ch: 1,
                out_ch: 4,
                k: 5,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool1d { p: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.4 },
            LayerSpec::Dense {
                inputs: 24,
                units: 4,
                l2: true,
            },
            LayerSpec::Softmax,
        ];
        let e = check(specs, &[16, 1], 3, 4, 2e-4);
        assert!(e < 1e-5, "max rel error {e}");
    }

    /// Gradients reaching the bottom layer's recurrent weights shrink to
    /// around 1e-9 through three gated layers, so the inputs are scaled up
    /// and epsilon widened to keep finite-difference rounding noise below
    /// the pass threshold; the stack is kink-free, so the O(eps^4)
    /// truncation term stays negligible at this epsilon.
    #[test]
    fn lstm_stack_matches_fd() {
        let specs = vec![
            LayerSpec::LstmStack {
                layers: 3,
                units: 4,
                inputs: 5,
            },
            LayerSpec::Dense {
                inputs: 4,
                units: 3,
                l2: true,
            },
            LayerSpec::Softmax,
        ];
        let e = check_scaled(specs, &[4, 5], 8, 3, 5e-3, 5.0);
        assert!(e < 1e-5, "max rel error {e}");
    }

    /// The f32 analytic path against the f64 reference stays under 1e-3.
    #[test]
    fn f32_gradients_match_f64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let specs = vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                kh: 3,
                kw: 3,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8,
                units: 3,
                l2: true,
            },
            LayerSpec::Softmax,
        ];
        let model = ModelParams::<f32>::new(specs, &[6, 6, 1], 0.005, &mut rng).unwrap();
        let x = random_input(&[3, 6, 6, 1], 53);
        let report = gradient_check_cast(&model, &x, &[0, 1, 2], 2e-4, 54).unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn engineered_pool_tie_is_reported() {
        let specs = vec![
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 1,
                units: 2,
                l2: false,
            },
            LayerSpec::Softmax,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelParams::<f64>::new(specs, &[2, 2, 1], 0.0, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let err = gradient_check(&model, &x, &[0], 1e-5, 6).unwrap_err();
        assert!(err.to_string().contains("tie"));
    }
}
