use rand::RngCore;

use super::layers::{ArchShapes, LayerSpec, StageShape};
use super::tensor::Tensor;
use super::NnError;
use crate::Scalar;

/// Probabilities below this are clamped before the log in the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// Batch-norm running statistics decay: `running = 0.9*running + 0.1*batch`.
const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

/// One named weight tensor of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Optimized by ADAM; non-trainable tensors (batch-norm running stats)
    /// are still part of snapshots and checkpoints.
    pub trainable: bool,
}

/// A network: layer specs, resolved shapes, and per-layer weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    specs: Vec<LayerSpec>,
    shapes: ArchShapes,
    params: Vec<Vec<Param<F>>>,
    l2_factor: f64,
}

/// Forward-pass mode. Training draws dropout masks from the supplied rng and
/// computes batch statistics; evaluation is deterministic and uses running
/// statistics.
pub enum Mode<'r> {
    Train(&'r mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Per-layer side data captured by the forward pass for exact backprop.
enum Side<F> {
    None,
    /// Flat input index of each output element's maximum, plus whether any
    /// pooling window held a tie.
    Pool { argmax: Vec<u32>, ties: bool },
    /// Mask holding 0 or 1/keep per element.
    Dropout { mask: Vec<F> },
    /// Batch statistics actually used by this pass.
    BatchNorm {
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch: bool,
    },
    Lstm(Vec<LstmLayerCache<F>>),
}

/// Per-LSTM-layer sequences cached for backprop, all laid out `[b*T + t][u]`.
struct LstmLayerCache<F> {
    /// Post-activation gates `[i f g o]` per step, width 4U.
    gates: Vec<F>,
    /// Cell state after each step.
    c: Vec<F>,
    tanh_c: Vec<F>,
    /// Hidden state after each step (layer output sequence).
    h: Vec<F>,
}

/// Result of a forward pass: every activation plus backprop side data and
/// pending batch-norm running-stat updates.
pub struct Forward<F> {
    /// `acts[0]` is the input batch; `acts[i+1]` is layer `i`'s output.
    acts: Vec<Tensor<F>>,
    side: Vec<Side<F>>,
    /// `(layer index, new running mean, new running var)` to commit after a
    /// training step.
    bn_updates: Vec<(usize, Vec<F>, Vec<F>)>,
    batch: usize,
}

impl<F: Scalar> Forward<F> {
    /// Network output (softmax probabilities for classifier architectures).
    pub fn output(&self) -> &Tensor<F> {
        self.acts.last().expect("forward stores at least the input")
    }

    /// True when some max-pooling window saw two equal maxima this pass.
    pub fn had_pool_tie(&self) -> bool {
        self.side
            .iter()
            .any(|s| matches!(s, Side::Pool { ties: true, .. }))
    }
}

/// Gradients for every trainable tensor, in `visit_trainable` order.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Builds a model with freshly initialized weights: He-style uniform
    /// fan-in scaling for conv/dense kernels, ±0.1 uniform for LSTM gates,
    /// zero biases, identity batch-norm.
    pub fn new(
        specs: Vec<LayerSpec>,
        input: &[usize],
        l2_factor: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self, NnError> {
        let shapes = ArchShapes::infer(&specs, input)?;
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            params.push(init_layer(spec, rng));
        }
        Ok(Self {
            specs,
            shapes,
            params,
            l2_factor,
        })
    }

    /// Rebuilds a model from explicit parts (checkpoint load).
    pub fn from_parts(
        specs: Vec<LayerSpec>,
        input: &[usize],
        l2_factor: f64,
        params: Vec<Vec<Param<F>>>,
    ) -> Result<Self, NnError> {
        let shapes = ArchShapes::infer(&specs, input)?;
        if params.len() != specs.len() {
            return Err(NnError::Usage(format!(
                "expected {} layer parameter groups, got {}",
                specs.len(),
                params.len()
            )));
        }
        Ok(Self {
            specs,
            shapes,
            params,
            l2_factor,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn shapes(&self) -> &ArchShapes {
        &self.shapes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes.input
    }

    pub fn l2_factor(&self) -> f64 {
        self.l2_factor
    }

    pub fn layer_params(&self) -> &[Vec<Param<F>>] {
        &self.params
    }

    pub fn layer_params_mut(&mut self) -> &mut [Vec<Param<F>>] {
        &mut self.params
    }

    /// Visits trainable tensors in deterministic (layer, param) order.
    pub fn visit_trainable<'a>(&'a self) -> impl Iterator<Item = &'a Tensor<F>> {
        self.params
            .iter()
            .flatten()
            .filter(|p| p.trainable)
            .map(|p| &p.tensor)
    }

    pub fn visit_trainable_mut<'a>(&'a mut self) -> impl Iterator<Item = &'a mut Tensor<F>> {
        self.params
            .iter_mut()
            .flatten()
            .filter(|p| p.trainable)
            .map(|p| &mut p.tensor)
    }

    pub fn trainable_count(&self) -> usize {
        self.visit_trainable().map(|t| t.len()).sum()
    }

    /// Deep copy of all parameter tensors (for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<Vec<Param<F>>> {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: Vec<Vec<Param<F>>>) {
        self.params = snapshot;
    }

    /// Converts every tensor to another scalar type; layer structure is shared.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|p| Param {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        })
                        .collect()
                })
                .collect(),
            l2_factor: self.l2_factor,
        }
    }

    /// Commits pending batch-norm running-statistic updates from a training
    /// forward pass.
    pub fn commit_bn_updates(&mut self, fwd: &Forward<F>) {
        for (layer, mean, var) in &fwd.bn_updates {
            let group = &mut self.params[*layer];
            for p in group.iter_mut() {
                if p.name == "running_mean" {
                    p.tensor.data_mut().copy_from_slice(mean);
                } else if p.name == "running_var" {
                    p.tensor.data_mut().copy_from_slice(var);
                }
            }
        }
    }

    /// Runs the network over a batch. The input shape must be
    /// `[batch, ...input_sample_shape]` with `batch >= 1`.
    pub fn forward(&self, x: &Tensor<F>, mut mode: Mode) -> Result<Forward<F>, NnError> {
        let xs = x.shape();
        if xs.len() != self.shapes.input.len() + 1 || xs[1..] != *self.shapes.input || xs[0] == 0 {
            return Err(NnError::ShapeMismatch {
                context: "model input".into(),
                expected: self.shapes.input.clone(),
                got: xs.to_vec(),
            });
        }
        let batch = xs[0];
        let mut acts: Vec<Tensor<F>> = Vec::with_capacity(self.specs.len() + 1);
        let mut side: Vec<Side<F>> = Vec::with_capacity(self.specs.len());
        let mut bn_updates = Vec::new();
        acts.push(x.clone());
        for (idx, spec) in self.specs.iter().enumerate() {
            let stage = &self.shapes.stages[idx];
            let rows = batch * stage.mult_in;
            let input = acts.last().expect("non-empty");
            let (out, s) = self.layer_forward(idx, spec, stage, rows, batch, input, &mut mode)?;
            if !out.checksum().is_finite() {
                return Err(NnError::NonFinite {
                    layer: idx,
                    kind: spec.kind_name().into(),
                });
            }
            if let Some(upd) = self.pending_bn_update(idx, spec, input, &mode) {
                bn_updates.push(upd);
            }
            acts.push(out);
            side.push(s);
        }
        Ok(Forward {
            acts,
            side,
            bn_updates,
            batch,
        })
    }

    fn pending_bn_update(
        &self,
        idx: usize,
        spec: &LayerSpec,
        input: &Tensor<F>,
        mode: &Mode,
    ) -> Option<(usize, Vec<F>, Vec<F>)> {
        let LayerSpec::BatchNorm { channels } = spec else {
            return None;
        };
        if !mode.is_train() {
            return None;
        }
        let (mean, var) = channel_stats(input.data(), *channels);
        let group = &self.params[idx];
        let rm = group.iter().find(|p| p.name == "running_mean").unwrap();
        let rv = group.iter().find(|p| p.name == "running_var").unwrap();
        let m = F::of(BN_MOMENTUM);
        let one_m = F::of(1.0 - BN_MOMENTUM);
        let new_mean: Vec<F> = rm
            .tensor
            .data()
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| r * m + b * one_m)
            .collect();
        let new_var: Vec<F> = rv
            .tensor
            .data()
            .iter()
            .zip(&var)
            .map(|(&r, &b)| r * m + b * one_m)
            .collect();
        Some((idx, new_mean, new_var))
    }

    fn layer_forward(
        &self,
        idx: usize,
        spec: &LayerSpec,
        stage: &StageShape,
        rows: usize,
        batch: usize,
        input: &Tensor<F>,
        mode: &mut Mode,
    ) -> Result<(Tensor<F>, Side<F>), NnError> {
        let out_shape: Vec<usize> = if stage.mult_out > 1 && stage.out_sample.len() > 1 {
            // Keep the explicit [B, T, ...] shape for intermediate clarity.
            std::iter::once(batch)
                .chain(std::iter::once(stage.mult_out))
                .chain(stage.out_sample.iter().copied())
                .collect()
        } else if stage.mult_out > 1 {
            vec![batch, stage.mult_out, stage.out_sample[0]]
        } else {
            std::iter::once(batch)
                .chain(stage.out_sample.iter().copied())
                .collect()
        };
        let x = input.data();
        match *spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => {
                let (h, w) = (stage.in_sample[0], stage.in_sample[1]);
                let group = &self.params[idx];
                let mut out = vec![F::zero(); rows * (h - kh + 1) * (w - kw + 1) * out_ch];
                conv_forward(
                    x,
                    rows,
                    h,
                    w,
                    in_ch,
                    group[0].tensor.data(),
                    kh,
                    kw,
                    out_ch,
                    group.get(1).map(|p| p.tensor.data()),
                    &mut out,
                );
                Ok((Tensor::new(out_shape, out)?, Side::None))
            }
            LayerSpec::Conv1d { in_ch, out_ch, k, .. } => {
                let l = stage.in_sample[0];
                let group = &self.params[idx];
                let mut out = vec![F::zero(); rows * (l - k + 1) * out_ch];
                conv_forward(
                    x,
                    rows,
                    1,
                    l,
                    in_ch,
                    group[0].tensor.data(),
                    1,
                    k,
                    out_ch,
                    group.get(1).map(|p| p.tensor.data()),
                    &mut out,
                );
                Ok((Tensor::new(out_shape, out)?, Side::None))
            }
            LayerSpec::MaxPool2d { ph, pw } => {
                let (h, w, c) = (stage.in_sample[0], stage.in_sample[1], stage.in_sample[2]);
                let (out, argmax, ties) = pool_forward(x, rows, h, w, c, ph, pw);
                Ok((Tensor::new(out_shape, out)?, Side::Pool { argmax, ties }))
            }
            LayerSpec::MaxPool1d { p } => {
                let (l, c) = (stage.in_sample[0], stage.in_sample[1]);
                let (out, argmax, ties) = pool_forward(x, rows, 1, l, c, 1, p);
                Ok((Tensor::new(out_shape, out)?, Side::Pool { argmax, ties }))
            }
            LayerSpec::Dense { inputs, units, .. } => {
                let group = &self.params[idx];
                let mut out = vec![F::zero(); rows * units];
                dense_forward(
                    x,
                    rows,
                    inputs,
                    group[0].tensor.data(),
                    units,
                    group[1].tensor.data(),
                    &mut out,
                );
                Ok((Tensor::new(out_shape, out)?, Side::None))
            }
            LayerSpec::Relu => {
                let out: Vec<F> = x.iter().map(|&v| v.max(F::zero())).collect();
                Ok((Tensor::new(out_shape, out)?, Side::None))
            }
            LayerSpec::Softmax => {
                let width = stage.in_sample[0];
                let mut out = x.to_vec();
                for row in out.chunks_mut(width) {
                    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / sum;
                    }
                }
                Ok((Tensor::new(out_shape, out)?, Side::None))
            }
            LayerSpec::Dropout { rate } => match mode {
                Mode::Train(rng) if rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let scale = F::of(1.0 / keep);
                    // One bulk draw of 32 random bits per element; keeping
                    // when `bits < keep * 2^32` hits the rate exactly up to
                    // quantization and avoids a dispatched call per element.
                    let threshold = (keep * 4294967296.0) as u64;
                    let mut bits = vec![0u8; x.len() * 4];
                    rng.fill_bytes(&mut bits);
                    let mut mask = Vec::with_capacity(x.len());
                    let mut out = Vec::with_capacity(x.len());
                    for (&v, b4) in x.iter().zip(bits.chunks_exact(4)) {
                        let word = u32::from_le_bytes([b4[0], b4[1], b4[2], b4[3]]);
                        let m = if (word as u64) < threshold {
                            scale
                        } else {
                            F::zero()
                        };
                        mask.push(m);
                        out.push(v * m);
                    }
                    Ok((Tensor::new(out_shape, out)?, Side::Dropout { mask }))
                }
                _ => Ok((Tensor::new(out_shape, x.to_vec())?, Side::None)),
            },
            LayerSpec::BatchNorm { channels } => {
                let group = &self.params[idx];
                let gamma = group[0].tensor.data();
                let beta = group[1].tensor.data();
                let (mean, var, batch_stats) = if mode.is_train() {
                    let (m, v) = channel_stats(x, channels);
                    (m, v, true)
                } else {
                    (
                        group[2].tensor.data().to_vec(),
                        group[3].tensor.data().to_vec(),
                        false,
                    )
                };
                let inv_std: Vec<F> = var
                    .iter()
                    .map(|&v| F::one() / (v + F::of(BN_EPS)).sqrt())
                    .collect();
                let mut xhat = vec![F::zero(); x.len()];
                let mut out = vec![F::zero(); x.len()];
                for ((xr, hr), or) in x
                    .chunks_exact(channels)
                    .zip(xhat.chunks_exact_mut(channels))
                    .zip(out.chunks_exact_mut(channels))
                {
                    for c in 0..channels {
                        let xh = (xr[c] - mean[c]) * inv_std[c];
                        hr[c] = xh;
                        or[c] = gamma[c] * xh + beta[c];
                    }
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Side::BatchNorm {
                        xhat,
                        inv_std,
                        batch: batch_stats,
                    },
                ))
            }
            LayerSpec::LstmStack { layers, units, inputs } => {
                let t_steps = stage.mult_in;
                let group = &self.params[idx];
                let mut caches: Vec<LstmLayerCache<F>> = Vec::with_capacity(layers);
                let mut seq: Vec<F> = x.to_vec(); // [b*T + t][width]
                let mut width = inputs;
                for l in 0..layers {
                    let w_x = group[l * 3].tensor.data();
                    let w_h = group[l * 3 + 1].tensor.data();
                    let b = group[l * 3 + 2].tensor.data();
                    let cache = lstm_layer_forward(&seq, batch, t_steps, width, units, w_x, w_h, b);
                    seq = cache.h.clone();
                    width = units;
                    caches.push(cache);
                }
                // Emit the top layer's hidden state at the final step.
                let top = &caches[layers - 1].h;
                let mut out = vec![F::zero(); batch * units];
                for bi in 0..batch {
                    let src = (bi * t_steps + (t_steps - 1)) * units;
                    out[bi * units..(bi + 1) * units].copy_from_slice(&top[src..src + units]);
                }
                Ok((Tensor::new(out_shape, out)?, Side::Lstm(caches)))
            }
            LayerSpec::Flatten => Ok((Tensor::new(out_shape, x.to_vec())?, Side::None)),
        }
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network output)
    /// through the cached forward pass. Returns data gradients for every
    /// trainable tensor; the L2 penalty contribution is *not* included here.
    pub fn backward(&self, fwd: &Forward<F>, d_out: &Tensor<F>) -> Result<Grads<F>, NnError> {
        let out = fwd.output();
        if d_out.shape() != out.shape() {
            return Err(NnError::ShapeMismatch {
                context: "backward output gradient".into(),
                expected: out.shape().to_vec(),
                got: d_out.shape().to_vec(),
            });
        }
        let batch = fwd.batch;
        let mut grads_rev: Vec<Vec<Tensor<F>>> = Vec::with_capacity(self.specs.len());
        let mut dy: Vec<F> = d_out.data().to_vec();
        for (idx, spec) in self.specs.iter().enumerate().rev() {
            let stage = &self.shapes.stages[idx];
            let rows = batch * stage.mult_in;
            let x = fwd.acts[idx].data();
            let y = fwd.acts[idx + 1].data();
            let (dx, wg) = self.layer_backward(idx, spec, stage, rows, batch, x, y, &fwd.side[idx], &dy);
            grads_rev.push(wg);
            dy = dx;
        }
        let mut tensors = Vec::new();
        for wg in grads_rev.into_iter().rev() {
            tensors.extend(wg);
        }
        Ok(Grads { tensors })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        idx: usize,
        spec: &LayerSpec,
        stage: &StageShape,
        rows: usize,
        batch: usize,
        x: &[F],
        y: &[F],
        side: &Side<F>,
        dy: &[F],
    ) -> (Vec<F>, Vec<Tensor<F>>) {
        match *spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => {
                let (h, w) = (stage.in_sample[0], stage.in_sample[1]);
                let group = &self.params[idx];
                let (dx, dk, db) = conv_backward(
                    x,
                    rows,
                    h,
                    w,
                    in_ch,
                    group[0].tensor.data(),
                    kh,
                    kw,
                    out_ch,
                    dy,
                );
                let mut wg = vec![Tensor::new(group[0].tensor.shape().to_vec(), dk).unwrap()];
                if group.len() > 1 {
                    wg.push(Tensor::new(vec![out_ch], db).unwrap());
                }
                (dx, wg)
            }
            LayerSpec::Conv1d { in_ch, out_ch, k, .. } => {
                let l = stage.in_sample[0];
                let group = &self.params[idx];
                let (dx, dk, db) = conv_backward(
                    x,
                    rows,
                    1,
                    l,
                    in_ch,
                    group[0].tensor.data(),
                    1,
                    k,
                    out_ch,
                    dy,
                );
                let mut wg = vec![Tensor::new(group[0].tensor.shape().to_vec(), dk).unwrap()];
                if group.len() > 1 {
                    wg.push(Tensor::new(vec![out_ch], db).unwrap());
                }
                (dx, wg)
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::MaxPool1d { .. } => {
                let Side::Pool { argmax, .. } = side else {
                    unreachable!("pool layers cache argmax");
                };
                let mut dx = vec![F::zero(); x.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += dy[o];
                }
                (dx, vec![])
            }
            LayerSpec::Dense { inputs, units, .. } => {
                let group = &self.params[idx];
                let kernel = group[0].tensor.data();
                let mut dx = vec![F::zero(); rows * inputs];
                let mut dk = vec![F::zero(); units * inputs];
                let mut db = vec![F::zero(); units];
                for r in 0..rows {
                    let xr = &x[r * inputs..(r + 1) * inputs];
                    let dyr = &dy[r * units..(r + 1) * units];
                    let dxr = &mut dx[r * inputs..(r + 1) * inputs];
                    for u in 0..units {
                        let g = dyr[u];
                        if g == F::zero() {
                            continue;
                        }
                        db[u] += g;
                        let wrow = &kernel[u * inputs..(u + 1) * inputs];
                        let krow = &mut dk[u * inputs..(u + 1) * inputs];
                        for i in 0..inputs {
                            krow[i] += g * xr[i];
                            dxr[i] += g * wrow[i];
                        }
                    }
                }
                (
                    dx,
                    vec![
                        Tensor::new(vec![units, inputs], dk).unwrap(),
                        Tensor::new(vec![units], db).unwrap(),
                    ],
                )
            }
            LayerSpec::Relu => {
                let dx: Vec<F> = y
                    .iter()
                    .zip(dy)
                    .map(|(&yv, &g)| if yv > F::zero() { g } else { F::zero() })
                    .collect();
                (dx, vec![])
            }
            LayerSpec::Softmax => {
                let width = stage.in_sample[0];
                let mut dx = vec![F::zero(); dy.len()];
                for r in 0..rows {
                    let p = &y[r * width..(r + 1) * width];
                    let g = &dy[r * width..(r + 1) * width];
                    let dot: F = p.iter().zip(g).map(|(&pv, &gv)| pv * gv).sum();
                    for i in 0..width {
                        dx[r * width + i] = p[i] * (g[i] - dot);
                    }
                }
                (dx, vec![])
            }
            LayerSpec::Dropout { .. } => match side {
                Side::Dropout { mask } => {
                    let dx: Vec<F> = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    (dx, vec![])
                }
                _ => (dy.to_vec(), vec![]),
            },
            LayerSpec::BatchNorm { channels } => {
                let Side::BatchNorm {
                    xhat,
                    inv_std,
                    batch: batch_stats,
                } = side
                else {
                    unreachable!("batch-norm layers cache statistics");
                };
                let group = &self.params[idx];
                let gamma = group[0].tensor.data();
                let n_per_c = x.len() / channels;
                let mut dgamma = vec![F::zero(); channels];
                let mut dbeta = vec![F::zero(); channels];
                for (gr, hr) in dy.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
                    for c in 0..channels {
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                    }
                }
                let mut dx = vec![F::zero(); x.len()];
                if *batch_stats {
                    // Batch statistics depend on x: full batch-norm backward.
                    let n = F::of(n_per_c as f64);
                    for ((gr, hr), dr) in dy
                        .chunks_exact(channels)
                        .zip(xhat.chunks_exact(channels))
                        .zip(dx.chunks_exact_mut(channels))
                    {
                        for c in 0..channels {
                            let dxhat = gr[c] * gamma[c];
                            dr[c] = inv_std[c] / n
                                * (n * dxhat - dbeta[c] * gamma[c] - hr[c] * dgamma[c] * gamma[c]);
                        }
                    }
                } else {
                    for (gr, dr) in dy.chunks_exact(channels).zip(dx.chunks_exact_mut(channels)) {
                        for c in 0..channels {
                            dr[c] = gr[c] * gamma[c] * inv_std[c];
                        }
                    }
                }
                (
                    dx,
                    vec![
                        Tensor::new(vec![channels], dgamma).unwrap(),
                        Tensor::new(vec![channels], dbeta).unwrap(),
                    ],
                )
            }
            LayerSpec::LstmStack { layers, units, inputs } => {
                let Side::Lstm(caches) = side else {
                    unreachable!("lstm layers cache gate activations");
                };
                let t_steps = stage.mult_in;
                let group = &self.params[idx];
                // Seed the top layer's hidden-sequence gradient from dy at the
                // final step only.
                let mut d_seq = vec![F::zero(); batch * t_steps * units];
                for bi in 0..batch {
                    let dst = (bi * t_steps + (t_steps - 1)) * units;
                    d_seq[dst..dst + units]
                        .copy_from_slice(&dy[bi * units..(bi + 1) * units]);
                }
                let mut wgrads: Vec<Option<(Vec<F>, Vec<F>, Vec<F>)>> = vec![None; layers];
                let mut d_below = d_seq;
                for l in (0..layers).rev() {
                    let width = if l == 0 { inputs } else { units };
                    let input_seq: &[F] = if l == 0 {
                        x
                    } else {
                        &caches[l - 1].h
                    };
                    let w_x = group[l * 3].tensor.data();
                    let w_h = group[l * 3 + 1].tensor.data();
                    let (dx_seq, dwx, dwh, db) = lstm_layer_backward(
                        &caches[l], input_seq, batch, t_steps, width, units, w_x, w_h, &d_below,
                    );
                    wgrads[l] = Some((dwx, dwh, db));
                    d_below = dx_seq;
                }
                let mut out = Vec::with_capacity(layers * 3);
                for (l, wg) in wgrads.into_iter().enumerate() {
                    let (dwx, dwh, db) = wg.unwrap();
                    let width = if l == 0 { inputs } else { units };
                    out.push(Tensor::new(vec![4 * units, width], dwx).unwrap());
                    out.push(Tensor::new(vec![4 * units, units], dwh).unwrap());
                    out.push(Tensor::new(vec![4 * units], db).unwrap());
                }
                (d_below, out)
            }
            LayerSpec::Flatten => (dy.to_vec(), vec![]),
        }
    }
}

/// Per-channel mean and biased variance over the trailing axis.
fn channel_stats<F: Scalar>(x: &[F], channels: usize) -> (Vec<F>, Vec<F>) {
    let n = x.len() / channels;
    let inv_n = F::of(1.0 / n as f64);
    let mut mean = vec![F::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    let mut var = vec![F::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
            let d = v - m;
            *s += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_n;
    }
    (mean, var)
}

/// Valid stride-1 convolution, channels-last, kernel laid out `[kh,kw,cin,cout]`.
#[allow(clippy::too_many_arguments)]
fn conv_forward<F: Scalar>(
    x: &[F],
    rows: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[F],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    for r in 0..rows {
        let x_base = r * h * w * cin;
        let o_base = r * oh * ow * cout;
        for oy in 0..oh {
            for ox in 0..ow {
                let o_off = o_base + (oy * ow + ox) * cout;
                let acc = &mut out[o_off..o_off + cout];
                match bias {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.fill(F::zero()),
                }
                for ky in 0..kh {
                    let x_row = x_base + ((oy + ky) * w + ox) * cin;
                    for kx in 0..kw {
                        let x_off = x_row + kx * cin;
                        let w_off = ((ky * kw + kx) * cin) * cout;
                        for ci in 0..cin {
                            let xv = x[x_off + ci];
                            let wrow = &kernel[w_off + ci * cout..w_off + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the valid convolution w.r.t. input, kernel, and bias.
#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Scalar>(
    x: &[F],
    rows: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[F],
    kh: usize,
    kw: usize,
    cout: usize,
    dy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut dx = vec![F::zero(); x.len()];
    let mut dk = vec![F::zero(); kernel.len()];
    let mut db = vec![F::zero(); cout];
    for r in 0..rows {
        let x_base = r * h * w * cin;
        let o_base = r * oh * ow * cout;
        for oy in 0..oh {
            for ox in 0..ow {
                let dyr = &dy[o_base + (oy * ow + ox) * cout..o_base + (oy * ow + ox + 1) * cout];
                for (b, &g) in db.iter_mut().zip(dyr) {
                    *b += g;
                }
                for ky in 0..kh {
                    let x_row = x_base + ((oy + ky) * w + ox) * cin;
                    for kx in 0..kw {
                        let x_off = x_row + kx * cin;
                        let w_off = ((ky * kw + kx) * cin) * cout;
                        for ci in 0..cin {
                            let xv = x[x_off + ci];
                            let wrow = &kernel[w_off + ci * cout..w_off + (ci + 1) * cout];
                            let krow = &mut dk[w_off + ci * cout..w_off + (ci + 1) * cout];
                            for (kg, &g) in krow.iter_mut().zip(dyr) {
                                *kg += xv * g;
                            }
                            dx[x_off + ci] += dot_lanes(wrow, dyr);
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Dot product accumulated in eight independent lanes so it vectorizes; the
/// grouping of the sum is unspecified, like any float reduction here.
fn dot_lanes<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (a8, b8) in (&mut ca).zip(&mut cb) {
        for ((l, &av), &bv) in lanes.iter_mut().zip(a8).zip(b8) {
            *l += av * bv;
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (&av, &bv) in ca.remainder().iter().zip(cb.remainder()) {
        s += av * bv;
    }
    s
}

/// Non-overlapping max pooling with tie detection; ties resolve to the lowest
/// flat input index (the scan order).
///
/// Only ties at a nonzero maximum are flagged: pooling here always follows a
/// rectifier, whose clamped zeros tie constantly but pass no gradient through
/// any tied candidate, so routing cannot change the result.
fn pool_forward<F: Scalar>(
    x: &[F],
    rows: usize,
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
) -> (Vec<F>, Vec<u32>, bool) {
    let oh = h / ph;
    let ow = w / pw;
    let mut out = vec![F::zero(); rows * oh * ow * c];
    let mut argmax = vec![0u32; out.len()];
    let mut ties = false;
    // Candidates iterate outside the channel axis so the inner loop runs over
    // contiguous lanes as branch-free selects. A tie at the current best is
    // cleared whenever a strictly larger candidate arrives later, matching a
    // per-window rescan; first-scan-order wins remains the argmax rule.
    let mut tie_lane = vec![false; c];
    for r in 0..rows {
        let x_base = r * h * w * c;
        let o_base = r * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = o_base + (oy * ow + ox) * c;
                let first = x_base + (oy * ph * w + ox * pw) * c;
                out[o..o + c].copy_from_slice(&x[first..first + c]);
                for (i, a) in argmax[o..o + c].iter_mut().enumerate() {
                    *a = (first + i) as u32;
                }
                tie_lane[..c].fill(false);
                for ky in 0..ph {
                    for kx in 0..pw {
                        if ky == 0 && kx == 0 {
                            continue;
                        }
                        let idx = x_base + ((oy * ph + ky) * w + ox * pw + kx) * c;
                        let cand = &x[idx..idx + c];
                        let best = &mut out[o..o + c];
                        let arg = &mut argmax[o..o + c];
                        for ch in 0..c {
                            let v = cand[ch];
                            let b = best[ch];
                            let gt = v > b;
                            tie_lane[ch] = (tie_lane[ch] && !gt) || (v == b && v != F::zero());
                            best[ch] = if gt { v } else { b };
                            arg[ch] = if gt { (idx + ch) as u32 } else { arg[ch] };
                        }
                    }
                }
                ties |= tie_lane[..c].iter().any(|&t| t);
            }
        }
    }
    (out, argmax, ties)
}

fn dense_forward<F: Scalar>(
    x: &[F],
    rows: usize,
    inputs: usize,
    kernel: &[F],
    units: usize,
    bias: &[F],
    out: &mut [F],
) {
    // Kernel transposed to [inputs][units]: each input element then updates
    // all unit accumulators contiguously, which vectorizes; per-unit sums
    // still accumulate in ascending input order.
    let mut kt = vec![F::zero(); kernel.len()];
    for u in 0..units {
        for i in 0..inputs {
            kt[i * units + u] = kernel[u * inputs + i];
        }
    }
    for r in 0..rows {
        let xr = &x[r * inputs..(r + 1) * inputs];
        let or = &mut out[r * units..(r + 1) * units];
        or.copy_from_slice(bias);
        for (i, &xv) in xr.iter().enumerate() {
            let wrow = &kt[i * units..(i + 1) * units];
            for (a, &wv) in or.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
    }
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// One LSTM layer over the whole sequence; gate order is `[i f g o]`.
#[allow(clippy::too_many_arguments)]
fn lstm_layer_forward<F: Scalar>(
    seq: &[F],
    batch: usize,
    t_steps: usize,
    width: usize,
    units: usize,
    w_x: &[F],
    w_h: &[F],
    b: &[F],
) -> LstmLayerCache<F> {
    let g4 = 4 * units;
    let mut cache = LstmLayerCache {
        gates: vec![F::zero(); batch * t_steps * g4],
        c: vec![F::zero(); batch * t_steps * units],
        tanh_c: vec![F::zero(); batch * t_steps * units],
        h: vec![F::zero(); batch * t_steps * units],
    };
    // Weights transposed to [width][4*units] / [units][4*units]: each input
    // element updates all gate accumulators contiguously, which vectorizes;
    // per-gate sums still accumulate in ascending input order.
    let mut wxt = vec![F::zero(); w_x.len()];
    for gu in 0..g4 {
        for k in 0..width {
            wxt[k * g4 + gu] = w_x[gu * width + k];
        }
    }
    let mut wht = vec![F::zero(); w_h.len()];
    for gu in 0..g4 {
        for k in 0..units {
            wht[k * g4 + gu] = w_h[gu * units + k];
        }
    }
    let mut z = vec![F::zero(); g4];
    for bi in 0..batch {
        let mut h_prev = vec![F::zero(); units];
        let mut c_prev = vec![F::zero(); units];
        for t in 0..t_steps {
            let row = bi * t_steps + t;
            let xr = &seq[row * width..(row + 1) * width];
            z.copy_from_slice(b);
            for (k, &xv) in xr.iter().enumerate() {
                let wrow = &wxt[k * g4..(k + 1) * g4];
                for (a, &wv) in z.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
            for (k, &hv) in h_prev.iter().enumerate() {
                let wrow = &wht[k * g4..(k + 1) * g4];
                for (a, &wv) in z.iter_mut().zip(wrow) {
                    *a += hv * wv;
                }
            }
            let gates = &mut cache.gates[row * g4..(row + 1) * g4];
            for u in 0..units {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[units + u]);
                let g = z[2 * units + u].tanh();
                let o = sigmoid(z[3 * units + u]);
                gates[u] = i;
                gates[units + u] = f;
                gates[2 * units + u] = g;
                gates[3 * units + u] = o;
                let c = f * c_prev[u] + i * g;
                let tc = c.tanh();
                cache.c[row * units + u] = c;
                cache.tanh_c[row * units + u] = tc;
                cache.h[row * units + u] = o * tc;
            }
            h_prev.copy_from_slice(&cache.h[row * units..(row + 1) * units]);
            c_prev.copy_from_slice(&cache.c[row * units..(row + 1) * units]);
        }
    }
    cache
}

/// Backward through one LSTM layer given the gradient of its full hidden
/// sequence. Returns (input-sequence grad, dW_x, dW_h, db).
#[allow(clippy::too_many_arguments)]
fn lstm_layer_backward<F: Scalar>(
    cache: &LstmLayerCache<F>,
    input_seq: &[F],
    batch: usize,
    t_steps: usize,
    width: usize,
    units: usize,
    w_x: &[F],
    w_h: &[F],
    d_h_seq: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>, Vec<F>) {
    let g4 = 4 * units;
    let mut dx_seq = vec![F::zero(); batch * t_steps * width];
    let mut dwx = vec![F::zero(); g4 * width];
    let mut dwh = vec![F::zero(); g4 * units];
    let mut db = vec![F::zero(); g4];
    let mut dz = vec![F::zero(); g4];
    for bi in 0..batch {
        let mut dh_rec = vec![F::zero(); units];
        let mut dc_rec = vec![F::zero(); units];
        for t in (0..t_steps).rev() {
            let row = bi * t_steps + t;
            let gates = &cache.gates[row * g4..(row + 1) * g4];
            for u in 0..units {
                let i = gates[u];
                let f = gates[units + u];
                let g = gates[2 * units + u];
                let o = gates[3 * units + u];
                let tc = cache.tanh_c[row * units + u];
                let c_prev = if t == 0 {
                    F::zero()
                } else {
                    cache.c[(row - 1) * units + u]
                };
                let dh = d_h_seq[row * units + u] + dh_rec[u];
                let dc = dh * o * (F::one() - tc * tc) + dc_rec[u];
                let d_o = dh * tc;
                dz[3 * units + u] = d_o * o * (F::one() - o);
                let di = dc * g;
                dz[u] = di * i * (F::one() - i);
                let df = dc * c_prev;
                dz[units + u] = df * f * (F::one() - f);
                let dg = dc * i;
                dz[2 * units + u] = dg * (F::one() - g * g);
                dc_rec[u] = dc * f;
            }
            let xr = &input_seq[row * width..(row + 1) * width];
            let h_prev_row = if t == 0 { None } else { Some(row - 1) };
            let dxr = &mut dx_seq[row * width..(row + 1) * width];
            for u in dh_rec.iter_mut() {
                *u = F::zero();
            }
            for gu in 0..g4 {
                let g = dz[gu];
                if g == F::zero() {
                    continue;
                }
                db[gu] += g;
                let wx_row = &w_x[gu * width..(gu + 1) * width];
                let dwx_row = &mut dwx[gu * width..(gu + 1) * width];
                for k in 0..width {
                    dwx_row[k] += g * xr[k];
                    dxr[k] += g * wx_row[k];
                }
                let wh_row = &w_h[gu * units..(gu + 1) * units];
                let dwh_row = &mut dwh[gu * units..(gu + 1) * units];
                if let Some(pr) = h_prev_row {
                    let h_prev = &cache.h[pr * units..(pr + 1) * units];
                    for k in 0..units {
                        dwh_row[k] += g * h_prev[k];
                        dh_rec[k] += g * wh_row[k];
                    }
                } else {
                    // h_prev is zero at t=0: no dW_h or recurrent contribution.
                }
            }
        }
    }
    (dx_seq, dwx, dwh, db)
}

fn uniform<F: Scalar>(rng: &mut dyn RngCore, limit: f64, len: usize) -> Vec<F> {
    (0..len)
        .map(|_| F::of((rand::Rng::random::<f64>(rng) * 2.0 - 1.0) * limit))
        .collect()
}

fn init_layer<F: Scalar>(spec: &LayerSpec, rng: &mut dyn RngCore) -> Vec<Param<F>> {
    let param = |name: &str, tensor: Tensor<F>, trainable: bool| Param {
        name: name.to_string(),
        tensor,
        trainable,
    };
    match *spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kh,
            kw,
            bias,
        } => {
            let fan_in = (kh * kw * in_ch) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let mut out = vec![param(
                "kernel",
                Tensor::new(vec![kh, kw, in_ch, out_ch], uniform(rng, limit, kh * kw * in_ch * out_ch))
                    .unwrap(),
                true,
            )];
            if bias {
                out.push(param("bias", Tensor::zeros(&[out_ch]), true));
            }
            out
        }
        LayerSpec::Conv1d {
            in_ch,
            out_ch,
            k,
            bias,
        } => {
            let fan_in = (k * in_ch) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let mut out = vec![param(
                "kernel",
                Tensor::new(vec![1, k, in_ch, out_ch], uniform(rng, limit, k * in_ch * out_ch))
                    .unwrap(),
                true,
            )];
            if bias {
                out.push(param("bias", Tensor::zeros(&[out_ch]), true));
            }
            out
        }
        LayerSpec::Dense { inputs, units, .. } => {
            let limit = (6.0 / inputs as f64).sqrt();
            vec![
                param(
                    "kernel",
                    Tensor::new(vec![units, inputs], uniform(rng, limit, units * inputs)).unwrap(),
                    true,
                ),
                param("bias", Tensor::zeros(&[units]), true),
            ]
        }
        LayerSpec::BatchNorm { channels } => vec![
            param("gamma", Tensor::filled(&[channels], F::one()), true),
            param("beta", Tensor::zeros(&[channels]), true),
            param("running_mean", Tensor::zeros(&[channels]), false),
            param("running_var", Tensor::filled(&[channels], F::one()), false),
        ],
        LayerSpec::LstmStack {
            layers,
            units,
            inputs,
        } => {
            let mut out = Vec::with_capacity(layers * 3);
            for l in 0..layers {
                let width = if l == 0 { inputs } else { units };
                out.push(param(
                    &format!("l{l}.w_x"),
                    Tensor::new(vec![4 * units, width], uniform(rng, 0.1, 4 * units * width))
                        .unwrap(),
                    true,
                ));
                out.push(param(
                    &format!("l{l}.w_h"),
                    Tensor::new(vec![4 * units, units], uniform(rng, 0.1, 4 * units * units))
                        .unwrap(),
                    true,
                ));
                out.push(param(&format!("l{l}.bias"), Tensor::zeros(&[4 * units]), true));
            }
            out
        }
        _ => vec![],
    }
}

/// Mean categorical cross-entropy over a batch of probability rows.
///
/// Probabilities below [`PROB_CLAMP`] are clamped before the log and counted;
/// the returned gradient uses the clamped value as a stability floor, so it is
/// a subgradient when clamping is active.
pub fn loss_and_grad<F: Scalar>(
    probs: &Tensor<F>,
    labels: &[u16],
) -> Result<(f64, Tensor<F>, usize), NnError> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnError::ShapeMismatch {
            context: "loss_and_grad probabilities".into(),
            expected: vec![labels.len(), shape.last().copied().unwrap_or(0)],
            got: shape.to_vec(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if batch == 0 {
        return Err(NnError::Usage("loss over an empty batch".into()));
    }
    let clamp = F::of(PROB_CLAMP);
    let inv_b = F::of(1.0 / batch as f64);
    let mut loss = F::zero();
    let mut clamped = 0usize;
    let mut grad = vec![F::zero(); probs.len()];
    let data = probs.data();
    for (r, &label) in labels.iter().enumerate() {
        let y = label as usize;
        if y >= classes {
            return Err(NnError::Usage(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let p = data[r * classes + y];
        let pc = if p < clamp {
            clamped += 1;
            clamp
        } else {
            p
        };
        loss -= pc.ln();
        grad[r * classes + y] = -(F::one() / pc) * inv_b;
    }
    Ok(((loss * inv_b).to_f64(), Tensor::new(shape.to_vec(), grad)?, clamped))
}

impl<F: Scalar> ModelParams<F> {
    /// L2 penalty: `l2_factor * sum of squares` over opted-in dense kernels.
    pub fn l2_penalty(&self) -> f64 {
        if self.l2_factor == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for (spec, group) in self.specs.iter().zip(&self.params) {
            if let LayerSpec::Dense { l2: true, .. } = spec {
                let k = group[0].tensor.data();
                acc += k.iter().map(|&w| w.to_f64() * w.to_f64()).sum::<f64>();
            }
        }
        self.l2_factor * acc
    }

    /// Adds the L2 gradient `2*l2_factor*w` for opted-in dense kernels onto
    /// data gradients produced by [`ModelParams::backward`].
    pub fn add_l2_grads(&self, grads: &mut Grads<F>) {
        if self.l2_factor == 0.0 {
            return;
        }
        let two_l = F::of(2.0 * self.l2_factor);
        let mut gi = 0usize;
        for (spec, group) in self.specs.iter().zip(&self.params) {
            for p in group {
                if !p.trainable {
                    continue;
                }
                if p.name == "kernel" {
                    if let LayerSpec::Dense { l2: true, .. } = spec {
                        for (g, &w) in grads.tensors[gi]
                            .data_mut()
                            .iter_mut()
                            .zip(p.tensor.data())
                        {
                            *g += two_l * w;
                        }
                    }
                }
                gi += 1;
            }
        }
    }
}

/// Full loss and gradient evaluation: forward, cross-entropy, backward, plus
/// the L2 penalty and its gradient. This is the single path used by training
/// and by the gradient checker.
pub fn loss_grads<F: Scalar>(
    model: &ModelParams<F>,
    x: &Tensor<F>,
    labels: &[u16],
    mode: Mode,
) -> Result<(f64, Grads<F>, Forward<F>, usize), NnError> {
    let fwd = model.forward(x, mode)?;
    let (ce, dprobs, clamped) = loss_and_grad(fwd.output(), labels)?;
    let mut grads = model.backward(&fwd, &dprobs)?;
    model.add_l2_grads(&mut grads);
    let loss = ce + model.l2_penalty();
    Ok((loss, grads, fwd, clamped))
}
