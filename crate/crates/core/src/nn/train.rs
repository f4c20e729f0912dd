use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::model::{loss_and_grad, loss_grads, Mode, ModelParams};
use super::tensor::Tensor;
use super::NnError;
use crate::Scalar;

/// Training-loop configuration. Defaults: batches of 64, at most 150 epochs,
/// early stopping on validation accuracy with patience 30.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optimizer steps per epoch; 0 means one full pass over the training
    /// set. A positive cap takes the first `steps * batch_size` samples of
    /// each epoch's shuffle, so successive epochs still see fresh subsets.
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 150,
            patience: 30,
            steps_per_epoch: 0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// A labeled sample set; `x` is `[N, ...sample shape]`.
#[derive(Debug, Clone)]
pub struct DataSet<F> {
    pub x: Tensor<F>,
    pub y: Vec<u16>,
}

impl<F: Scalar> DataSet<F> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn sample_volume(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }

    fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Copies the given rows into a contiguous batch.
    fn gather(&self, idx: &[usize]) -> (Tensor<F>, Vec<u16>) {
        let vol = self.sample_volume();
        let mut data = Vec::with_capacity(idx.len() * vol);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * vol..(i + 1) * vol]);
            labels.push(self.y[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data).expect("gather volume"), labels)
    }

    fn validate(&self, what: &str) -> Result<(), NnError> {
        if self.is_empty() {
            return Err(NnError::Usage(format!("{what} set is empty")));
        }
        if self.x.shape()[0] != self.y.len() {
            return Err(NnError::ShapeMismatch {
                context: format!("{what} set labels"),
                expected: vec![self.x.shape()[0]],
                got: vec![self.y.len()],
            });
        }
        Ok(())
    }
}

/// Per-epoch record: mean training loss (cross-entropy plus L2) and validation
/// metrics computed with running statistics and no dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Result of [`train`]: the best-validation-epoch weights and the run history.
#[derive(Debug)]
pub struct TrainOutcome<F> {
    pub model: ModelParams<F>,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights are returned (0-based).
    pub best_epoch: usize,
    /// Last epoch that ran (0-based).
    pub stopped_epoch: usize,
    /// Number of probability clampings seen during training.
    pub clamp_events: usize,
}

/// Trains with ADAM and early stopping on validation accuracy.
///
/// Batches are reshuffled every epoch from the config seed; the entire run is
/// deterministic. Returns the weights of the epoch with the highest validation
/// accuracy (earliest epoch wins ties).
pub fn train<F: Scalar>(
    model: ModelParams<F>,
    train_set: &DataSet<F>,
    val_set: &DataSet<F>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, NnError> {
    train_set.validate("training")?;
    val_set.validate("validation")?;
    if cfg.batch_size == 0 {
        return Err(NnError::Usage("batch_size must be positive".into()));
    }
    if cfg.max_epochs == 0 {
        return Err(NnError::Usage("max_epochs must be positive".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model, cfg.adam);
    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.snapshot();
    let mut since_best = 0usize;
    let mut clamp_events = 0usize;
    let mut stopped_epoch = 0usize;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        stopped_epoch = epoch;
        indices.shuffle(&mut rng);
        let epoch_len = if cfg.steps_per_epoch == 0 {
            indices.len()
        } else {
            (cfg.steps_per_epoch * cfg.batch_size).min(indices.len())
        };
        let epoch_indices = &indices[..epoch_len];
        let mut loss_sum = 0.0f64;
        for (step, chunk) in epoch_indices.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = train_set.gather(chunk);
            let (loss, grads, fwd, clamped) =
                loss_grads(&model, &bx, &by, Mode::Train(&mut rng))?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, step });
            }
            clamp_events += clamped;
            model.commit_bn_updates(&fwd);
            adam.step(&mut model, &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate(&model, val_set, cfg.batch_size)?;
        history.push(EpochStats {
            train_loss: loss_sum / epoch_len as f64,
            val_loss,
            val_accuracy,
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best_snapshot = model.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.restore(best_snapshot);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_epoch,
        clamp_events,
    })
}

/// Mean cross-entropy and top-1 accuracy over a set, in eval mode.
pub fn evaluate<F: Scalar>(
    model: &ModelParams<F>,
    set: &DataSet<F>,
    batch_size: usize,
) -> Result<(f64, f64), NnError> {
    let preds = predict_classes(model, &set.x, batch_size)?;
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (bx, by) = set.gather(chunk);
        let fwd = model.forward(&bx, Mode::Eval)?;
        let (loss, _, _) = loss_and_grad(fwd.output(), &by)?;
        loss_sum += loss * chunk.len() as f64;
    }
    Ok((loss_sum / set.len() as f64, accuracy(&preds, &set.y)))
}

/// Predicted class per row (argmax; ties take the lowest class index).
pub fn predict_classes<F: Scalar>(
    model: &ModelParams<F>,
    x: &Tensor<F>,
    batch_size: usize,
) -> Result<Vec<u16>, NnError> {
    let n = x.shape()[0];
    let vol: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&x.shape()[1..]);
        let batch = Tensor::new(
            shape,
            x.data()[start * vol..end * vol].to_vec(),
        )?;
        let fwd = model.forward(&batch, Mode::Eval)?;
        let probs = fwd.output();
        let classes = *probs.shape().last().unwrap();
        for row in probs.data().chunks(classes) {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best as u16);
        }
        start = end;
    }
    Ok(out)
}

/// Fraction of matching predictions.
pub fn accuracy(preds: &[u16], labels: &[u16]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}
