use serde::{Deserialize, Serialize};

use super::NnError;

fn yes() -> bool {
    true
}

/// Layer descriptor. A model is a list of these plus matching weight tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Valid (no padding), stride-1 convolution over `[H, W, C]` activations.
    ///
    /// `bias: false` drops the additive bias. Convolutions feeding a
    /// batch-norm layer must omit it: mean subtraction cancels a constant
    /// channel offset exactly, leaving the parameter untrainable.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Valid, stride-1 convolution over `[L, C]` activations.
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool2d { ph: usize, pw: usize },
    MaxPool1d { p: usize },
    /// Fully connected layer; `l2` opts its kernel into the L2 penalty.
    Dense { inputs: usize, units: usize, l2: bool },
    Relu,
    Softmax,
    /// Inverted dropout: training scales kept activations by 1/(1-rate),
    /// evaluation is the identity.
    Dropout { rate: f64 },
    /// Per-channel batch normalization over the trailing axis.
    BatchNorm { channels: usize },
    /// Stacked LSTM over a sequence of vectors; emits the top layer's hidden
    /// state at the final timestep.
    LstmStack {
        layers: usize,
        units: usize,
        inputs: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::MaxPool1d { .. } => "max_pool1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::LstmStack { .. } => "lstm_stack",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Per-layer activation geometry resolved at model build time.
///
/// `sample` shapes exclude the batch axis. `mult` is the number of rows each
/// batch element contributes: sequence models run convolutional stages on
/// `batch * time` rows until the LSTM stack consumes the time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct StageShape {
    pub in_sample: Vec<usize>,
    pub out_sample: Vec<usize>,
    pub mult_in: usize,
    pub mult_out: usize,
}

/// Shape plan for a whole architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchShapes {
    /// Per-sample input shape as fed by callers (`[H,W,C]`, `[T,H,W,C]`, `[L,C]`).
    pub input: Vec<usize>,
    pub stages: Vec<StageShape>,
}

impl ArchShapes {
    /// Validates the layer list against an input shape and records every
    /// intermediate geometry.
    pub fn infer(specs: &[LayerSpec], input: &[usize]) -> Result<Self, NnError> {
        let (mut mult, mut cur): (usize, Vec<usize>) = match input.len() {
            4 => (input[0], input[1..].to_vec()),
            1..=3 => (1, input.to_vec()),
            _ => {
                return Err(NnError::BadLayerInput {
                    layer: 0,
                    kind: "input".into(),
                    shape: input.to_vec(),
                })
            }
        };
        let mut stages = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let bad = |shape: &[usize]| NnError::BadLayerInput {
                layer: idx,
                kind: spec.kind_name().into(),
                shape: shape.to_vec(),
            };
            let mut in_sample = cur.clone();
            let mut mult_in = mult;
            match *spec {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kh,
                    kw,
                    ..
                } => {
                    if cur.len() != 3 || cur[2] != in_ch || cur[0] < kh || cur[1] < kw {
                        return Err(bad(&cur));
                    }
                    cur = vec![cur[0] - kh + 1, cur[1] - kw + 1, out_ch];
                }
                LayerSpec::Conv1d { in_ch, out_ch, k, .. } => {
                    if cur.len() != 2 || cur[1] != in_ch || cur[0] < k {
                        return Err(bad(&cur));
                    }
                    cur = vec![cur[0] - k + 1, out_ch];
                }
                LayerSpec::MaxPool2d { ph, pw } => {
                    if cur.len() != 3 || ph == 0 || pw == 0 || cur[0] < ph || cur[1] < pw {
                        return Err(bad(&cur));
                    }
                    cur = vec![cur[0] / ph, cur[1] / pw, cur[2]];
                }
                LayerSpec::MaxPool1d { p } => {
                    if cur.len() != 2 || p == 0 || cur[0] < p {
                        return Err(bad(&cur));
                    }
                    cur = vec![cur[0] / p, cur[1]];
                }
                LayerSpec::Dense { inputs, units, .. } => {
                    if mult != 1 || cur != [inputs] {
                        return Err(bad(&cur));
                    }
                    cur = vec![units];
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => {}
                LayerSpec::Softmax => {
                    if mult != 1 || cur.len() != 1 {
                        return Err(bad(&cur));
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    if cur.last() != Some(&channels) {
                        return Err(bad(&cur));
                    }
                }
                LayerSpec::LstmStack { inputs, units, .. } => {
                    // Sequences arrive either time-folded from image stages
                    // (mult = T, sample [inputs]) or directly as [T, inputs].
                    // Both store batch*T rows of width `inputs`, so the stage
                    // records the folded view.
                    if mult >= 2 && cur == [inputs] {
                        // already folded
                    } else if mult == 1 && cur.len() == 2 && cur[0] >= 2 && cur[1] == inputs {
                        mult_in = cur[0];
                        in_sample = vec![inputs];
                    } else {
                        return Err(bad(&cur));
                    }
                    cur = vec![units];
                    mult = 1;
                }
                LayerSpec::Flatten => {
                    cur = vec![cur.iter().product()];
                }
            }
            stages.push(StageShape {
                in_sample,
                out_sample: cur.clone(),
                mult_in,
                mult_out: mult,
            });
        }
        Ok(Self {
            input: input.to_vec(),
            stages,
        })
    }

    /// Final per-sample output shape.
    pub fn output(&self) -> &[usize] {
        self.stages
            .last()
            .map(|s| s.out_sample.as_slice())
            .unwrap_or(&self.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_stack() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 16,
                kh: 3,
                kw: 3,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Conv2d {
                in_ch: 16,
                out_ch: 32,
                kh: 3,
                kw: 3,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: 32 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { ph: 2, pw: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 288,
                units: 64,
                l2: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 64,
                units: 13,
                l2: true,
            },
            LayerSpec::Softmax,
        ]
    }

    #[test]
    fn image_shapes_flow_to_288_flat() {
        let shapes = ArchShapes::infer(&image_stack(), &[19, 19, 1]).unwrap();
        assert_eq!(shapes.stages[0].out_sample, vec![17, 17, 16]);
        assert_eq!(shapes.stages[3].out_sample, vec![8, 8, 16]);
        assert_eq!(shapes.stages[4].out_sample, vec![6, 6, 32]);
        assert_eq!(shapes.stages[7].out_sample, vec![3, 3, 32]);
        assert_eq!(shapes.stages[8].out_sample, vec![288]);
        assert_eq!(shapes.output(), &[13]);
    }

    #[test]
    fn time_axis_folds_until_lstm() {
        let mut specs = image_stack();
        specs.insert(
            9,
            LayerSpec::LstmStack {
                layers: 3,
                units: 10,
                inputs: 288,
            },
        );
        // FC-1 now consumes the LSTM output.
        specs[10] = LayerSpec::Dense {
            inputs: 10,
            units: 64,
            l2: true,
        };
        let shapes = ArchShapes::infer(&specs, &[10, 19, 19, 1]).unwrap();
        assert_eq!(shapes.stages[0].mult_in, 10);
        assert_eq!(shapes.stages[8].mult_out, 10);
        assert_eq!(shapes.stages[9].mult_out, 1);
        assert_eq!(shapes.stages[9].out_sample, vec![10]);
        assert_eq!(shapes.output(), &[13]);
    }

    #[test]
    fn lstm_accepts_direct_sequence_input() {
        let specs = vec![
            LayerSpec::LstmStack {
                layers: 2,
                units: 3,
                inputs: 4,
            },
            LayerSpec::Dense {
                inputs: 3,
                units: 2,
                l2: false,
            },
            LayerSpec::Softmax,
        ];
        let shapes = ArchShapes::infer(&specs, &[5, 4]).unwrap();
        assert_eq!(shapes.stages[0].mult_in, 5);
        assert_eq!(shapes.stages[0].in_sample, vec![4]);
        assert_eq!(shapes.stages[0].mult_out, 1);
        assert_eq!(shapes.output(), &[2]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let specs = vec![LayerSpec::Dense {
            inputs: 5,
            units: 2,
            l2: false,
        }];
        let err = ArchShapes::infer(&specs, &[4]).unwrap_err();
        assert!(matches!(err, NnError::BadLayerInput { layer: 0, .. }));
    }

    #[test]
    fn pool_drops_trailing_rows() {
        let specs = vec![LayerSpec::MaxPool2d { ph: 2, pw: 2 }];
        let shapes = ArchShapes::infer(&specs, &[17, 17, 16]).unwrap();
        assert_eq!(shapes.output(), &[8, 8, 16]);
    }
}
