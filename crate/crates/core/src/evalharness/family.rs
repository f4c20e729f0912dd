use serde::{Deserialize, Serialize};

use crate::afferents::{GRID_COLS, GRID_ROWS};
use crate::drumsim::CLASSES;
use crate::nn::LayerSpec;
use crate::spectral::SPECTRUM_BINS;

/// Which afferent signal a model family consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Slow-adapting displacement images.
    Sa,
    /// Rapid-adapting displacement-change images.
    Ra,
    /// Vibration spectra.
    Vib,
}

/// The six classifier families: afferent channel crossed with encoding
/// (single image, image clip, or vibration spectrum), plus the
/// stretch-augmented spectrum variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    SaSe,
    RaSe,
    SaSte,
    RaSte,
    VibTe,
    VibTeAug,
}

/// All families in canonical report order.
pub const FAMILIES: [ModelFamily; 6] = [
    ModelFamily::SaSe,
    ModelFamily::RaSe,
    ModelFamily::SaSte,
    ModelFamily::RaSte,
    ModelFamily::VibTe,
    ModelFamily::VibTeAug,
];

impl ModelFamily {
    /// Stable lowercase identifier used in paths and flags.
    pub fn id(self) -> &'static str {
        match self {
            ModelFamily::SaSe => "sa-se",
            ModelFamily::RaSe => "ra-se",
            ModelFamily::SaSte => "sa-ste",
            ModelFamily::RaSte => "ra-ste",
            ModelFamily::VibTe => "vib-te",
            ModelFamily::VibTeAug => "vib-te-aug",
        }
    }

    /// Display name: afferent channel and encoding.
    pub fn label(self) -> &'static str {
        match self {
            ModelFamily::SaSe => "SA-SE",
            ModelFamily::RaSe => "RA-SE",
            ModelFamily::SaSte => "SA-STE",
            ModelFamily::RaSte => "RA-STE",
            ModelFamily::VibTe => "vib-TE",
            ModelFamily::VibTeAug => "vib-TE-aug",
        }
    }

    /// Parses an id or display name, ignoring case.
    pub fn parse(s: &str) -> Option<Self> {
        FAMILIES
            .into_iter()
            .find(|f| f.id().eq_ignore_ascii_case(s) || f.label().eq_ignore_ascii_case(s))
    }

    pub fn channel(self) -> Channel {
        match self {
            ModelFamily::SaSe | ModelFamily::SaSte => Channel::Sa,
            ModelFamily::RaSe | ModelFamily::RaSte => Channel::Ra,
            ModelFamily::VibTe | ModelFamily::VibTeAug => Channel::Vib,
        }
    }

    /// Whether training spectra get stretch-augmented copies.
    pub fn augmented(self) -> bool {
        self == ModelFamily::VibTeAug
    }

    /// Whether samples are clips of consecutive images rather than single
    /// images or spectra.
    pub fn clipped(self) -> bool {
        matches!(self, ModelFamily::SaSte | ModelFamily::RaSte)
    }

    /// Per-sample input shape fed to the network.
    pub fn input_shape(self, clip_len: usize) -> Vec<usize> {
        match self {
            ModelFamily::SaSe | ModelFamily::RaSe => vec![GRID_ROWS, GRID_COLS, 1],
            ModelFamily::SaSte | ModelFamily::RaSte => {
                vec![clip_len, GRID_ROWS, GRID_COLS, 1]
            }
            ModelFamily::VibTe | ModelFamily::VibTeAug => vec![SPECTRUM_BINS, 1],
        }
    }

    /// Values per sample.
    pub fn sample_volume(self, clip_len: usize) -> usize {
        self.input_shape(clip_len).iter().product()
    }

    /// Default network for the family's encoding. Independent of clip
    /// length: the conv stack runs per frame and the LSTM consumes any
    /// number of steps.
    pub fn architecture(self) -> Vec<LayerSpec> {
        self.architecture_with(DEFAULT_DROPOUTS)
    }

    /// Like [`architecture`](Self::architecture) but with explicit dropout
    /// rates: `[after the feature stack, after each of the two hidden
    /// dense layers]`.
    pub fn architecture_with(self, dropouts: [f64; 3]) -> Vec<LayerSpec> {
        match self {
            ModelFamily::SaSe | ModelFamily::RaSe => image_architecture(dropouts),
            ModelFamily::SaSte | ModelFamily::RaSte => clip_architecture(dropouts),
            ModelFamily::VibTe | ModelFamily::VibTeAug => spectrum_architecture(dropouts),
        }
    }

    /// Published accuracy on the physical sensor's recordings. Reference
    /// metadata only: reproducing these requires the original hardware and
    /// dataset, so they are printed beside synthetic results, never asserted.
    pub fn reference_accuracy(self) -> f64 {
        match self {
            ModelFamily::SaSe => 0.46,
            ModelFamily::RaSe => 0.53,
            ModelFamily::SaSte => 0.46,
            ModelFamily::RaSte => 0.70,
            ModelFamily::VibTe => 0.50,
            ModelFamily::VibTeAug => 0.90,
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Default dropout rates: feature stack, then the two hidden dense layers.
pub const DEFAULT_DROPOUTS: [f64; 3] = [0.4, 0.2, 0.2];

/// Shared classifier head: two regularized hidden layers onto 13 classes.
fn dense_head(inputs: usize, dropouts: [f64; 3]) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            inputs,
            units: 64,
            l2: true,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropouts[1] },
        LayerSpec::Dense {
            inputs: 64,
            units: 32,
            l2: true,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropouts[2] },
        LayerSpec::Dense {
            inputs: 32,
            units: CLASSES,
            l2: true,
        },
        LayerSpec::Softmax,
    ]
}

/// Two conv/pool stages over one 19x19 afferent image. Convolutions feed
/// batch norm, so they carry no bias. 19x19 -> 17x17 -> 8x8 -> 6x6 -> 3x3,
/// flattening to 3*3*32 = 288 features.
fn image_conv_stack() -> Vec<LayerSpec> {
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
    ]
}

/// Spatial-encoding network over a single afferent image.
fn image_architecture(dropouts: [f64; 3]) -> Vec<LayerSpec> {
    let mut specs = image_conv_stack();
    specs.push(LayerSpec::Dropout { rate: dropouts[0] });
    specs.push(LayerSpec::Flatten);
    specs.extend(dense_head(288, dropouts));
    specs
}

/// Spatio-temporal network over a clip of afferent images: the spatial
/// model's conv stack runs per frame, a three-layer LSTM consumes the
/// flattened per-frame features, and the final hidden state feeds the head.
fn clip_architecture(dropouts: [f64; 3]) -> Vec<LayerSpec> {
    let mut specs = image_conv_stack();
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::LstmStack {
        layers: 3,
        units: 10,
        inputs: 288,
    });
    specs.push(LayerSpec::Dropout { rate: dropouts[0] });
    specs.extend(dense_head(10, dropouts));
    specs
}

/// Temporal-encoding network over a 200-bin spectrum.
/// 200 -> 196 -> 98 -> 94 -> 47 positions, flattening to 47*32 = 1504.
fn spectrum_architecture(dropouts: [f64; 3]) -> Vec<LayerSpec> {
    let mut specs = vec![
        LayerSpec::Conv1d {
            in_ch: 1,
            out_ch: 16,
            k: 5,
            bias: false,
        },
        LayerSpec::BatchNorm { channels: 16 },
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { p: 2 },
        LayerSpec::Conv1d {
            in_ch: 16,
            out_ch: 32,
            k: 5,
            bias: false,
        },
        LayerSpec::BatchNorm { channels: 32 },
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { p: 2 },
        LayerSpec::Dropout { rate: dropouts[0] },
        LayerSpec::Flatten,
    ];
    specs.extend(dense_head(1504, dropouts));
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afferents::CLIP_LEN;
    use crate::nn::ArchShapes;

    #[test]
    fn ids_and_labels_are_unique_and_parse_back() {
        for f in FAMILIES {
            assert_eq!(ModelFamily::parse(f.id()), Some(f));
            assert_eq!(ModelFamily::parse(f.label()), Some(f));
            assert_eq!(ModelFamily::parse(&f.id().to_uppercase()), Some(f));
        }
        assert_eq!(ModelFamily::parse("sa"), None);
        let ids: std::collections::HashSet<_> = FAMILIES.iter().map(|f| f.id()).collect();
        assert_eq!(ids.len(), FAMILIES.len());
    }

    #[test]
    fn every_architecture_checks_out_against_its_input_shape() {
        for f in FAMILIES {
            let shapes =
                ArchShapes::infer(&f.architecture(), &f.input_shape(CLIP_LEN)).unwrap();
            assert_eq!(shapes.output(), &[CLASSES], "family {}", f.id());
        }
    }

    /// The image families share one conv stack; the clip families reuse it
    /// verbatim, which is what makes the LSTM input width 288.
    #[test]
    fn clip_network_reuses_the_image_conv_stack() {
        let image = ModelFamily::SaSe.architecture();
        let clip = ModelFamily::SaSte.architecture();
        assert_eq!(&image[..8], &clip[..8]);
        assert!(clip
            .iter()
            .any(|l| matches!(l, LayerSpec::LstmStack { inputs: 288, .. })));
    }

    #[test]
    fn dropout_rates_are_adjustable_and_default_as_documented() {
        for f in FAMILIES {
            assert_eq!(f.architecture(), f.architecture_with(DEFAULT_DROPOUTS));
            let rates: Vec<f64> = f
                .architecture_with([0.5, 0.1, 0.3])
                .iter()
                .filter_map(|l| match l {
                    LayerSpec::Dropout { rate } => Some(*rate),
                    _ => None,
                })
                .collect();
            assert_eq!(rates, [0.5, 0.1, 0.3], "family {}", f.id());
        }
    }

    #[test]
    fn channel_and_augmentation_follow_the_family() {
        assert_eq!(ModelFamily::SaSe.channel(), Channel::Sa);
        assert_eq!(ModelFamily::RaSte.channel(), Channel::Ra);
        assert_eq!(ModelFamily::VibTeAug.channel(), Channel::Vib);
        assert!(ModelFamily::VibTeAug.augmented());
        assert!(FAMILIES
            .iter()
            .filter(|f| f.augmented())
            .eq([&ModelFamily::VibTeAug]));
        assert!(ModelFamily::SaSte.clipped() && ModelFamily::RaSte.clipped());
        assert!(!ModelFamily::VibTe.clipped() && !ModelFamily::SaSe.clipped());
    }
}
