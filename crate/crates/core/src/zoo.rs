//! Ready-made architectures for framewise note detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, Network, Padding};

/// Number of playable piano keys, MIDI 21 through 108.
pub const N_KEYS: usize = 88;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    LogReg,
    Shallow,
    #[serde(rename = "DNN")]
    Dnn,
    ConvNet,
    AllConv,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::LogReg,
        ModelKind::Shallow,
        ModelKind::Dnn,
        ModelKind::ConvNet,
        ModelKind::AllConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LogReg => "LogReg",
            ModelKind::Shallow => "Shallow",
            ModelKind::Dnn => "DNN",
            ModelKind::ConvNet => "ConvNet",
            ModelKind::AllConv => "AllConv",
        }
    }

    pub fn is_convolutional(self) -> bool {
        matches!(self, ModelKind::ConvNet | ModelKind::AllConv)
    }

    pub fn default_context(self) -> usize {
        if self.is_convolutional() {
            5
        } else {
            1
        }
    }

    /// Reference parameter counts at 229 input bins.
    pub fn reference_param_count(self) -> Option<usize> {
        match self {
            ModelKind::Dnn => Some(691_288),
            ModelKind::ConvNet => Some(1_877_880),
            ModelKind::AllConv => Some(284_544),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model class '{s}'")))
    }
}

fn default_width() -> usize {
    512
}

/// Architecture selector. `batch_norm` and `dropout` only affect the two
/// probe models (`LogReg`, `Shallow`); the deep models have fixed stacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelClass {
    pub kind: ModelKind,
    pub input_bins: usize,
    #[serde(default)]
    pub context_frames: Option<usize>,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout: Option<f64>,
}

impl ModelClass {
    pub fn new(kind: ModelKind, input_bins: usize) -> Self {
        Self {
            kind,
            input_bins,
            context_frames: None,
            hidden_width: default_width(),
            batch_norm: false,
            dropout: None,
        }
    }

    pub fn context(&self) -> usize {
        self.context_frames.unwrap_or_else(|| self.kind.default_context())
    }

    /// Per-sample input shape `(1, context, bins)`.
    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.context(), self.input_bins]
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = self.context();
        if self.input_bins == 0 {
            return Err(Error::Config("model needs at least one input bin".into()));
        }
        if ctx.is_multiple_of(2) {
            return Err(Error::Config(format!("context frames must be odd, got {ctx}")));
        }
        if self.kind.is_convolutional() && ctx != 5 {
            return Err(Error::Config(format!(
                "{} expects 5 context frames, got {ctx}",
                self.kind
            )));
        }
        if self.kind == ModelKind::Shallow && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        use Activation::{Identity, Logistic, Relu};
        let drop = |p: f64| LayerSpec::Dropout { p };
        let act = |a| LayerSpec::Activation { activation: a };
        let valid = [Padding::Valid, Padding::Valid];
        let mut l = Vec::new();
        match self.kind {
            ModelKind::LogReg => {
                if let Some(p) = self.dropout {
                    l.push(drop(p));
                }
                l.push(LayerSpec::dense(N_KEYS, Logistic));
            }
            ModelKind::Shallow => {
                if self.batch_norm {
                    l.extend([LayerSpec::dense(self.hidden_width, Identity), LayerSpec::BatchNorm, act(Relu)]);
                } else {
                    l.push(LayerSpec::dense(self.hidden_width, Relu));
                }
                if let Some(p) = self.dropout {
                    l.push(drop(p));
                }
                l.push(LayerSpec::dense(N_KEYS, Logistic));
            }
            ModelKind::Dnn => {
                l.push(drop(0.1));
                for _ in 0..3 {
                    l.extend([LayerSpec::dense(512, Identity), LayerSpec::BatchNorm, act(Relu), drop(0.25)]);
                }
                l.push(LayerSpec::dense(N_KEYS, Logistic));
            }
            ModelKind::ConvNet => {
                l.extend([
                    LayerSpec::conv(32, [3, 3], [Padding::Same, Padding::Valid], Relu),
                    LayerSpec::conv(32, [3, 3], valid, Identity),
                    LayerSpec::BatchNorm,
                    act(Relu),
                    LayerSpec::MaxPool { window: [1, 2] },
                    drop(0.25),
                    LayerSpec::conv(64, [3, 3], valid, Relu),
                    LayerSpec::MaxPool { window: [1, 2] },
                    drop(0.25),
                    LayerSpec::dense(512, Relu),
                    drop(0.5),
                    LayerSpec::dense(N_KEYS, Logistic),
                ]);
            }
            ModelKind::AllConv => {
                let conv_bn = |f: usize, k: [usize; 2]| {
                    [LayerSpec::conv(f, k, valid, Identity), LayerSpec::BatchNorm, act(Relu)]
                };
                l.push(LayerSpec::conv(32, [3, 3], valid, Relu));
                l.extend(conv_bn(32, [3, 3]));
                l.extend([LayerSpec::MaxPool { window: [1, 2] }, drop(0.25)]);
                l.extend(conv_bn(32, [1, 3]));
                l.extend(conv_bn(32, [1, 3]));
                l.extend([LayerSpec::MaxPool { window: [1, 2] }, drop(0.25)]);
                l.extend(conv_bn(64, [1, 25]));
                l.extend(conv_bn(128, [1, 25]));
                l.extend([
                    drop(0.5),
                    LayerSpec::conv(N_KEYS, [1, 1], valid, Identity),
                    LayerSpec::BatchNorm,
                    LayerSpec::GlobalAvgPool,
                    act(Logistic),
                ]);
            }
        }
        l
    }

    /// Builds the network with all weights at zero; call `init_params` next.
    pub fn build(&self) -> Result<Network> {
        self.validate()?;
        Network::new(&self.input_shape(), self.layers())
            .map_err(|e| Error::Config(format!("{} with {} bins: {e}", self.kind, self.input_bins)))
    }
}

pub fn param_count(net: &Network) -> usize {
    net.param_count()
}
