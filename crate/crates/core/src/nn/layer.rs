use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Logistic,
    Tanh,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Relu => a.max(0.0),
            Activation::Logistic => logistic(a),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Logistic => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    /// (output length, zeros before) for a stride-1 convolution.
    pub fn resolve(self, input: usize, kernel: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Valid => (input >= kernel).then(|| (input - kernel + 1, 0)),
            Padding::Same => Some((input, (kernel - 1) / 2)),
        }
    }
}

/// One layer of a network. Dense layers flatten any per-sample input shape;
/// convolution and pooling layers expect `(channels, time, freq)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        /// (time, freq) extent.
        kernel: [usize; 2],
        /// (time, freq) padding.
        padding: [Padding; 2],
        activation: Activation,
    },
    MaxPool {
        /// (time, freq) window; stride equals the window, remainders are dropped.
        window: [usize; 2],
    },
    GlobalAvgPool,
    BatchNorm,
    Dropout {
        p: f64,
    },
    Activation {
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn conv(filters: usize, kernel: [usize; 2], padding: [Padding; 2], activation: Activation) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            padding,
            activation,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::MaxPool { .. } => "MaxPool",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::BatchNorm => "BatchNorm",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Activation { .. } => "Activation",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { units: 0, .. } => {
                Err(Error::Config("dense layer needs at least one unit".into()))
            }
            LayerSpec::Conv2d {
                filters, kernel, ..
            } if filters == 0 || kernel.contains(&0) => Err(Error::Config(
                "convolution needs positive filter count and kernel extent".into(),
            )),
            LayerSpec::MaxPool { window } if window.contains(&0) => {
                Err(Error::Config("pool window must be at least 1".into()))
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            ))),
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Config(format!(
                    "{what} expects (channels, time, freq) input, got {input:?}"
                ))),
            }
        };
        match *self {
            LayerSpec::Dense { units, .. } => Ok(vec![units]),
            LayerSpec::Conv2d {
                filters,
                kernel,
                padding,
                ..
            } => {
                let (_, h, w) = spatial("Conv2d")?;
                let (ho, _) = padding[0].resolve(h, kernel[0]).ok_or_else(|| {
                    Error::Config(format!("time extent {h} smaller than kernel {}", kernel[0]))
                })?;
                let (wo, _) = padding[1].resolve(w, kernel[1]).ok_or_else(|| {
                    Error::Config(format!("freq extent {w} smaller than kernel {}", kernel[1]))
                })?;
                Ok(vec![filters, ho, wo])
            }
            LayerSpec::MaxPool { window } => {
                let (c, h, w) = spatial("MaxPool")?;
                let (ho, wo) = (h / window[0], w / window[1]);
                if ho == 0 || wo == 0 {
                    return Err(Error::Config(format!(
                        "pool window {window:?} larger than input {input:?}"
                    )));
                }
                Ok(vec![c, ho, wo])
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = spatial("GlobalAvgPool")?;
                Ok(vec![c])
            }
            LayerSpec::BatchNorm | LayerSpec::Dropout { .. } | LayerSpec::Activation { .. } => {
                Ok(input.to_vec())
            }
        }
    }

    /// Shapes of the trainable parameters, in enumeration order.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units, .. } => {
                vec![vec![units, input.iter().product()], vec![units]]
            }
            LayerSpec::Conv2d {
                filters, kernel, ..
            } => vec![vec![filters, input[0], kernel[0], kernel[1]], vec![filters]],
            LayerSpec::BatchNorm => {
                let f = input[0];
                vec![vec![f], vec![f]]
            }
            _ => Vec::new(),
        }
    }

    /// (fan_in, fan_out) used by the uniform initializer.
    pub fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { units, .. } => Some((input.iter().product(), units)),
            LayerSpec::Conv2d {
                filters, kernel, ..
            } => {
                let k = kernel[0] * kernel[1];
                Some((input[0] * k, filters * k))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let conv = LayerSpec::conv(32, [3, 3], [Padding::Valid; 2], Activation::Relu);
        assert_eq!(conv.output_shape(&[1, 5, 229]).unwrap(), vec![32, 3, 227]);
        let same = LayerSpec::conv(32, [3, 3], [Padding::Same, Padding::Valid], Activation::Relu);
        assert_eq!(same.output_shape(&[1, 5, 229]).unwrap(), vec![32, 5, 227]);
        let pool = LayerSpec::MaxPool { window: [1, 2] };
        assert_eq!(pool.output_shape(&[32, 1, 225]).unwrap(), vec![32, 1, 112]);
        assert!(LayerSpec::GlobalAvgPool.output_shape(&[10]).is_err());
        assert!(conv.output_shape(&[1, 2, 229]).is_err());
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
    }

    #[test]
    fn activations() {
        let relu: Vec<f64> = [-1.0, 0.0, 2.0].iter().map(|&a| Activation::Relu.apply(a)).collect();
        assert_eq!(relu, vec![0.0, 0.0, 2.0]);
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
        assert!((Activation::Tanh.apply(0.5) - 0.5f64.tanh()).abs() < 1e-15);
    }
}
