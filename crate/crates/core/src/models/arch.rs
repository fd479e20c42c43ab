use serde::{Deserialize, Serialize};

use crate::error::{MpbmError, Result};

/// One layer of a feature-extractor stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    Flatten,
    Affine {
        out: usize,
    },
    Relu,
    Tanh,
}

/// Serializable description of a prediction model, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Per-instance input shape, e.g. `[2]` or `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// Two conv+pool blocks followed by one affine layer of width `d`.
    pub fn lenet_small(input_shape: &[usize], d: usize, num_classes: usize) -> Self {
        Architecture {
            name: "lenet-small".into(),
            input_shape: input_shape.to_vec(),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 5,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Affine { out: d },
                LayerSpec::Relu,
            ],
            num_classes,
        }
    }

    /// Affine/tanh stack for vector inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], d: usize, num_classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden.iter().chain(std::iter::once(&d)) {
            layers.push(LayerSpec::Affine { out: h });
            layers.push(LayerSpec::Tanh);
        }
        Architecture {
            name: "mlp".into(),
            input_shape: vec![input_dim],
            layers,
            num_classes,
        }
    }

    /// Resolve a preset by name.
    pub fn preset(
        name: &str,
        input_shape: &[usize],
        d: usize,
        hidden: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        match name {
            "lenet-small" => Ok(Self::lenet_small(input_shape, d, num_classes)),
            "mlp" => {
                let &[dim] = input_shape else {
                    return Err(MpbmError::config(
                        "architecture",
                        format!("mlp needs vector inputs, got shape {input_shape:?}"),
                    ));
                };
                Ok(Self::mlp(dim, hidden, d, num_classes))
            }
            other => Err(MpbmError::config(
                "architecture",
                format!("unknown architecture `{other}` (expected lenet-small or mlp)"),
            )),
        }
    }

    /// Per-instance shapes after each layer; the last entry is `[d]`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        padding,
                    },
                    &[_, h, w],
                ) if h + 2 * padding >= *kernel && w + 2 * padding >= *kernel => vec![
                    *out_channels,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ],
                (LayerSpec::MaxPool { size }, &[c, h, w]) if *size > 0 && h >= *size && w >= *size => {
                    vec![c, h / size, w / size]
                }
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Affine { out }, &[_]) => vec![*out],
                (LayerSpec::Relu | LayerSpec::Tanh, s) => s.to_vec(),
                (layer, s) => {
                    return Err(MpbmError::shape(
                        "architecture",
                        format!("layer {i} ({layer:?}) cannot take input shape {s:?}"),
                    ))
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Feature dimension `d`.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        match shapes.last().map(Vec::as_slice) {
            Some(&[d]) => Ok(d),
            Some(s) => Err(MpbmError::shape(
                "architecture",
                format!("extractor must end in a vector, ends in {s:?}"),
            )),
            None => match self.input_shape.as_slice() {
                &[d] => Ok(d),
                s => Err(MpbmError::shape("architecture", format!("empty stack on {s:?}"))),
            },
        }
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| self.name.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_shapes() {
        let a = Architecture::lenet_small(&[3, 32, 32], 84, 10);
        let s = a.shapes().unwrap();
        assert_eq!(s[2], vec![6, 14, 14]);
        assert_eq!(s[5], vec![16, 5, 5]);
        assert_eq!(s[6], vec![400]);
        assert_eq!(a.feature_dim().unwrap(), 84);
    }

    #[test]
    fn bad_shapes() {
        let a = Architecture::lenet_small(&[2], 84, 10);
        assert!(a.shapes().is_err());
        assert!(Architecture::preset("mlp", &[1, 28, 28], 8, &[], 10).is_err());
        assert!(Architecture::preset("resnet18", &[2], 8, &[], 2).is_err());
    }

    #[test]
    fn json_descriptor() {
        let a = Architecture::mlp(2, &[16], 8, 3);
        let back: Architecture = serde_json::from_str(&a.describe()).unwrap();
        assert_eq!(a, back);
    }
}
