//! Network architecture description and shape checking.
//!
//! A network is a shared trunk feeding two heads: the target head (binary
//! starved-vs-large) and the source head (source-category classification).
//! The source head may be absent, e.g. in a deployed model or a baseline that
//! never sees source data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index of the starved (positive) target class.
pub const STARVED_CLASS: usize = 1;
/// Class index of the large (negative) target class.
pub const LARGE_CLASS: usize = 0;
/// Number of target classes.
pub const TARGET_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatShape::Map { c, h, w } => c * h * w,
            FeatShape::Flat(n) => n,
        }
    }
}

impl Layer {
    /// Output shape for a given input shape, or why the pairing is invalid.
    pub fn output_shape(&self, input: FeatShape) -> Result<FeatShape> {
        match (*self, input) {
            (
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                },
                FeatShape::Map { h, w, .. },
            ) => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidSpec(
                        "conv needs positive channels, kernel and stride".to_string(),
                    ));
                }
                if h < kernel || w < kernel {
                    return Err(Error::InvalidSpec(format!(
                        "conv kernel {kernel} exceeds input {h}x{w}"
                    )));
                }
                Ok(FeatShape::Map {
                    c: out_channels,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                })
            }
            (Layer::Relu, any) => Ok(any),
            (Layer::MaxPool { window }, FeatShape::Map { c, h, w }) => {
                if window == 0 {
                    return Err(Error::InvalidSpec("maxpool window must be > 0".to_string()));
                }
                if h < window || w < window {
                    return Err(Error::InvalidSpec(format!(
                        "maxpool window {window} exceeds input {h}x{w}"
                    )));
                }
                Ok(FeatShape::Map {
                    c,
                    h: h / window,
                    w: w / window,
                })
            }
            (Layer::Flatten, FeatShape::Map { c, h, w }) => Ok(FeatShape::Flat(c * h * w)),
            (Layer::Dense { units }, FeatShape::Flat(_)) => {
                if units == 0 {
                    return Err(Error::InvalidSpec("dense needs units > 0".to_string()));
                }
                Ok(FeatShape::Flat(units))
            }
            (layer, shape) => Err(Error::InvalidSpec(format!(
                "layer {layer:?} cannot follow activation shape {shape:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Target,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input patch size (H, W); inputs are single-channel.
    pub input: (usize, usize),
    pub trunk: Vec<Layer>,
    pub target_head: Vec<Layer>,
    /// Empty when the model has no source task.
    #[serde(default)]
    pub source_head: Vec<Layer>,
}

impl NetworkSpec {
    pub fn input_shape(&self) -> FeatShape {
        FeatShape::Map {
            c: 1,
            h: self.input.0,
            w: self.input.1,
        }
    }

    fn chain(&self, layers: &[Layer], mut shape: FeatShape) -> Result<FeatShape> {
        for layer in layers {
            shape = layer.output_shape(shape)?;
        }
        Ok(shape)
    }

    /// Activation shape at the trunk output.
    pub fn trunk_output(&self) -> Result<FeatShape> {
        self.chain(&self.trunk, self.input_shape())
    }

    pub fn head(&self, head: HeadKind) -> &[Layer] {
        match head {
            HeadKind::Target => &self.target_head,
            HeadKind::Source => &self.source_head,
        }
    }

    /// Logit count of a head.
    pub fn head_output_units(&self, head: HeadKind) -> Result<usize> {
        let layers = self.head(head);
        if layers.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "network has no {head:?} head"
            )));
        }
        match self.chain(layers, self.trunk_output()?)? {
            FeatShape::Flat(n) => Ok(n),
            other => Err(Error::InvalidSpec(format!(
                "{head:?} head must end flat, ends {other:?}"
            ))),
        }
    }

    /// Check the whole spec: shapes chain, the target head ends in a 2-unit
    /// dense layer, and the source head (when present) ends in a dense layer.
    pub fn validate(&self) -> Result<()> {
        if self.input.0 == 0 || self.input.1 == 0 {
            return Err(Error::InvalidSpec("input size must be positive".to_string()));
        }
        let trunk_out = self.trunk_output()?;
        if self.target_head.is_empty() {
            return Err(Error::InvalidSpec("target head is required".to_string()));
        }
        match self.target_head.last() {
            Some(Layer::Dense { units: TARGET_CLASSES }) => {}
            other => {
                return Err(Error::InvalidSpec(format!(
                    "target head must end in dense{{2}}, ends {other:?}"
                )));
            }
        }
        self.chain(&self.target_head, trunk_out)?;
        if !self.source_head.is_empty() {
            match self.source_head.last() {
                Some(Layer::Dense { .. }) => {}
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "source head must end in a dense layer, ends {other:?}"
                    )));
                }
            }
            self.chain(&self.source_head, trunk_out)?;
        }
        Ok(())
    }

    /// Copy of this spec without its source head (the deployed form).
    pub fn without_source_head(&self) -> NetworkSpec {
        NetworkSpec {
            input: self.input,
            trunk: self.trunk.clone(),
            target_head: self.target_head.clone(),
            source_head: Vec::new(),
        }
    }
}

/// Assemble a spec from a trunk and a shared head stem; each head gets the
/// stem plus its own final dense layer.
pub fn build_spec(
    input: (usize, usize),
    trunk: Vec<Layer>,
    head_stem: Vec<Layer>,
    source_classes: Option<usize>,
) -> NetworkSpec {
    let mut target_head = head_stem.clone();
    target_head.push(Layer::Dense {
        units: TARGET_CLASSES,
    });
    let source_head = match source_classes {
        Some(k) => {
            let mut h = head_stem;
            h.push(Layer::Dense { units: k });
            h
        }
        None => Vec::new(),
    };
    NetworkSpec {
        input,
        trunk,
        target_head,
        source_head,
    }
}

/// Named architectures accepted by experiment configs.
///
/// `default`: conv8/5 - pool2 - conv16/5 - pool2 trunk, dense-64 head stems.
/// `compact`: a stride-3 first conv and smaller stems, for quick CPU runs.
pub fn named_spec(
    name: &str,
    input: (usize, usize),
    source_classes: Option<usize>,
) -> Result<NetworkSpec> {
    match name {
        "default" => Ok(build_spec(
            input,
            vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 5,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
            ],
            vec![
                Layer::Flatten,
                Layer::Dense { units: 64 },
                Layer::Relu,
            ],
            source_classes,
        )),
        "compact" => Ok(build_spec(
            input,
            vec![
                Layer::Conv {
                    out_channels: 6,
                    kernel: 5,
                    stride: 3,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Conv {
                    out_channels: 12,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
            ],
            vec![
                Layer::Flatten,
                Layer::Dense { units: 32 },
                Layer::Relu,
            ],
            source_classes,
        )),
        other => Err(Error::InvalidSpec(format!(
            "unknown network name `{other}` (expected `default` or `compact`)"
        ))),
    }
}
