//! Symbolic shape propagation through the layer plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Padding;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Resolution levels, counting the bottleneck.
    pub levels: usize,
    /// Feature maps after the first level's convolutions.
    pub base_channels: usize,
    /// The first `valid_levels` levels (on both paths) use unpadded convs.
    pub valid_levels: usize,
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::desk()
    }
}

impl UNetConfig {
    /// 5 levels, 16 base feature maps, unpadded convs in the first 3 levels,
    /// 252³ input.
    pub fn full() -> Self {
        UNetConfig {
            levels: 5,
            base_channels: 16,
            valid_levels: 3,
            input_shape: [252; 3],
            in_channels: 1,
            out_channels: 1,
        }
    }

    /// 3 levels, 8 base feature maps, all levels unpadded, 68³ input.
    pub fn desk() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 8,
            valid_levels: 3,
            input_shape: [68; 3],
            in_channels: 1,
            out_channels: 1,
        }
    }

    /// Channels carried by resolution level `level` (1-based).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn padding_at(&self, level: usize) -> Padding {
        if level <= self.valid_levels {
            Padding::Valid
        } else {
            Padding::Same
        }
    }

    /// Checks the hyperparameter invariants and the input shape.
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.valid_levels > self.levels {
            return Err(Error::Config(format!(
                "valid_levels {} exceeds levels {}",
                self.valid_levels, self.levels
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        match validate_input_shape(self.input_shape, self) {
            ShapeCheck::Valid { .. } => Ok(()),
            ShapeCheck::Invalid { layer, reason } => Err(Error::Shape(format!(
                "input {:?} rejected at {layer}: {reason}",
                self.input_shape
            ))),
        }
    }

    /// Conv layers in execution order.
    pub fn layer_plan(&self) -> Vec<ConvSpec> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for level in 1..=self.levels {
            let c = self.channels_at(level);
            let p = self.padding_at(level);
            plan.push(ConvSpec::new(format!("enc{level}.conv1"), prev, c, 3, p));
            plan.push(ConvSpec::new(format!("enc{level}.conv2"), c, c, 3, p));
            prev = c;
        }
        for level in (1..self.levels).rev() {
            let c = self.channels_at(level);
            let p = self.padding_at(level);
            plan.push(ConvSpec::new(format!("dec{level}.conv1"), c + self.channels_at(level + 1), c, 3, p));
            plan.push(ConvSpec::new(format!("dec{level}.conv2"), c, c, 3, p));
        }
        plan.push(ConvSpec::new(
            "final".into(),
            self.base_channels,
            self.out_channels,
            1,
            Padding::Same,
        ));
        plan
    }

    /// Closed-form parameter count: weights `cin·cout·k³` plus `cout` biases per conv.
    pub fn parameter_count(&self) -> usize {
        self.layer_plan()
            .iter()
            .map(|l| l.cin * l.cout * l.k.pow(3) + l.cout)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: Padding,
}

impl ConvSpec {
    fn new(name: String, cin: usize, cout: usize, k: usize, padding: Padding) -> Self {
        ConvSpec {
            name,
            cin,
            cout,
            k,
            padding,
        }
    }
}

/// One stored forward activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activation {
    pub name: String,
    pub channels: usize,
    pub spatial: [usize; 3],
}

impl Activation {
    pub fn elements(&self) -> usize {
        self.channels * self.spatial.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeCheck {
    Valid {
        output: [usize; 3],
        margin: [usize; 3],
    },
    Invalid {
        layer: String,
        reason: String,
    },
}

impl ShapeCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, ShapeCheck::Valid { .. })
    }
}

/// How strictly pooling and cropping are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Rules {
    /// Pooled extents must be even and crop differences even.
    Strict,
    /// Pooling floors odd extents and cropping rounds the offset down; only
    /// used to size a hypothetical reference network.
    Floor,
}

pub(crate) struct Trace {
    pub activations: Vec<Activation>,
    pub output: [usize; 3],
}

fn fail(layer: &str, reason: String) -> (String, String) {
    (layer.to_string(), reason)
}

pub(crate) fn propagate(
    config: &UNetConfig,
    input: [usize; 3],
    rules: Rules,
) -> std::result::Result<Trace, (String, String)> {
    let mut acts = vec![Activation {
        name: "input".into(),
        channels: config.in_channels,
        spatial: input,
    }];
    let push = |acts: &mut Vec<Activation>, name: String, channels, spatial| {
        acts.push(Activation {
            name,
            channels,
            spatial,
        })
    };
    if input.iter().any(|s| *s == 0) {
        return Err(fail("input", format!("zero extent {input:?}")));
    }
    let mut s = input;
    let mut skips = Vec::new();
    let conv = |s: [usize; 3], p: Padding, layer: &str| -> std::result::Result<[usize; 3], (String, String)> {
        match p {
            Padding::Same => Ok(s),
            Padding::Valid => {
                if s.iter().any(|e| *e < 3) {
                    Err(fail(layer, format!("extent {s:?} smaller than the 3-wide kernel")))
                } else {
                    Ok([s[0] - 2, s[1] - 2, s[2] - 2])
                }
            }
        }
    };
    for level in 1..=config.levels {
        let c = config.channels_at(level);
        let p = config.padding_at(level);
        for j in 1..=2 {
            let name = format!("enc{level}.conv{j}");
            s = conv(s, p, &name)?;
            push(&mut acts, name.clone(), c, s);
            push(&mut acts, format!("{name}.relu"), c, s);
        }
        if level < config.levels {
            let name = format!("enc{level}.pool");
            if rules == Rules::Strict && s.iter().any(|e| e % 2 != 0) {
                return Err(fail(&name, format!("odd extent {s:?} cannot be pooled by 2")));
            }
            if s.iter().any(|e| *e < 2) {
                return Err(fail(&name, format!("extent {s:?} too small to pool")));
            }
            skips.push(s);
            s = [s[0] / 2, s[1] / 2, s[2] / 2];
            push(&mut acts, name, c, s);
        }
    }
    for level in (1..config.levels).rev() {
        let c = config.channels_at(level);
        let p = config.padding_at(level);
        s = [s[0] * 2, s[1] * 2, s[2] * 2];
        push(&mut acts, format!("dec{level}.upsample"), config.channels_at(level + 1), s);
        let skip = skips[level - 1];
        let name = format!("dec{level}.concat");
        for a in 0..3 {
            if skip[a] < s[a] {
                if rules == Rules::Strict {
                    return Err(fail(&name, format!("skip {skip:?} smaller than upsampled {s:?}")));
                }
                s[a] = skip[a];
            }
            if rules == Rules::Strict && (skip[a] - s[a]) % 2 != 0 {
                return Err(fail(&name, format!("odd crop between skip {skip:?} and upsampled {s:?}")));
            }
        }
        push(&mut acts, name, c + config.channels_at(level + 1), s);
        for j in 1..=2 {
            let name = format!("dec{level}.conv{j}");
            s = conv(s, p, &name)?;
            push(&mut acts, name.clone(), c, s);
            push(&mut acts, format!("{name}.relu"), c, s);
        }
    }
    push(&mut acts, "final".into(), config.out_channels, s);
    push(&mut acts, "final.sigmoid".into(), config.out_channels, s);
    Ok(Trace {
        activations: acts,
        output: s,
    })
}

/// Propagates `shape` through the layer plan and reports the first layer
/// that cannot accept it.
pub fn validate_input_shape(shape: [usize; 3], config: &UNetConfig) -> ShapeCheck {
    match propagate(config, shape, Rules::Strict) {
        Ok(t) => {
            let margin = [
                (shape[0] - t.output[0]) / 2,
                (shape[1] - t.output[1]) / 2,
                (shape[2] - t.output[2]) / 2,
            ];
            ShapeCheck::Valid {
                output: t.output,
                margin,
            }
        }
        Err((layer, reason)) => ShapeCheck::Invalid { layer, reason },
    }
}

/// Output extents and per-side margin `(input - output) / 2`.
pub fn compute_output_shape(shape: [usize; 3], config: &UNetConfig) -> Result<([usize; 3], [usize; 3])> {
    match validate_input_shape(shape, config) {
        ShapeCheck::Valid { output, margin } => Ok((output, margin)),
        ShapeCheck::Invalid { layer, reason } => Err(Error::Shape(format!(
            "input {shape:?} rejected at {layer}: {reason}"
        ))),
    }
}

/// Activation memory of a network and of its all-zero-padded counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEstimate {
    /// Bytes of stored forward activations (4 bytes per element).
    pub bytes: u64,
    /// Same quantity for the configuration with `valid_levels = 0`.
    pub reference_bytes: u64,
    /// `bytes / reference_bytes`.
    pub ratio: f64,
    /// True when the reference only propagates with floored pooling.
    pub reference_floored: bool,
}

impl MemoryEstimate {
    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

/// Sums every feature map kept for the backward pass (conv and ReLU
/// outputs, pooled, upsampled and concatenated maps, the input, the final
/// logits and probabilities) at 4 bytes per element. Optimizer state,
/// parameters and scratch buffers are not counted.
///
/// The all-padded reference uses the same input size. When that size does
/// not pool evenly through the reference network (252 is not a multiple of
/// 16), pooling floors odd extents and skip crops round down, which is what
/// a framework max-pool does.
pub fn estimate_activation_memory(config: &UNetConfig, input_shape: [usize; 3]) -> Result<MemoryEstimate> {
    let own = propagate(config, input_shape, Rules::Strict)
        .map_err(|(l, r)| Error::Shape(format!("input {input_shape:?} rejected at {l}: {r}")))?;
    let reference_cfg = UNetConfig {
        valid_levels: 0,
        ..*config
    };
    let (reference, floored) = match propagate(&reference_cfg, input_shape, Rules::Strict) {
        Ok(t) => (t, false),
        Err(_) => (
            propagate(&reference_cfg, input_shape, Rules::Floor)
                .map_err(|(l, r)| Error::Shape(format!("reference rejected at {l}: {r}")))?,
            true,
        ),
    };
    let bytes: u64 = own.activations.iter().map(|a| a.elements() as u64 * 4).sum();
    let reference_bytes: u64 = reference.activations.iter().map(|a| a.elements() as u64 * 4).sum();
    Ok(MemoryEstimate {
        bytes,
        reference_bytes,
        ratio: bytes as f64 / reference_bytes as f64,
        reference_floored: floored,
    })
}
