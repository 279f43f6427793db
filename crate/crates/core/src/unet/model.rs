use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::shape::{compute_output_shape, ConvSpec, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Instantiated network: one `(weight, bias)` pair per entry of the layer
/// plan, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel<T> {
    config: UNetConfig,
    layers: Vec<ConvSpec>,
    /// `[w0, b0, w1, b1, ...]`.
    params: Vec<Tensor<T>>,
}

/// Handles produced by recording a forward pass into a graph.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Post-sigmoid probabilities, shape `(out_channels, d', w', h')`.
    pub output: Var,
    /// Parameter leaves in the model's parameter order.
    pub params: Vec<Var>,
}

impl Recorded {
    /// Pulls the parameter gradients out of `grads` in model order.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.params
            .iter()
            .map(|v| {
                grads
                    .take(*v)
                    .ok_or_else(|| Error::Graph("missing parameter gradient".into()))
            })
            .collect()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`, `fan_in = c_in * k^3`) and
/// zero biases, drawn from a ChaCha8 stream seeded with `seed`.
pub fn init_weights<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<UNetModel<T>> {
    config.validate()?;
    let layers = config.layer_plan();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layers.len() * 2);
    for l in &layers {
        let fan_in = (l.cin * l.k.pow(3)) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = l.cout * l.cin * l.k.pow(3);
        let w: Vec<T> = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
        params.push(Tensor::new(vec![l.cout, l.cin, l.k, l.k, l.k], w)?);
        params.push(Tensor::zeros(vec![l.cout]));
    }
    Ok(UNetModel {
        config: *config,
        layers,
        params,
    })
}

impl<T: Scalar> UNetModel<T> {
    /// Wraps an existing parameter list, checking every shape against the plan.
    pub fn from_parameters(config: &UNetConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_plan();
        if params.len() != 2 * layers.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (l, pair) in layers.iter().zip(params.chunks(2)) {
            if pair[0].shape() != [l.cout, l.cin, l.k, l.k, l.k] || pair[1].shape() != [l.cout] {
                return Err(Error::Shape(format!(
                    "{}: parameter shapes {:?} / {:?} do not match the plan",
                    l.name,
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        Ok(UNetModel {
            config: *config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Records the forward pass of `input` (a `(in_channels, d, w, h)` node)
    /// into `g`. Parameters become trainable leaves when `trainable` is set.
    pub fn record(&self, g: &mut Graph<T>, input: Var, trainable: bool) -> Result<Recorded> {
        let x = g.value(input);
        let spatial = x.spatial()?;
        if x.channels()? != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels,
                x.channels()?
            )));
        }
        compute_output_shape(spatial, &self.config)?;

        let mut pvars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            pvars.push(if trainable {
                g.param(p.clone())
            } else {
                g.input(p.clone())
            });
        }
        let mut layer = 0;
        let mut conv = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let l = &self.layers[layer];
            let y = g.conv3d(x, pvars[2 * layer], pvars[2 * layer + 1], l.padding)?;
            layer += 1;
            Ok(y)
        };

        let levels = self.config.levels;
        let mut h = input;
        let mut skips = Vec::with_capacity(levels - 1);
        for level in 1..=levels {
            h = conv(g, h)?;
            h = g.relu(h);
            h = conv(g, h)?;
            h = g.relu(h);
            if level < levels {
                skips.push(h);
                h = g.maxpool3d(h)?;
            }
        }
        for _ in (1..levels).rev() {
            let up = g.upsample3d(h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_crop(skip, up)?;
            h = conv(g, h)?;
            h = g.relu(h);
            h = conv(g, h)?;
            h = g.relu(h);
        }
        h = conv(g, h)?;
        let output = g.sigmoid(h);
        Ok(Recorded {
            output,
            params: pvars,
        })
    }

    /// Probabilities for one patch, without recording gradients.
    pub fn forward(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(patch.clone());
        let r = self.record(&mut g, x, false)?;
        let out = g.value(r.output).clone();
        Ok(out)
    }
}
