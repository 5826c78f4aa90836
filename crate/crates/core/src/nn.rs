//! Dense multilayer perceptrons on top of [`crate::grad`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// On-disk layer layout: `W` is a list of `in` rows of length `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseJson {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Self {
            w: Tensor::from_raw(vec![fan_in, fan_out], w),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    pub fn to_json(&self) -> DenseJson {
        DenseJson {
            w: self.w.to_rows(),
            b: self.b.data().to_vec(),
        }
    }

    pub fn from_json(j: &DenseJson) -> Result<Self> {
        let w = Tensor::from_rows(&j.w)?;
        let b = Tensor::vector(j.b.clone())?;
        if b.len() != w.cols() {
            return Err(Error::Checkpoint(format!(
                "bias length {} does not match weight width {}",
                b.len(),
                w.cols()
            )));
        }
        Ok(Self { w, b })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    act: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new(sizes: &[usize], act: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self { layers, act })
    }

    pub fn from_layers(layers: Vec<Dense>, act: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Checkpoint("no layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Checkpoint(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        Ok(Self { layers, act })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::fan_out)
            .collect()
    }

    /// Weights then bias of every layer, input to output.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w = Tensor::zeros(last.w.shape());
        last.b = Tensor::zeros(last.b.shape());
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundMlp<'g> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.w.clone(), trainable), g.leaf(l.b.clone(), trainable)))
                .collect(),
            act: self.act,
        }
    }
}

/// An [`Mlp`] whose parameters live in a graph.
pub struct BoundMlp<'g> {
    layers: Vec<(Var<'g>, Var<'g>)>,
    act: Activation,
}

impl<'g> BoundMlp<'g> {
    /// Activations after the last hidden nonlinearity.
    pub fn hidden(&self, x: Var<'g>) -> Result<Var<'g>> {
        let mut h = x;
        for (w, b) in &self.layers[..self.layers.len() - 1] {
            h = self.act.apply(h.matmul(*w)?.add_row(*b)?);
        }
        Ok(h)
    }

    pub fn output(&self, h: Var<'g>) -> Result<Var<'g>> {
        let (w, b) = self.layers[self.layers.len() - 1];
        h.matmul(w)?.add_row(b)
    }

    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.output(self.hidden(x)?)
    }

    /// Parameter handles in the order of [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var<'g>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}
