//! Named parameter storage and the two trainable layer kinds used by every network.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Names are unique and stable; they key checkpoint blobs.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    names: Vec<String>,
    values: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<R>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but only parameters whose name passes `trainable` get
    /// gradients; the rest enter as constants.
    pub fn bind_where(&self, g: &mut Graph<R>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self.iter().map(|(n, t)| g.leaf(t.clone(), trainable(n))).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`] bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    Uniform,
    /// Zero weights; every bias entry set to the given value.
    Constant(f32),
}

fn uniform<R: Real, G: Rng>(rng: &mut G, n: usize, bound: f32) -> Vec<R> {
    (0..n)
        .map(|_| {
            let u: f32 = rng.random();
            R::from_f32((2.0 * u - 1.0) * bound).unwrap()
        })
        .collect()
}

fn init_pair<R: Real, G: Rng>(
    rng: &mut G,
    init: Init,
    wshape: &[usize],
    bias: Option<usize>,
    fan_in: usize,
) -> (Tensor<R>, Option<Tensor<R>>) {
    let wn = wshape.iter().product();
    match init {
        Init::Uniform => {
            let bound = 1.0 / Float::sqrt(fan_in as f32);
            let w = Tensor::new(wshape, uniform(rng, wn, bound));
            let b = bias.map(|n| Tensor::new(&[n], uniform(rng, n, bound)));
            (w, b)
        }
        Init::Constant(v) => {
            let w = Tensor::zeros(wshape);
            let b = bias.map(|n| Tensor::full(&[n], R::from_f32(v).unwrap()));
            (w, b)
        }
    }
}

/// Square-kernel 2-D convolution with bias and "same"-style zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        rng: &mut G,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let (w, b) = init_pair(
            rng,
            init,
            &[out_channels, in_channels, kernel, kernel],
            Some(out_channels),
            in_channels * kernel * kernel,
        );
        let weight = store.add(&alloc::format!("{name}.weight"), w);
        let bias = store.add(&alloc::format!("{name}.bias"), b.unwrap());
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Fully connected layer on a vector.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        rng: &mut G,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
    ) -> Self {
        let (w, b) = init_pair(rng, init, &[outputs, inputs], Some(outputs), inputs);
        let weight = store.add(&alloc::format!("{name}.weight"), w);
        let bias = store.add(&alloc::format!("{name}.bias"), b.unwrap());
        Self { weight, bias }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn act<R: Real>(g: &mut Graph<R>, x: Var) -> Var {
    g.leaky_relu(x, R::lit(LEAKY_SLOPE))
}
