//! Parameter storage and the layers the models are assembled from.

mod adam;

pub use adam::{Adam, AdamConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
}

/// Named tensors of one model. Buffers (e.g. batch-norm running stats) are
/// stored alongside parameters but never receive gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Record every tensor on `g`. Trainable parameters become gradient
    /// leaves only when `train` is set.
    pub fn bind(&self, g: &Graph<F>, train: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| g.leaf(e.value.clone(), train && e.trainable))
                .collect(),
        )
    }

    /// Gradients of all trainable parameters after `g.backward`, zero-filled
    /// for parameters the loss did not reach.
    pub fn grads(&self, g: &Graph<F>, bound: &Bound) -> Vec<(ParamId, Tensor<F>)> {
        self.trainable_ids()
            .map(|id| {
                let grad = g
                    .grad(bound.get(id))
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()));
                (id, grad)
            })
            .collect()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrite every tensor from `source`, matching by name and shape.
    pub fn load_from<'a>(&mut self, mut source: impl FnMut(&str) -> Option<&'a Tensor<f32>>) -> Result<()> {
        for e in &mut self.entries {
            let t = source(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Graph handles for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles created elsewhere, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Forward-pass context: the tape, bound parameters, mode, and the dropout RNG.
pub struct Fwd<'a, F: Float> {
    pub g: &'a Graph<F>,
    pub p: &'a Bound,
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    bn_stats: Vec<(ParamId, ParamId, Vec<F>, Vec<F>)>,
}

impl<'a, F: Float> Fwd<'a, F> {
    pub fn eval(g: &'a Graph<F>, p: &'a Bound) -> Self {
        Self {
            g,
            p,
            train: false,
            rng: None,
            bn_stats: Vec::new(),
        }
    }

    pub fn train(g: &'a Graph<F>, p: &'a Bound, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            p,
            train: true,
            rng: Some(rng),
            bn_stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.p.get(id)
    }

    /// Fold the batch statistics seen during a training pass into the
    /// running averages.
    pub fn commit_batch_stats(self, store: &mut ParamStore<F>, momentum: F) {
        for (mean_id, var_id, mean, var) in self.bn_stats {
            for (r, m) in store.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                *r = *r * (F::one() - momentum) + *m * momentum;
            }
            for (r, v) in store.get_mut(var_id).data_mut().iter_mut().zip(&var) {
                *r = *r * (F::one() - momentum) + *v * momentum;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, std²)
    Normal(f64),
    /// He-normal for ReLU networks
    Kaiming,
    Zeros,
}

fn init_tensor<F: Float>(shape: &[usize], fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let std = match init {
        Init::Normal(s) => s,
        Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(shape),
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::cst(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [out_c, in_c, geom.kh, geom.kw];
        let w = store.add(format!("{name}.weight"), init_tensor(&shape, in_c * geom.kh * geom.kw, init, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]), true));
        Self {
            w,
            b,
            geom,
            out_channels: out_c,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Fwd<F>, x: Var) -> Var {
        cx.g.conv2d(x, cx.var(self.w), self.b.map(|b| cx.var(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [in_c, out_c, geom.kh, geom.kw];
        let w = store.add(format!("{name}.weight"), init_tensor(&shape, in_c * geom.kh * geom.kw, init, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]), true));
        Self { w, b, geom }
    }

    pub fn forward<F: Float>(&self, cx: &Fwd<F>, x: Var, out_hw: (usize, usize)) -> Var {
        cx.g
            .conv_transpose2d(x, cx.var(self.w), self.b.map(|b| cx.var(b)), self.geom, out_hw)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_tensor(&[out_dim, in_dim], in_dim, init, rng), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, cx: &Fwd<F>, x: Var) -> Var {
        cx.g.linear(x, cx.var(self.w), Some(cx.var(self.b)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], F::one()), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], F::one()), false),
            eps: 1e-5,
        }
    }

    pub fn forward<F: Float>(&self, cx: &mut Fwd<F>, x: Var) -> Var {
        let eps = F::cst(self.eps);
        if cx.train {
            let (y, mean, var) = cx.g.batch_norm(x, cx.var(self.gamma), cx.var(self.beta), eps);
            cx.bn_stats.push((self.running_mean, self.running_var, mean, var));
            y
        } else {
            let (scale, shift) = {
                let gamma = cx.g.value(cx.var(self.gamma));
                let beta = cx.g.value(cx.var(self.beta));
                let mean = cx.g.value(cx.var(self.running_mean));
                let var = cx.g.value(cx.var(self.running_var));
                let scale: Vec<F> = gamma
                    .data()
                    .iter()
                    .zip(var.data())
                    .map(|(&g, &v)| g / (v + eps).sqrt())
                    .collect();
                let shift = beta
                    .data()
                    .iter()
                    .zip(mean.data())
                    .zip(&scale)
                    .map(|((&b, &m), &s)| b - m * s)
                    .collect();
                (scale, shift)
            };
            cx.g.channel_affine(x, scale, shift)
        }
    }
}

/// Inverted dropout; identity outside training mode or when `p == 0`.
pub fn dropout<F: Float>(cx: &mut Fwd<F>, x: Var, p: f64) -> Var {
    if !cx.train || p <= 0.0 {
        return x;
    }
    let n = cx.g.value(x).numel();
    let rng = cx.rng.as_mut().expect("training forward needs an rng");
    let keep = F::cst(1.0 / (1.0 - p));
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    cx.g.dropout(x, mask)
}
