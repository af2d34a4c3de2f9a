//! FiLM-conditioned ResNet generator with feature taps, patch discriminator,
//! and the per-tap projection heads used by the contrastive loss.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::GanConfig;
use crate::encoder::ChannelEmbedding;
use crate::error::{Error, Result};
use crate::features::{frame_hw, Layout, SpectrogramFrame};
use crate::nn::{dropout, ConvTranspose2d, Conv2d, Fwd, Init, Linear, ParamStore};
use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};

pub const N_TAPS: usize = 5;
const IN_EPS: f64 = 1e-5;
/// Residual blocks (1-based) after which features are tapped.
const TAP_BLOCKS: [usize; 2] = [3, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub widths: Vec<usize>,
    pub n_res_blocks: usize,
    pub dropout: f64,
    pub d_c: usize,
    pub layout: Layout,
}

impl GeneratorArch {
    pub fn from_config(cfg: &GanConfig, d_c: usize, layout: Layout) -> Self {
        Self {
            widths: cfg.widths.clone(),
            n_res_blocks: cfg.n_res_blocks,
            dropout: cfg.dropout,
            d_c,
            layout,
        }
    }

    /// Channel count of each tap, input first.
    pub fn tap_channels(&self) -> [usize; N_TAPS] {
        [1, self.widths[1], self.widths[2], self.widths[2], self.widths[2]]
    }

    fn tap_after_blocks(&self) -> [usize; 2] {
        TAP_BLOCKS.map(|b| b.min(self.n_res_blocks))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    film_delta: Linear,
    film_beta: Linear,
}

#[derive(Clone, Debug)]
pub struct Generator<F: Float = f32> {
    pub store: ParamStore<F>,
    pub arch: GeneratorArch,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    up: [ConvTranspose2d; 2],
    head: Conv2d,
}

pub struct GenOut {
    /// Absent when the pass stopped after the last tap.
    pub out: Option<Var>,
    pub taps: Vec<Var>,
}

impl<F: Float> Generator<F> {
    pub fn new(arch: GeneratorArch, init_std: f64, seed: u64) -> Result<Self> {
        if arch.widths.len() != 3 || arch.widths.contains(&0) || arch.n_res_blocks == 0 || arch.d_c == 0 {
            return Err(Error::validation("generator needs three widths, ≥1 residual block and d_c ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let init = Init::Normal(init_std);
        let k3 = ConvGeom::square(3, 1, 1);
        let k3s2 = ConvGeom::square(3, 2, 1);
        let [w0, w1, w2] = [arch.widths[0], arch.widths[1], arch.widths[2]];
        let stem = Conv2d::new(&mut s, "stem", 1, w0, k3, false, init, &mut rng);
        let down = [
            Conv2d::new(&mut s, "down1", w0, w1, k3s2, false, init, &mut rng),
            Conv2d::new(&mut s, "down2", w1, w2, k3s2, false, init, &mut rng),
        ];
        let blocks = (0..arch.n_res_blocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(&mut s, &format!("res{i}.conv1"), w2, w2, k3, false, init, &mut rng),
                conv2: Conv2d::new(&mut s, &format!("res{i}.conv2"), w2, w2, k3, false, init, &mut rng),
                film_delta: Linear::new(&mut s, &format!("res{i}.film_gamma"), arch.d_c, w2, Init::Zeros, &mut rng),
                film_beta: Linear::new(&mut s, &format!("res{i}.film_beta"), arch.d_c, w2, Init::Zeros, &mut rng),
            })
            .collect();
        let up = [
            ConvTranspose2d::new(&mut s, "up1", w2, w1, k3s2, false, init, &mut rng),
            ConvTranspose2d::new(&mut s, "up2", w1, w0, k3s2, false, init, &mut rng),
        ];
        let head = Conv2d::new(&mut s, "head", w0, 1, k3, true, init, &mut rng);
        Ok(Self {
            store: s,
            arch,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    fn norm_relu(cx: &Fwd<F>, x: Var) -> Var {
        let n = cx.g.instance_norm(x, F::cst(IN_EPS));
        cx.g.relu(n)
    }

    /// `x: [N, 1, H, W]`, `c: [N, d_c]`. With `taps_only` the pass stops
    /// after the last tap and `out` is `None`.
    pub fn forward(&self, cx: &mut Fwd<F>, x: Var, c: Var, taps_only: bool) -> GenOut {
        let g = cx.g;
        let mut taps = vec![x];
        let s0 = {
            let sh = g.shape(x);
            (sh[2], sh[3])
        };
        let h = self.stem.forward(cx, x);
        let h = Self::norm_relu(cx, h);
        let h = self.down[0].forward(cx, h);
        let h = Self::norm_relu(cx, h);
        let s1 = {
            let sh = g.shape(h);
            (sh[2], sh[3])
        };
        taps.push(h);
        let h = self.down[1].forward(cx, h);
        let mut h = Self::norm_relu(cx, h);
        taps.push(h);
        let tap_after = self.arch.tap_after_blocks();
        let n = g.shape(x)[0];
        let ones = g.constant(Tensor::full(&[n, self.arch.widths[2]], F::one()));
        let last_block = if taps_only { tap_after[1] } else { self.blocks.len() };
        for (i, b) in self.blocks.iter().enumerate().take(last_block) {
            let r = b.conv1.forward(cx, h);
            let r = Self::norm_relu(cx, r);
            let r = dropout(cx, r, self.arch.dropout);
            let r = b.conv2.forward(cx, r);
            let r = g.instance_norm(r, F::cst(IN_EPS));
            let delta = b.film_delta.forward(cx, c);
            let gamma = g.add(delta, ones);
            let beta = b.film_beta.forward(cx, c);
            let r = g.film(r, gamma, beta);
            h = g.add(h, r);
            for &t in &tap_after {
                if t == i + 1 {
                    taps.push(h);
                }
            }
        }
        if taps_only {
            return GenOut { out: None, taps };
        }
        let h = self.up[0].forward(cx, h, s1);
        let h = Self::norm_relu(cx, h);
        let h = self.up[1].forward(cx, h, s0);
        let h = Self::norm_relu(cx, h);
        let h = self.head.forward(cx, h);
        GenOut {
            out: Some(g.tanh(h)),
            taps,
        }
    }

    fn check_inputs(&self, x: &Tensor<F>, c: &Tensor<F>) -> Result<()> {
        let (n, ch, h, w) = x.dims4()?;
        let (eh, ew) = frame_hw(self.arch.layout);
        if ch != 1 || h != eh || w != ew {
            return Err(Error::validation(format!(
                "generator expects [N, 1, {eh}, {ew}] frames, got {:?}",
                x.shape()
            )));
        }
        if c.shape() != [n, self.arch.d_c] {
            return Err(Error::validation(format!(
                "conditioning must be [{n}, {}], got {:?}",
                self.arch.d_c,
                c.shape()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode translation of a batch.
    pub fn generate_tensor(&self, x: &Tensor<F>, c: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_inputs(x, c)?;
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let mut cx = Fwd::eval(&g, &bound);
        let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
        let out = self.forward(&mut cx, xv, cv, false).out.expect("full pass");
        let t = g.value(out).clone();
        Ok(t)
    }

    /// Evaluation-mode tap activations.
    pub fn extract_features_tensor(&self, x: &Tensor<F>, c: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        self.check_inputs(x, c)?;
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let mut cx = Fwd::eval(&g, &bound);
        let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
        let taps = self.forward(&mut cx, xv, cv, true).taps;
        Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
    }
}

fn cond_tensor(c: &[f32], d_c: usize) -> Result<Tensor<f32>> {
    if c.len() != d_c {
        return Err(Error::validation(format!(
            "channel embedding has {} entries, generator expects {d_c}",
            c.len()
        )));
    }
    Tensor::from_vec(&[1, d_c], c.to_vec())
}

impl Generator<f32> {
    pub fn generate(&self, x: &SpectrogramFrame, c: &ChannelEmbedding) -> Result<SpectrogramFrame> {
        let ct = cond_tensor(&c.vec, self.arch.d_c)?;
        let y = self.generate_tensor(&x.to_tensor(self.arch.layout), &ct)?;
        SpectrogramFrame::from_tensor(&y, self.arch.layout, &x.utt_id, x.start_frame, x.pad)
    }

    pub fn extract_features(&self, x: &SpectrogramFrame, c: &ChannelEmbedding) -> Result<Vec<Tensor<f32>>> {
        let ct = cond_tensor(&c.vec, self.arch.d_c)?;
        self.extract_features_tensor(&x.to_tensor(self.arch.layout), &ct)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("generator", config_hash);
        ck.header.d_c = Some(self.arch.d_c);
        ck.header.meta = serde_json::to_value(&self.arch).expect("arch serializes");
        ck.insert_store("", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("generator")?;
        let arch: GeneratorArch = serde_json::from_value(ck.header.meta.clone())?;
        let mut g = Self::new(arch, 0.02, 0)?;
        ck.load_store("", &mut g.store)?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<F: Float = f32> {
    pub store: ParamStore<F>,
    pub arch: DiscriminatorArch,
    convs: Vec<Conv2d>,
}

pub const DISC_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

impl<F: Float> Discriminator<F> {
    pub fn new(arch: DiscriminatorArch, init_std: f64, seed: u64) -> Result<Self> {
        if arch.widths.len() != 4 || arch.widths.contains(&0) {
            return Err(Error::validation("discriminator needs four positive widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut chans = vec![1];
        chans.extend(&arch.widths);
        chans.push(1);
        let convs = (0..5)
            .map(|i| {
                Conv2d::new(
                    &mut store,
                    &format!("conv{i}"),
                    chans[i],
                    chans[i + 1],
                    ConvGeom::square(4, DISC_STRIDES[i], 1),
                    // Instance norm follows layers 1..=3 and cancels a bias.
                    !(1..=3).contains(&i),
                    Init::Normal(init_std),
                    &mut rng,
                )
            })
            .collect();
        Ok(Self { store, arch, convs })
    }

    /// Patch logits `[N, 1, h, w]`; no sigmoid.
    pub fn forward(&self, cx: &Fwd<F>, x: Var) -> Var {
        let slope = F::cst(0.2);
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(cx, h);
            if i == 4 {
                break;
            }
            if (1..=3).contains(&i) {
                h = cx.g.instance_norm(h, F::cst(IN_EPS));
            }
            h = cx.g.leaky_relu(h, slope);
        }
        h
    }

    pub fn discriminate_tensor(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (_, c, h, w) = x.dims4()?;
        let min = disc_output_hw(h, w);
        if c != 1 || min.is_none() {
            return Err(Error::validation(format!(
                "discriminator input {:?} is not a single-channel map large enough for five convolutions",
                x.shape()
            )));
        }
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let cx = Fwd::eval(&g, &bound);
        let xv = g.constant(x.clone());
        let y = self.forward(&cx, xv);
        let t = g.value(y).clone();
        Ok(t)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("discriminator", config_hash);
        ck.header.meta = serde_json::to_value(&self.arch).expect("arch serializes");
        ck.insert_store("", &self.store);
        ck
    }
}

impl Discriminator<f32> {
    pub fn discriminate(&self, x: &SpectrogramFrame, layout: Layout) -> Result<Tensor<f32>> {
        self.discriminate_tensor(&x.to_tensor(layout))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("discriminator")?;
        let arch: DiscriminatorArch = serde_json::from_value(ck.header.meta.clone())?;
        let mut d = Self::new(arch, 0.02, 0)?;
        ck.load_store("", &mut d.store)?;
        Ok(d)
    }
}

/// Output map size of the discriminator for an `h × w` input.
pub fn disc_output_hw(h: usize, w: usize) -> Option<(usize, usize)> {
    DISC_STRIDES.iter().try_fold((h, w), |(h, w), &s| ConvGeom::square(4, s, 1).conv_out(h, w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionArch {
    pub in_channels: Vec<usize>,
    pub dim: usize,
}

/// One two-layer MLP per tap, with L2-normalized outputs.
#[derive(Clone, Debug)]
pub struct ProjectionHeads<F: Float = f32> {
    pub store: ParamStore<F>,
    pub arch: ProjectionArch,
    heads: Vec<(Linear, Linear)>,
}

impl<F: Float> ProjectionHeads<F> {
    pub fn new(arch: ProjectionArch, init_std: f64, seed: u64) -> Result<Self> {
        if arch.dim == 0 || arch.in_channels.is_empty() {
            return Err(Error::validation("projection heads need taps and a positive width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let heads = arch
            .in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                (
                    Linear::new(&mut store, &format!("head{i}.fc1"), c, arch.dim, Init::Normal(init_std), &mut rng),
                    Linear::new(&mut store, &format!("head{i}.fc2"), arch.dim, arch.dim, Init::Normal(init_std), &mut rng),
                )
            })
            .collect();
        Ok(Self { store, arch, heads })
    }

    /// Project patch vectors `[P, C_l]` of tap `l` to unit vectors `[P, dim]`.
    pub fn forward(&self, cx: &Fwd<F>, tap: usize, x: Var) -> Var {
        let (fc1, fc2) = &self.heads[tap];
        let h = fc1.forward(cx, x);
        let h = cx.g.relu(h);
        let h = fc2.forward(cx, h);
        cx.g.l2_normalize(h, F::cst(1e-7))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("projection", config_hash);
        ck.header.meta = serde_json::to_value(&self.arch).expect("arch serializes");
        ck.insert_store("", &self.store);
        ck
    }
}

/// Choose `n` of `positions` spatial locations without replacement. If
/// `n > positions` the draw falls back to sampling with replacement.
pub fn sample_positions(positions: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= positions {
        sample(rng, positions, n).into_vec()
    } else {
        log::warn!("{n} patches requested from {positions} positions; sampling with replacement");
        (0..n).map(|_| rng.random_range(0..positions)).collect()
    }
}

/// Contrastive patch triplets drawn from one pair of `[C, H, W]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub positions: Vec<usize>,
    /// Simulated-map vectors, one per location.
    pub queries: Vec<Vec<f32>>,
    /// Source-map vectors at the same locations.
    pub positives: Vec<Vec<f32>>,
    /// For query `i`, the source vectors at every other sampled location.
    pub negatives: Vec<Vec<Vec<f32>>>,
}

pub fn sample_patches(feat_src: &Tensor<f32>, feat_sim: &Tensor<f32>, n: usize, seed: u64) -> Result<PatchSample> {
    if feat_src.shape() != feat_sim.shape() {
        return Err(Error::validation(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            feat_src.shape(),
            feat_sim.shape()
        )));
    }
    let shape = feat_src.shape();
    let (c, hw) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2] * shape[3]),
        _ => return Err(Error::Shape(format!("expected a [C, H, W] map, got {shape:?}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = sample_positions(hw, n, &mut rng);
    let vec_at = |t: &Tensor<f32>, p: usize| -> Vec<f32> { (0..c).map(|ch| t.data()[ch * hw + p]).collect() };
    let queries: Vec<Vec<f32>> = positions.iter().map(|&p| vec_at(feat_sim, p)).collect();
    let positives: Vec<Vec<f32>> = positions.iter().map(|&p| vec_at(feat_src, p)).collect();
    let negatives = (0..positions.len())
        .map(|i| {
            positives
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.clone())
                .collect()
        })
        .collect();
    Ok(PatchSample {
        positions,
        queries,
        positives,
        negatives,
    })
}
