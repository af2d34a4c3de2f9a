//! Adversarial, channel reconstruction and patch contrastive losses, as
//! plain functions over values and as graph builders for training.

use serde::{Deserialize, Serialize};

use crate::config::AdvForm;
use crate::encoder::{ChannelEmbedding, EncoderModel};
use crate::error::{Error, Result};
use crate::features::{batch_tensor, SpectrogramFrame};
use crate::nn::{Bound, Fwd};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const DEFAULT_LAMBDA_CH: f64 = 0.5;

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Returns `(d_objective, g_objective)` in nats. The discriminator maximizes
/// `d_objective`; the generator minimizes `g_objective`.
pub fn adv_loss(d_real: &Tensor<f32>, d_fake: &Tensor<f32>, form: AdvForm) -> Result<(f64, f64)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::validation(format!(
            "patch maps differ in shape: {:?} vs {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    if d_real.numel() == 0 {
        return Err(Error::validation("empty patch map"));
    }
    if !d_real.all_finite() || !d_fake.all_finite() {
        return Err(Error::Numeric {
            component: "adv".into(),
            detail: "non-finite discriminator logits".into(),
        });
    }
    let mean = |t: &Tensor<f32>, f: &dyn Fn(f64) -> f64| t.data().iter().map(|&v| f(v as f64)).sum::<f64>() / t.numel() as f64;
    let real = mean(d_real, &log_sigmoid);
    // log(1 − σ(x)) = log σ(−x)
    let fake = mean(d_fake, &|x| log_sigmoid(-x));
    let g = match form {
        AdvForm::Literal => fake,
        AdvForm::NonSaturating => -mean(d_fake, &log_sigmoid),
    };
    Ok((real + fake, g))
}

/// Sum of absolute differences.
pub fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// Batch mean of `‖c − E(x_sim)‖₁` with the encoder in evaluation mode.
pub fn channel_recon_loss(encoder: &EncoderModel, x_sim: &[SpectrogramFrame], c_target: &[ChannelEmbedding]) -> Result<f64> {
    if x_sim.is_empty() || x_sim.len() != c_target.len() {
        return Err(Error::validation(format!(
            "{} simulated frames for {} target embeddings",
            x_sim.len(),
            c_target.len()
        )));
    }
    if let Some(c) = c_target.iter().find(|c| c.vec.len() != encoder.d_c()) {
        return Err(Error::validation(format!(
            "embedding from {} has {} entries, encoder d_c is {}",
            c.source_utt,
            c.vec.len(),
            encoder.d_c()
        )));
    }
    let refs: Vec<&SpectrogramFrame> = x_sim.iter().collect();
    let e = encoder.embed_tensor(&batch_tensor(&refs, encoder.meta.layout))?;
    let total: f64 = e.iter().zip(c_target).map(|(e, c)| l1(&c.vec, e)).sum();
    Ok(total / x_sim.len() as f64)
}

fn check_dims(rows: &[Vec<f32>], d: usize, what: &str) -> Result<()> {
    match rows.iter().find(|r| r.len() != d) {
        Some(r) => Err(Error::validation(format!("{what} vector has dimension {}, expected {d}", r.len()))),
        None => Ok(()),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Mean over queries of the InfoNCE loss; `negatives[i]` belong to query `i`.
pub fn patchnce_loss(queries: &[Vec<f32>], positives: &[Vec<f32>], negatives: &[Vec<Vec<f32>>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    if queries.is_empty() || queries.len() != positives.len() || queries.len() != negatives.len() {
        return Err(Error::validation(format!(
            "{} queries, {} positives, {} negative sets",
            queries.len(),
            positives.len(),
            negatives.len()
        )));
    }
    let d = queries[0].len();
    check_dims(queries, d, "query")?;
    check_dims(positives, d, "positive")?;
    let mut total = 0.0;
    for ((q, p), negs) in queries.iter().zip(positives).zip(negatives) {
        check_dims(negs, d, "negative")?;
        let l0 = dot(q, p) / tau;
        let logits: Vec<f64> = negs.iter().map(|n| dot(q, n) / tau).collect();
        let mx = logits.iter().copied().fold(l0, f64::max);
        let z = (l0 - mx).exp() + logits.iter().map(|l| (l - mx).exp()).sum::<f64>();
        total += mx + z.ln() - l0;
    }
    Ok(total / queries.len() as f64)
}

/// Per-layer patch sets, averaged with equal weight.
pub fn patchnce_layers(layers: &[(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>)], tau: f64) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::validation("no layers"));
    }
    let mut s = 0.0;
    for (q, p, n) in layers {
        s += patchnce_loss(q, p, n, tau)?;
    }
    Ok(s / layers.len() as f64)
}

/// One generator step's loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub pcl_src: f64,
    pub pcl_tgt: f64,
    pub ch: f64,
    pub total: f64,
    pub lambda_ch: f64,
}

pub fn weighted_total(adv: f64, pcl_src: f64, pcl_tgt: f64, ch: f64, lambda_ch: f64) -> f64 {
    adv + pcl_src + pcl_tgt + lambda_ch * ch
}

pub fn total_loss(adv: f64, pcl_src: f64, pcl_tgt: f64, ch: f64, lambda_ch: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("adv", adv),
        ("pcl_src", pcl_src),
        ("pcl_tgt", pcl_tgt),
        ("ch", ch),
        ("lambda_ch", lambda_ch),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                component: name.into(),
                detail: format!("{v}"),
            });
        }
    }
    Ok(LossBreakdown {
        adv,
        pcl_src,
        pcl_tgt,
        ch,
        total: weighted_total(adv, pcl_src, pcl_tgt, ch, lambda_ch),
        lambda_ch,
    })
}

/// Discriminator loss to minimize: `−(mean log σ(real) + mean log σ(−fake))`.
pub fn d_loss_graph<F: Float>(g: &Graph<F>, real: Var, fake: Var) -> Var {
    let r = g.log_sigmoid(real);
    let r = g.mean(r);
    let nf = g.neg(fake);
    let f = g.log_sigmoid(nf);
    let f = g.mean(f);
    let s = g.add(r, f);
    g.neg(s)
}

pub fn g_adv_graph<F: Float>(g: &Graph<F>, fake: Var, form: AdvForm) -> Var {
    match form {
        AdvForm::NonSaturating => {
            let l = g.log_sigmoid(fake);
            let m = g.mean(l);
            g.neg(m)
        }
        AdvForm::Literal => {
            let nf = g.neg(fake);
            let l = g.log_sigmoid(nf);
            g.mean(l)
        }
    }
}

/// Bind the encoder so no gradient reaches its parameters.
pub fn freeze<F: Float>(encoder: &EncoderModel<F>, g: &Graph<F>) -> Bound {
    encoder.store.bind(g, false)
}

/// `x_sim: [N, 1, H, W]`, `c: [N, d_c]` constant. Gradient flows into
/// `x_sim` only.
pub fn channel_recon_graph<F: Float>(g: &Graph<F>, encoder: &EncoderModel<F>, frozen: &Bound, x_sim: Var, c: Var) -> Var {
    let mut cx = Fwd::eval(g, frozen);
    let e = encoder.forward_embed(&mut cx, x_sim);
    let n = g.shape(x_sim)[0];
    let d = g.sub(c, e);
    let a = g.abs(d);
    let s = g.sum(a);
    g.scale(s, F::cst(1.0 / n as f64))
}
