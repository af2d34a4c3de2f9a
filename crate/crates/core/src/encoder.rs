//! Channel encoder: strided CNN whose per-stage pooled features are
//! concatenated and mapped to a channel embedding. A classification head
//! over channel labels is used only for pretraining.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, EncoderArch, EncoderConfig};
use crate::corpus::{holdout_sets, UtteranceRecord};
use crate::error::{Error, IoContext, Result};
use crate::features::{batch_tensor, frame_hw, load_record_frames, Layout, LogMel, SpectrogramFrame};
use crate::nn::{Adam, AdamConfig, BatchNorm2d, Bound, Conv2d, Fwd, Init, Linear, ParamStore};
use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEmbedding {
    pub vec: Vec<f32>,
    pub source_utt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArchMeta {
    pub stage_channels: Vec<usize>,
    pub d_c: usize,
    pub labels: Vec<String>,
    pub layout: Layout,
}

#[derive(Clone, Debug)]
pub struct EncoderModel<F: Float = f32> {
    pub store: ParamStore<F>,
    stages: Vec<(Conv2d, BatchNorm2d)>,
    embed_head: Linear,
    class_head: Linear,
    pub meta: EncoderArchMeta,
}

impl<F: Float> EncoderModel<F> {
    pub fn new(meta: EncoderArchMeta, seed: u64) -> Result<Self> {
        if meta.stage_channels.is_empty() || meta.d_c == 0 || meta.labels.is_empty() {
            return Err(Error::validation("encoder needs stages, d_c ≥ 1 and labels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut in_c = 1;
        for (i, &c) in meta.stage_channels.iter().enumerate() {
            let conv = Conv2d::new(
                &mut store,
                &format!("stage{i}.conv"),
                in_c,
                c,
                ConvGeom::square(3, 2, 1),
                false,
                Init::Kaiming,
                &mut rng,
            );
            let bn = BatchNorm2d::new(&mut store, &format!("stage{i}.bn"), c);
            stages.push((conv, bn));
            in_c = c;
        }
        let agg: usize = meta.stage_channels.iter().sum();
        let embed_head = Linear::new(&mut store, "embed", agg, meta.d_c, Init::Normal((1.0 / agg as f64).sqrt()), &mut rng);
        let class_head = Linear::new(
            &mut store,
            "classify",
            meta.d_c,
            meta.labels.len(),
            Init::Normal((1.0 / meta.d_c as f64).sqrt()),
            &mut rng,
        );
        Ok(Self {
            store,
            stages,
            embed_head,
            class_head,
            meta,
        })
    }

    pub fn d_c(&self) -> usize {
        self.meta.d_c
    }

    pub fn n_channels(&self) -> usize {
        self.meta.labels.len()
    }

    /// `x: [N, 1, H, W]` → embeddings `[N, d_c]`. Never touches the class head.
    pub fn forward_embed(&self, cx: &mut Fwd<F>, x: Var) -> Var {
        let mut h = x;
        let mut pooled = Vec::with_capacity(self.stages.len());
        for (conv, bn) in &self.stages {
            let c = conv.forward(cx, h);
            let n = bn.forward(cx, c);
            h = cx.g.relu(n);
            pooled.push(cx.g.global_avg_pool(h));
        }
        let agg = cx.g.concat(&pooled);
        self.embed_head.forward(cx, agg)
    }

    pub fn forward_logits(&self, cx: &Fwd<F>, emb: Var) -> Var {
        self.class_head.forward(cx, emb)
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        let (eh, ew) = frame_hw(self.meta.layout);
        if c != 1 || h != eh || w != ew {
            return Err(Error::validation(format!(
                "encoder expects [N, 1, {eh}, {ew}] frames, got {:?}",
                x.shape()
            )));
        }
        Ok(n)
    }

    /// Embeddings of a frame batch in evaluation mode.
    pub fn embed_tensor(&self, x: &Tensor<F>) -> Result<Vec<Vec<F>>> {
        let n = self.check_input(x)?;
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let mut cx = Fwd::eval(&g, &bound);
        let xv = g.constant(x.clone());
        let e = self.forward_embed(&mut cx, xv);
        let v = g.value(e);
        Ok(v.data().chunks(self.meta.d_c).take(n).map(<[F]>::to_vec).collect())
    }

    /// Evaluation-mode logits `[N, n_channels]`.
    pub fn logits_tensor(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let mut cx = Fwd::eval(&g, &bound);
        let xv = g.constant(x.clone());
        let e = self.forward_embed(&mut cx, xv);
        let l = self.forward_logits(&cx, e);
        let out = g.value(l).clone();
        Ok(out)
    }
}

impl EncoderModel<f32> {
    pub fn embed(&self, frame: &SpectrogramFrame) -> Result<ChannelEmbedding> {
        let x = batch_tensor::<f32>(&[frame], self.meta.layout);
        let mut e = self.embed_tensor(&x)?;
        Ok(ChannelEmbedding {
            vec: e.remove(0),
            source_utt: frame.utt_id.clone(),
        })
    }

    /// Per-frame embeddings, evaluated in chunks.
    pub fn embed_frames(&self, frames: &[&SpectrogramFrame]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(32) {
            out.extend(self.embed_tensor(&batch_tensor::<f32>(chunk, self.meta.layout))?);
        }
        Ok(out)
    }

    /// Mean of the frame embeddings of one utterance.
    pub fn embed_utterance(&self, frames: &[SpectrogramFrame]) -> Result<ChannelEmbedding> {
        let first = frames
            .first()
            .ok_or_else(|| Error::validation("cannot embed an utterance without frames"))?;
        let refs: Vec<&SpectrogramFrame> = frames.iter().collect();
        let embs = self.embed_frames(&refs)?;
        Ok(ChannelEmbedding {
            vec: mean_vector(&embs),
            source_utt: first.utt_id.clone(),
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("encoder", config_hash);
        ck.header.d_c = Some(self.meta.d_c);
        ck.header.n_channels = Some(self.n_channels());
        ck.header.meta = serde_json::to_value(&self.meta).expect("meta serializes");
        ck.insert_store("", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("encoder")?;
        let meta: EncoderArchMeta = serde_json::from_value(ck.header.meta.clone())?;
        let mut model = Self::new(meta, 0)?;
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.to_checkpoint(config_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn mean_vector(vs: &[Vec<f32>]) -> Vec<f32> {
    let d = vs.first().map_or(0, Vec::len);
    let mut out = vec![0.0f64; d];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += *x as f64;
        }
    }
    out.iter().map(|v| (v / vs.len().max(1) as f64) as f32).collect()
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over groups of the mean pairwise Euclidean distance inside each group.
pub fn mean_set_distance(groups: &[Vec<Vec<f32>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::validation("no embedding groups"));
    }
    let mut total = 0.0;
    for g in groups {
        if g.len() < 2 {
            return Err(Error::validation("every set needs at least two channels"));
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                sum += euclidean(&g[i], &g[j]);
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean same-set, cross-channel embedding distance. Each record contributes
/// the mean embedding of its frames.
pub fn pairwise_set_distance(
    model: &EncoderModel,
    records: &[UtteranceRecord],
    frames: &[Vec<SpectrogramFrame>],
) -> Result<f64> {
    let mut by_set: HashMap<&str, Vec<Vec<f32>>> = HashMap::new();
    let mut order = Vec::new();
    for (r, f) in records.iter().zip(frames) {
        let e = model.embed_utterance(f)?.vec;
        let entry = by_set.entry(r.set_id.as_str()).or_insert_with(|| {
            order.push(r.set_id.as_str());
            Vec::new()
        });
        entry.push(e);
    }
    let groups: Vec<Vec<Vec<f32>>> = order.iter().filter_map(|s| by_set.remove(s)).collect();
    mean_set_distance(&groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Absent when the validation sets are not parallel.
    pub mean_pairwise_distance: Option<f64>,
}

pub const ENCODER_METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,mean_pairwise_distance";

pub fn write_encoder_metrics(path: &Path, rows: &[EncoderEpochMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_path(dir)?;
    }
    let mut f = fs::File::create(path).with_path(path)?;
    writeln!(f, "{ENCODER_METRICS_HEADER}").with_path(path)?;
    for r in rows {
        let d = r.mean_pairwise_distance.map(|d| d.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc, d).with_path(path)?;
    }
    Ok(())
}

/// Labelled frames prepared for pretraining.
pub struct EncoderData {
    pub labels: Vec<String>,
    pub records: Vec<UtteranceRecord>,
    pub frames: Vec<Vec<SpectrogramFrame>>,
    pub label_of: Vec<usize>,
}

impl EncoderData {
    /// Keep the records whose channel takes part in pretraining and load their frames.
    pub fn load(records: &[UtteranceRecord], manifest_dir: &Path, cfg: &Config) -> Result<Self> {
        let excluded: Vec<&str> = if cfg.encoder.exclude_gan_channels {
            vec![&cfg.corpus.source_channel, &cfg.corpus.target_channel]
        } else {
            Vec::new()
        };
        let kept: Vec<UtteranceRecord> = records
            .iter()
            .filter(|r| !excluded.contains(&r.channel_label.as_str()))
            .cloned()
            .collect();
        let mel = LogMel::new(&cfg.features)?;
        let frames = load_record_frames(&kept, manifest_dir, &mel)?;
        Self::from_frames(kept, frames)
    }

    pub fn from_frames(records: Vec<UtteranceRecord>, frames: Vec<Vec<SpectrogramFrame>>) -> Result<Self> {
        let labels: Vec<String> = records
            .iter()
            .map(|r| r.channel_label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if labels.len() < 2 {
            return Err(Error::validation(format!(
                "channel classification needs at least 2 channels, found {}",
                labels.len()
            )));
        }
        let label_of = records
            .iter()
            .map(|r| labels.iter().position(|l| *l == r.channel_label).expect("label present"))
            .collect();
        Ok(Self {
            labels,
            records,
            frames,
            label_of,
        })
    }
}

struct Split {
    /// (record, frame) pairs
    train: Vec<(usize, usize)>,
    val: Vec<(usize, usize)>,
    val_records: Vec<usize>,
}

fn split(data: &EncoderData, cfg: &EncoderConfig) -> Split {
    let held = holdout_sets(&data.records, cfg.val_fraction, cfg.seed ^ 0x5eed);
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        val_records: Vec::new(),
    };
    for (ri, r) in data.records.iter().enumerate() {
        let is_val = held.contains(&r.set_id);
        if is_val {
            s.val_records.push(ri);
        }
        for fi in 0..data.frames[ri].len() {
            if is_val {
                s.val.push((ri, fi))
            } else {
                s.train.push((ri, fi))
            }
        }
    }
    s
}

fn evaluate(model: &EncoderModel, data: &EncoderData, items: &[(usize, usize)]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in items.chunks(32) {
        let frames: Vec<&SpectrogramFrame> = chunk.iter().map(|&(r, f)| &data.frames[r][f]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&(r, _)| data.label_of[r]).collect();
        let logits = model.logits_tensor(&batch_tensor(&frames, model.meta.layout))?;
        let k = model.n_channels();
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            loss += lse - row[y] as f64;
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("classes");
            correct += usize::from(pred == y);
        }
    }
    Ok((loss / items.len() as f64, correct as f64 / items.len() as f64))
}

fn val_distance(model: &EncoderModel, data: &EncoderData, val_records: &[usize]) -> Result<Option<f64>> {
    let recs: Vec<UtteranceRecord> = val_records.iter().map(|&i| data.records[i].clone()).collect();
    let frames: Vec<Vec<SpectrogramFrame>> = val_records.iter().map(|&i| data.frames[i].clone()).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &recs {
        *counts.entry(r.set_id.as_str()).or_default() += 1;
    }
    if recs.is_empty() || counts.values().any(|&c| c < 2) {
        return Ok(None);
    }
    pairwise_set_distance(model, &recs, &frames).map(Some)
}

/// Learning rate of `epoch` (1-based): cosine from `lr` towards zero.
pub fn encoder_lr(cfg: &EncoderConfig, epoch: usize) -> f64 {
    if !cfg.lr_decay {
        return cfg.lr;
    }
    let t = (epoch.saturating_sub(1)) as f64 / cfg.epochs.max(1) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Train the encoder by channel classification. Returns the model and one
/// metrics row per epoch, starting with the untrained model at epoch 0.
pub fn pretrain_encoder(data: &EncoderData, cfg: &EncoderConfig, layout: Layout) -> Result<(EncoderModel, Vec<EncoderEpochMetrics>)> {
    if cfg.arch == EncoderArch::Conformer {
        return Err(Error::Config("encoder.arch = \"conformer\" is reserved and not implemented".into()));
    }
    let meta = EncoderArchMeta {
        stage_channels: cfg.stage_channels.clone(),
        d_c: cfg.d_c,
        labels: data.labels.clone(),
        layout,
    };
    let mut model = EncoderModel::<f32>::new(meta, cfg.seed)?;
    let sp = split(data, cfg);
    if sp.train.is_empty() {
        return Err(Error::validation("no training frames left after the validation split"));
    }
    let parallel = val_distance(&model, data, &sp.val_records)?.is_some();
    if !parallel {
        log::warn!("validation sets are not parallel; pairwise distance is skipped");
    }
    let mut opt = Adam::new(AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let (vl, va) = evaluate(&model, data, &sp.val)?;
    rows.push(EncoderEpochMetrics {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: vl,
        val_acc: va,
        mean_pairwise_distance: val_distance(&model, data, &sp.val_records)?,
    });
    let momentum = cfg.bn_momentum as f32;
    for epoch in 1..=cfg.epochs {
        let lr = encoder_lr(cfg, epoch);
        let mut order = sp.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 * 0x9e37_79b9)));
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let frames: Vec<&SpectrogramFrame> = chunk.iter().map(|&(r, f)| &data.frames[r][f]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(r, _)| data.label_of[r]).collect();
            let g = Graph::new();
            let bound = model.store.bind(&g, true);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut cx = Fwd::train(&g, &bound, &mut rng);
            let x = g.constant(batch_tensor(&frames, layout));
            let emb = model.forward_embed(&mut cx, x);
            let logits = model.forward_logits(&cx, emb);
            let loss = g.cross_entropy(logits, &labels);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    component: "encoder cross-entropy".into(),
                    detail: format!("epoch {epoch}: {lv}"),
                });
            }
            g.backward(loss)?;
            let grads = model.store.grads(&g, &bound);
            cx.commit_batch_stats(&mut model.store, momentum);
            opt.update(&mut model.store, &grads, lr);
            sum += lv * chunk.len() as f64;
            n += chunk.len();
        }
        let (vl, va) = evaluate(&model, data, &sp.val)?;
        let row = EncoderEpochMetrics {
            epoch,
            train_loss: sum / n.max(1) as f64,
            val_loss: vl,
            val_acc: va,
            mean_pairwise_distance: if parallel {
                val_distance(&model, data, &sp.val_records)?
            } else {
                None
            },
        };
        log::info!(
            "encoder epoch {epoch}: train {:.4} val {:.4} acc {:.3} dist {:?}",
            row.train_loss,
            row.val_loss,
            row.val_acc,
            row.mean_pairwise_distance
        );
        rows.push(row);
    }
    if cfg.embed_scale > 0.0 {
        let frames: Vec<&SpectrogramFrame> = sp.train.iter().map(|&(r, f)| &data.frames[r][f]).collect();
        let a = calibrate_scale(&mut model, &frames, cfg.embed_scale)?;
        log::info!("embedding scale calibrated by {a:.4}");
    }
    Ok((model, rows))
}

/// Rescale the embedding head so the mean absolute embedding component over
/// `frames` equals `target`. The class head absorbs the inverse factor, so
/// logits are unchanged. Returns the applied factor.
pub fn calibrate_scale(model: &mut EncoderModel, frames: &[&SpectrogramFrame], target: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::validation("embedding scale target must be positive"));
    }
    let embs = model.embed_frames(frames)?;
    let n = embs.len() * model.d_c();
    let mean = embs.iter().flatten().map(|v| v.abs() as f64).sum::<f64>() / n.max(1) as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Numeric {
            component: "embedding scale".into(),
            detail: format!("mean absolute component {mean}"),
        });
    }
    let a = target / mean;
    let (ew, eb, cw) = (model.embed_head.w, model.embed_head.b, model.class_head.w);
    for id in [ew, eb] {
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = (*v as f64 * a) as f32);
    }
    model.store.get_mut(cw).data_mut().iter_mut().for_each(|v| *v = (*v as f64 / a) as f32);
    Ok(a)
}

/// Pretraining loss with the parameters supplied as graph handles in store
/// order (used by gradient checks).
pub fn classification_loss<F: Float>(
    model: &EncoderModel<F>,
    g: &Graph<F>,
    params: &[Var],
    x: &Tensor<F>,
    labels: &[usize],
) -> Var {
    let bound = Bound::from_vars(params.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cx = Fwd::train(g, &bound, &mut rng);
    let xv = g.constant(x.clone());
    let emb = model.forward_embed(&mut cx, xv);
    let logits = model.forward_logits(&cx, emb);
    g.cross_entropy(logits, labels)
}
