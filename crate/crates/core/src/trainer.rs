//! Alternating discriminator / generator optimization against a frozen
//! channel encoder, with resumable checkpoints and a per-step metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, NegativesFrom, TrainConfig};
use crate::encoder::{ChannelEmbedding, EncoderModel};
use crate::error::{Error, IoContext, Result};
use crate::corpus::{load_manifest, manifest_dir, sample_unpaired, CorpusSplit};
use crate::features::{batch_tensor, load_record_frames, Layout, LogMel, SpectrogramFrame};
use crate::gan::{
    Discriminator, DiscriminatorArch, Generator, GeneratorArch, ProjectionArch, ProjectionHeads, N_TAPS,
};
use crate::losses::{channel_recon_graph, d_loss_graph, freeze, g_adv_graph, total_loss, LossBreakdown};
use crate::nn::{Adam, AdamConfig, Fwd, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_HEADER: &str = "step,adv_d,adv_g,pcl_src,pcl_tgt,ch,total";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Discriminator objective (ascended).
    pub adv_d: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct GanBundle {
    pub g: Generator,
    pub d: Discriminator,
    pub proj: ProjectionHeads,
}

impl GanBundle {
    pub fn new(cfg: &Config, d_c: usize, layout: Layout) -> Result<Self> {
        let seed = cfg.train.seed;
        let g = Generator::new(GeneratorArch::from_config(&cfg.gan, d_c, layout), cfg.gan.init_std, seed)?;
        let d = Discriminator::new(
            DiscriminatorArch {
                widths: cfg.gan.disc_widths.clone(),
            },
            cfg.gan.init_std,
            seed.wrapping_add(1),
        )?;
        let proj = ProjectionHeads::new(
            ProjectionArch {
                in_channels: g.arch.tap_channels().to_vec(),
                dim: cfg.gan.proj_dim,
            },
            cfg.gan.init_std,
            seed.wrapping_add(2),
        )?;
        Ok(Self { g, d, proj })
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub models: GanBundle,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub opt_p: Adam<f32>,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    epoch: usize,
    adam: AdamConfig,
    adam_steps: [u64; 3],
    generator: GeneratorArch,
    discriminator: DiscriminatorArch,
    projection: ProjectionArch,
    metrics: Vec<StepMetrics>,
}

fn insert_moments(ck: &mut Checkpoint, prefix: &str, opt: &Adam<f32>, store: &ParamStore<f32>) {
    for id in store.ids() {
        let i = id.index();
        if let (Some(Some(m)), Some(Some(v))) = (opt.m.get(i), opt.v.get(i)) {
            ck.insert(format!("{prefix}.m/{}", store.name(id)), m.clone());
            ck.insert(format!("{prefix}.v/{}", store.name(id)), v.clone());
        }
    }
}

fn load_moments(ck: &Checkpoint, prefix: &str, cfg: AdamConfig, step: u64, store: &ParamStore<f32>) -> Adam<f32> {
    let mut opt = Adam::new(cfg);
    opt.step = step;
    opt.m = vec![None; store.len()];
    opt.v = vec![None; store.len()];
    for id in store.ids() {
        let name = store.name(id);
        opt.m[id.index()] = ck.get(&format!("{prefix}.m/{name}")).cloned();
        opt.v[id.index()] = ck.get(&format!("{prefix}.v/{name}")).cloned();
    }
    opt
}

impl TrainState {
    pub fn new(cfg: &Config, d_c: usize, layout: Layout) -> Result<Self> {
        let adam = cfg.train.adam();
        Ok(Self {
            step: 0,
            epoch: 0,
            models: GanBundle::new(cfg, d_c, layout)?,
            opt_g: Adam::new(adam),
            opt_d: Adam::new(adam),
            opt_p: Adam::new(adam),
            metrics: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let m = &self.models;
        let mut ck = Checkpoint::new("train_state", config_hash);
        ck.header.d_c = Some(m.g.arch.d_c);
        let meta = StateMeta {
            step: self.step,
            epoch: self.epoch,
            adam: self.opt_g.cfg,
            adam_steps: [self.opt_g.step, self.opt_d.step, self.opt_p.step],
            generator: m.g.arch.clone(),
            discriminator: m.d.arch.clone(),
            projection: m.proj.arch.clone(),
            metrics: self.metrics.clone(),
        };
        ck.header.meta = serde_json::to_value(&meta).expect("state meta serializes");
        ck.insert_store("g/", &m.g.store);
        ck.insert_store("d/", &m.d.store);
        ck.insert_store("p/", &m.proj.store);
        insert_moments(&mut ck, "opt_g", &self.opt_g, &m.g.store);
        insert_moments(&mut ck, "opt_d", &self.opt_d, &m.d.store);
        insert_moments(&mut ck, "opt_p", &self.opt_p, &m.proj.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("train_state")?;
        let meta: StateMeta = serde_json::from_value(ck.header.meta.clone())?;
        let mut g = Generator::new(meta.generator, 0.02, 0)?;
        let mut d = Discriminator::new(meta.discriminator, 0.02, 0)?;
        let mut proj = ProjectionHeads::new(meta.projection, 0.02, 0)?;
        ck.load_store("g/", &mut g.store)?;
        ck.load_store("d/", &mut d.store)?;
        ck.load_store("p/", &mut proj.store)?;
        let [sg, sd, sp] = meta.adam_steps;
        Ok(Self {
            step: meta.step,
            epoch: meta.epoch,
            opt_g: load_moments(ck, "opt_g", meta.adam, sg, &g.store),
            opt_d: load_moments(ck, "opt_d", meta.adam, sd, &d.store),
            opt_p: load_moments(ck, "opt_p", meta.adam, sp, &proj.store),
            models: GanBundle { g, d, proj },
            metrics: meta.metrics,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Independent generator streams for one step.
struct StepRng {
    pairing: ChaCha8Rng,
    dropout: ChaCha8Rng,
    patches: ChaCha8Rng,
}

fn step_rng(seed: u64, step: usize) -> StepRng {
    let base = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mk = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(stream);
        r
    };
    StepRng {
        pairing: mk(1),
        dropout: mk(2),
        patches: mk(3),
    }
}

/// A target-domain frame and the embedding of the utterance it came from.
#[derive(Clone, Copy)]
pub struct TargetItem<'a> {
    pub frame: &'a SpectrogramFrame,
    pub embedding: &'a [f32],
}

/// One ascent step on the discriminator objective. Returns the objective
/// before the update.
pub fn discriminator_update(
    d: &mut Discriminator,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let g = Graph::new();
    let bound = d.store.bind(&g, true);
    let cx = Fwd::eval(&g, &bound);
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let lr_real = d.forward(&cx, rv);
    let lr_fake = d.forward(&cx, fv);
    let loss = d_loss_graph(&g, lr_real, lr_fake);
    let objective = -(g.value(loss).item() as f64);
    if !objective.is_finite() {
        return Err(Error::Numeric {
            component: "adv_d".into(),
            detail: format!("discriminator objective {objective}"),
        });
    }
    g.backward(loss)?;
    let grads = d.store.grads(&g, &bound);
    opt.update(&mut d.store, &grads, lr);
    Ok(objective)
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Mean contrastive loss over taps and batch items between `src_taps`
/// (keys, detached) and `sim_taps` (queries).
#[allow(clippy::too_many_arguments)]
fn patch_contrast(
    g: &Graph<f32>,
    cx: &Fwd<f32>,
    proj: &ProjectionHeads,
    src_taps: &[Var],
    sim_taps: &[Var],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Var {
    let mut terms = Vec::new();
    for l in 0..N_TAPS {
        let sh = g.shape(src_taps[l]);
        let positions = crate::gan::sample_positions(sh[2] * sh[3], cfg.n_patches, rng);
        for b in 0..sh[0] {
            let k_raw = g.gather(src_taps[l], b, &positions);
            let k = proj.forward(cx, l, k_raw);
            let k = g.detach(k);
            let q_raw = g.gather(sim_taps[l], b, &positions);
            let q = proj.forward(cx, l, q_raw);
            let bank = match cfg.negatives_from {
                NegativesFrom::Source => k,
                NegativesFrom::Simulated => q,
            };
            terms.push(g.contrastive(q, k, bank, true, cfg.tau as f32));
        }
    }
    let n = terms.len();
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| g.add(acc, t));
    g.scale(sum, 1.0 / n as f32)
}

/// One discriminator update followed by one generator + projection update.
/// A non-finite loss aborts before the parameters it would update change.
pub fn train_step(
    state: &mut TrainState,
    batch_src: &[&SpectrogramFrame],
    batch_tgt: &[TargetItem<'_>],
    encoder: &EncoderModel,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    if batch_src.is_empty() || batch_tgt.is_empty() {
        return Err(Error::validation("train_step needs source and target frames"));
    }
    let layout = state.models.g.arch.layout;
    let d_c = state.models.g.arch.d_c;
    if encoder.d_c() != d_c || encoder.meta.layout != layout {
        return Err(Error::validation("encoder and generator disagree on d_c or layout"));
    }
    let mut rngs = step_rng(cfg.seed, state.step);
    let pairing: Vec<usize> = (0..batch_src.len())
        .map(|_| rngs.pairing.random_range(0..batch_tgt.len()))
        .collect();
    let c_src: Vec<f32> = pairing.iter().flat_map(|&j| batch_tgt[j].embedding.iter().copied()).collect();
    let c_tgt: Vec<f32> = batch_tgt.iter().flat_map(|t| t.embedding.iter().copied()).collect();
    if c_tgt.len() != batch_tgt.len() * d_c {
        return Err(Error::validation(format!("target embeddings must have {d_c} entries")));
    }
    let tgt_frames: Vec<&SpectrogramFrame> = batch_tgt.iter().map(|t| t.frame).collect();
    let x = batch_tensor::<f32>(batch_src, layout);
    let y = batch_tensor::<f32>(&tgt_frames, layout);

    let GanBundle { g: gen, d: disc, proj } = &mut state.models;
    let g = Graph::new();
    let gb = gen.store.bind(&g, true);
    let pb = proj.store.bind(&g, true);
    let frozen = freeze(encoder, &g);
    let mut cx = Fwd::train(&g, &gb, &mut rngs.dropout);
    let xv = g.constant(x);
    let yv = g.constant(y.clone());
    let csv = g.constant(Tensor::from_vec(&[batch_src.len(), d_c], c_src)?);
    let ctv = g.constant(Tensor::from_vec(&[batch_tgt.len(), d_c], c_tgt)?);
    let fwd = gen.forward(&mut cx, xv, csv, false);
    let fake = fwd.out.expect("full pass");
    let idt = gen.forward(&mut cx, yv, ctv, false);
    let idt_out = idt.out.expect("full pass");
    let fake_taps = gen.forward(&mut cx, fake, csv, true).taps;
    let idt_taps = gen.forward(&mut cx, idt_out, ctv, true).taps;
    drop(cx);

    let fake_value = g.value(fake).clone();
    let adv_d = discriminator_update(disc, &mut state.opt_d, &y, &fake_value, lr)?;

    let db = disc.store.bind(&g, false);
    let dcx = Fwd::eval(&g, &db);
    let logits = disc.forward(&dcx, fake);
    let adv = g_adv_graph(&g, logits, cfg.adv_form);
    let pcx = Fwd::eval(&g, &pb);
    let pcl_src = patch_contrast(&g, &pcx, proj, &fwd.taps, &fake_taps, cfg, &mut rngs.patches);
    let pcl_tgt = patch_contrast(&g, &pcx, proj, &idt.taps, &idt_taps, cfg, &mut rngs.patches);
    let ch = channel_recon_graph(&g, encoder, &frozen, fake, csv);
    let lam = cfg.lambda_ch as f32;
    let t = g.add(adv, pcl_src);
    let t = g.add(t, pcl_tgt);
    let wch = g.scale(ch, lam);
    let total = g.add(t, wch);

    let losses = total_loss(
        scalar(&g, adv),
        scalar(&g, pcl_src),
        scalar(&g, pcl_tgt),
        scalar(&g, ch),
        cfg.lambda_ch,
    )?;
    g.backward(total)?;
    let gg = gen.store.grads(&g, &gb);
    let pg = proj.store.grads(&g, &pb);
    state.opt_g.update(&mut gen.store, &gg, lr);
    state.opt_p.update(&mut proj.store, &pg, lr);
    let m = StepMetrics {
        step: state.step,
        adv_d,
        losses,
    };
    state.step += 1;
    state.metrics.push(m);
    Ok(m)
}

/// Learning rate for a 0-based epoch: constant, then (optionally) linear
/// decay toward zero over the second half.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let half = cfg.epochs / 2;
    if !cfg.lr_decay || epoch < half {
        return cfg.lr;
    }
    let span = (cfg.epochs - half) as f64;
    cfg.lr * (cfg.epochs - epoch) as f64 / span
}

/// Frames and per-utterance target embeddings for one training run.
pub struct TrainData {
    pub source_frames: Vec<SpectrogramFrame>,
    pub target_frames: Vec<SpectrogramFrame>,
    /// Index into `target_embeddings` for each target frame.
    pub target_utt_of_frame: Vec<usize>,
    pub target_embeddings: Vec<ChannelEmbedding>,
}

impl TrainData {
    pub fn new(source: Vec<Vec<SpectrogramFrame>>, target: Vec<Vec<SpectrogramFrame>>, encoder: &EncoderModel) -> Result<Self> {
        let source_frames: Vec<_> = source.into_iter().flatten().collect();
        if source_frames.is_empty() || target.iter().all(Vec::is_empty) {
            return Err(Error::validation("training needs frames from both domains"));
        }
        let mut target_frames = Vec::new();
        let mut target_utt_of_frame = Vec::new();
        let mut target_embeddings = Vec::new();
        for utt in target.into_iter().filter(|u| !u.is_empty()) {
            target_embeddings.push(encoder.embed_utterance(&utt)?);
            target_utt_of_frame.extend(std::iter::repeat_n(target_embeddings.len() - 1, utt.len()));
            target_frames.extend(utt);
        }
        Ok(Self {
            source_frames,
            target_frames,
            target_utt_of_frame,
            target_embeddings,
        })
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.source_frames.len().div_ceil(batch_size)
    }

    /// Split `manifest` by the configured source/target channels and load
    /// `n_per_domain` unpaired utterances from each domain.
    pub fn from_manifest(cfg: &Config, manifest: &Path, encoder: &EncoderModel) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let dir = manifest_dir(manifest);
        let c = &cfg.corpus;
        let split = CorpusSplit::from_records(
            &records,
            std::slice::from_ref(&c.source_channel),
            std::slice::from_ref(&c.target_channel),
            c.held_out_fraction,
            c.seed,
        )?;
        let (src, tgt) = sample_unpaired(&split, c.n_per_domain, cfg.train.seed)?;
        let mel = LogMel::new(&cfg.features)?;
        Self::new(load_record_frames(&src, &dir, &mel)?, load_record_frames(&tgt, &dir, &mel)?, encoder)
    }
}

pub fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.adv_d, l.adv, l.pcl_src, l.pcl_tgt, l.ch, l.total
        ));
    }
    fs::write(path, s).with_path(path)
}

/// Parsed metrics rows: `(step, [adv_d, adv_g, pcl_src, pcl_tgt, ch, total])`.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, [f64; 6])>> {
    let text = fs::read_to_string(path).with_path(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header {METRICS_HEADER}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", cols.len())));
        }
        let step = cols[0].parse().map_err(|e| err(format!("step: {e}")))?;
        let mut vals = [0.0; 6];
        for (v, c) in vals.iter_mut().zip(&cols[1..]) {
            *v = c.parse().map_err(|e| err(format!("{c}: {e}")))?;
        }
        rows.push((step, vals));
    }
    Ok(rows)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub generator_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

fn nan_dump(out_dir: &Path, state: &TrainState, err: &Error) {
    let path = out_dir.join("nan_dump.json");
    let body = serde_json::json!({
        "step": state.step,
        "epoch": state.epoch,
        "error": err.to_string(),
        "last_metrics": state.metrics.last(),
    });
    if let Ok(mut f) = fs::File::create(&path) {
        let _ = writeln!(f, "{body:#}");
    }
    log::error!("aborting at step {}: {err} (dump: {})", state.step, path.display());
}

/// Run epochs `state.epoch..cfg.train.epochs`. One epoch is one shuffled
/// pass over all source frames; target frames are drawn uniformly.
pub fn train(cfg: &Config, data: &TrainData, encoder: &EncoderModel, out_dir: &Path, resume: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let hash = cfg.hash();
    fs::create_dir_all(out_dir).with_path(out_dir)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg, encoder.d_c(), cfg.features.layout)?,
    };
    let metrics_path = out_dir.join("metrics.csv");
    let mut checkpoints = Vec::new();
    let n_src = data.source_frames.len();
    while state.epoch < tc.epochs {
        let epoch = state.epoch;
        let lr = lr_at(tc, epoch);
        let mut order: Vec<usize> = (0..n_src).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5851_F42D_4C95_7F2D ^ epoch as u64));
        for chunk in order.chunks(tc.batch_size) {
            let src: Vec<&SpectrogramFrame> = chunk.iter().map(|&i| &data.source_frames[i]).collect();
            let mut trng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x2545_F491_4F6C_DD1D ^ state.step as u64);
            let tgt: Vec<TargetItem> = (0..tc.batch_size)
                .map(|_| {
                    let i = trng.random_range(0..data.target_frames.len());
                    TargetItem {
                        frame: &data.target_frames[i],
                        embedding: &data.target_embeddings[data.target_utt_of_frame[i]].vec,
                    }
                })
                .collect();
            if let Err(e) = train_step(&mut state, &src, &tgt, encoder, tc, lr) {
                if matches!(e, Error::Numeric { .. }) {
                    nan_dump(out_dir, &state, &e);
                }
                return Err(e);
            }
        }
        state.epoch += 1;
        let last = state.epoch == tc.epochs;
        if last || (tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every == 0) {
            let p = checkpoint_path(out_dir, state.epoch);
            state.to_checkpoint(&hash).save(&p)?;
            write_metrics(&metrics_path, &state.metrics)?;
            checkpoints.push(p);
        }
        if let Some(m) = state.metrics.last() {
            log::info!(
                "epoch {}/{} lr {lr:.2e} adv_d {:.4} adv_g {:.4} pcl {:.4}/{:.4} ch {:.4}",
                state.epoch,
                tc.epochs,
                m.adv_d,
                m.losses.adv,
                m.losses.pcl_src,
                m.losses.pcl_tgt,
                m.losses.ch
            );
        }
    }
    let generator_path = out_dir.join("generator.ckpt");
    state.models.g.to_checkpoint(&hash).save(&generator_path)?;
    state.models.d.to_checkpoint(&hash).save(&out_dir.join("discriminator.ckpt"))?;
    state.models.proj.to_checkpoint(&hash).save(&out_dir.join("projection.ckpt"))?;
    write_metrics(&metrics_path, &state.metrics)?;
    Ok(TrainOutcome {
        state,
        generator_path,
        metrics_path,
        checkpoints,
    })
}
