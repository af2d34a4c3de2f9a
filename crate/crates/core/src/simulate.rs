//! Inference-time conversion of source utterances into the target channel
//! and the augmented manifest that inherits source transcripts.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{load_manifest, manifest_dir, write_manifest, RecordKind, UtteranceRecord};
use crate::encoder::{mean_vector, ChannelEmbedding, EncoderModel};
use crate::error::{Error, IoContext, Result};
use crate::features::{batch_tensor, frame, load_spectrogram, unframe, write_array, LogMel, Spectrogram, SpectrogramFrame};
use crate::gan::Generator;
use crate::losses::l1;
use crate::tensor::Tensor;

const CONVERT_CHUNK: usize = 8;

/// Translate every frame of `src` under one fixed embedding.
pub fn convert_with_embedding(g: &Generator, src: &Spectrogram, c: &ChannelEmbedding) -> Result<Spectrogram> {
    let d_c = g.arch.d_c;
    if c.vec.len() != d_c {
        return Err(Error::validation(format!(
            "embedding has {} entries, generator expects {d_c}",
            c.vec.len()
        )));
    }
    let layout = g.arch.layout;
    let frames = frame(src);
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(CONVERT_CHUNK) {
        let refs: Vec<&SpectrogramFrame> = chunk.iter().collect();
        let x = batch_tensor::<f32>(&refs, layout);
        let ct = Tensor::from_vec(&[chunk.len(), d_c], c.vec.repeat(chunk.len()))?;
        let y = g.generate_tensor(&x, &ct)?;
        for (i, f) in chunk.iter().enumerate() {
            out.push(SpectrogramFrame::from_tensor(&y.batch_item(i), layout, &f.utt_id, f.start_frame, f.pad)?);
        }
    }
    unframe(&out, src.n_frames, src.hop_s)
}

/// Convert `src` conditioned on the mean frame embedding of one target
/// utterance. The output has the same shape as `src`.
pub fn convert_utterance(g: &Generator, encoder: &EncoderModel, src: &Spectrogram, tgt_frames: &[SpectrogramFrame]) -> Result<Spectrogram> {
    if tgt_frames.is_empty() {
        return Err(Error::validation("target utterance has no frames"));
    }
    let c = encoder.embed_utterance(tgt_frames)?;
    convert_with_embedding(g, src, &c)
}

pub fn sim_utt_id(src_utt: &str) -> String {
    format!("{src_utt}-sim")
}

pub fn sim_channel_label(target_channel: &str) -> String {
    format!("simulated:{target_channel}")
}

/// Draw a target index for each source record, uniformly with `seed`.
pub fn assign_targets(n_sources: usize, n_targets: usize, seed: u64) -> Result<Vec<usize>> {
    if n_targets == 0 {
        return Err(Error::validation("target manifest is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_sources).map(|_| rng.random_range(0..n_targets)).collect())
}

/// Convert every source record and write arrays plus `manifest.jsonl` under
/// `out_dir`. Returns the manifest path.
pub fn simulate_dataset(
    g: &Generator,
    encoder: &EncoderModel,
    mel: &LogMel,
    source_manifest: &Path,
    target_manifest: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    let sources = load_manifest(source_manifest)?;
    let targets = load_manifest(target_manifest)?;
    let (src_dir, tgt_dir) = (manifest_dir(source_manifest), manifest_dir(target_manifest));
    let assignment = assign_targets(sources.len(), targets.len(), seed)?;
    let arrays = out_dir.join("arrays");
    fs::create_dir_all(&arrays).with_path(&arrays)?;
    let mut embeddings: HashMap<usize, ChannelEmbedding> = HashMap::new();
    let mut out = Vec::with_capacity(sources.len());
    for (rec, &ti) in sources.iter().zip(&assignment) {
        let tgt = &targets[ti];
        if let Entry::Vacant(slot) = embeddings.entry(ti) {
            let frames = frame(&load_spectrogram(tgt, &tgt_dir, mel)?);
            slot.insert(encoder.embed_utterance(&frames)?);
        }
        let src = load_spectrogram(rec, &src_dir, mel)?;
        let mut sim = convert_with_embedding(g, &src, &embeddings[&ti])?;
        let id = sim_utt_id(&rec.utt_id);
        sim.utt_id = id.clone();
        let rel = format!("arrays/{id}.f32");
        write_array(&out_dir.join(&rel), &sim, &mel.config().norm_constants())?;
        out.push(UtteranceRecord {
            utt_id: id,
            set_id: rec.set_id.clone(),
            speaker_id: rec.speaker_id.clone(),
            channel_label: sim_channel_label(&tgt.channel_label),
            audio_ref: rel,
            transcript: rec.transcript.clone(),
            sample_rate: rec.sample_rate,
            kind: RecordKind::Spectrogram,
            source_utt: Some(rec.utt_id.clone()),
            target_utt: Some(tgt.utt_id.clone()),
        });
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &out)?;
    Ok(path)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 1e-12 && sbb > 1e-12).then(|| sab / (saa * sbb).sqrt())
}

/// Mean over mel bins of the Pearson correlation across time between two
/// spectrograms, over their common length. Bins constant in either input
/// are skipped.
pub fn content_correlation(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    let t = a.n_frames.min(b.n_frames);
    if t < 2 {
        return Err(Error::validation("correlation needs at least two time steps"));
    }
    let bins = crate::features::N_MELS;
    let mut sum = 0.0;
    let mut used = 0;
    for k in 0..bins {
        let xa: Vec<f64> = (0..t).map(|i| a.values[i * bins + k] as f64).collect();
        let xb: Vec<f64> = (0..t).map(|i| b.values[i * bins + k] as f64).collect();
        if let Some(r) = pearson(&xa, &xb) {
            sum += r;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::validation("no bin varies in both spectrograms"));
    }
    Ok(sum / used as f64)
}

/// Content preservation: mean correlation of each source with its
/// simulation, and mean correlation of each source with the next source
/// (cyclically), an unrelated utterance.
pub fn content_preservation(sources: &[Spectrogram], sims: &[Spectrogram]) -> Result<(f64, f64)> {
    if sources.len() < 2 || sources.len() != sims.len() {
        return Err(Error::validation("need ≥2 aligned source/simulated pairs"));
    }
    let n = sources.len();
    let mut paired = 0.0;
    let mut unrelated = 0.0;
    for i in 0..n {
        paired += content_correlation(&sources[i], &sims[i])?;
        unrelated += content_correlation(&sources[i], &sources[(i + 1) % n])?;
    }
    Ok((paired / n as f64, unrelated / n as f64))
}

/// Embedding-space transfer: mean L1 distance to `centroid` of the source
/// utterances and of their simulations.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TransferMetrics {
    pub source_to_centroid: f64,
    pub simulated_to_centroid: f64,
}

impl TransferMetrics {
    pub fn ratio(&self) -> f64 {
        self.simulated_to_centroid / self.source_to_centroid
    }
}

pub fn utterance_embedding(encoder: &EncoderModel, spec: &Spectrogram) -> Result<Vec<f32>> {
    Ok(encoder.embed_utterance(&frame(spec))?.vec)
}

pub fn centroid(embeddings: &[Vec<f32>]) -> Result<Vec<f32>> {
    if embeddings.is_empty() {
        return Err(Error::validation("centroid of no embeddings"));
    }
    Ok(mean_vector(embeddings))
}

pub fn transfer_metrics(encoder: &EncoderModel, sources: &[Spectrogram], sims: &[Spectrogram], centroid: &[f32]) -> Result<TransferMetrics> {
    if sources.is_empty() || sources.len() != sims.len() {
        return Err(Error::validation("need aligned, non-empty source and simulated sets"));
    }
    let mut ds = 0.0;
    let mut dm = 0.0;
    for (s, m) in sources.iter().zip(sims) {
        ds += l1(&utterance_embedding(encoder, s)?, centroid);
        dm += l1(&utterance_embedding(encoder, m)?, centroid);
    }
    let n = sources.len() as f64;
    Ok(TransferMetrics {
        source_to_centroid: ds / n,
        simulated_to_centroid: dm / n,
    })
}

/// Held-out evaluation of a trained converter, written as `metrics.json`
/// next to a simulated dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimulationEval {
    pub source_to_centroid: f64,
    pub simulated_to_centroid: f64,
    pub transfer_ratio: f64,
    pub content_corr_paired: f64,
    pub content_corr_unrelated: f64,
}

/// Transfer toward the centroid of `targets` and content preservation of
/// `sims` relative to their `sources`.
pub fn evaluate_simulation(encoder: &EncoderModel, sources: &[Spectrogram], sims: &[Spectrogram], targets: &[Spectrogram]) -> Result<SimulationEval> {
    let target_embs = targets.iter().map(|s| utterance_embedding(encoder, s)).collect::<Result<Vec<_>>>()?;
    let tm = transfer_metrics(encoder, sources, sims, &centroid(&target_embs)?)?;
    let (paired, unrelated) = content_preservation(sources, sims)?;
    Ok(SimulationEval {
        source_to_centroid: tm.source_to_centroid,
        simulated_to_centroid: tm.simulated_to_centroid,
        transfer_ratio: tm.ratio(),
        content_corr_paired: paired,
        content_corr_unrelated: unrelated,
    })
}
