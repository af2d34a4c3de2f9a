//! Log-mel front end and fixed-size framing.

mod array;

pub use array::{read_array, write_array, ArraySidecar, NormConstants};

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_manifest, manifest_dir, read_wav, write_manifest, RecordKind, UtteranceRecord};
use crate::error::{Error, IoContext, Result};
use crate::tensor::{Float, Tensor};

pub const N_MELS: usize = 128;
pub const FRAME_T: usize = 129;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Frames enter the networks as `[time, mel]` = 129×128.
    #[default]
    TimeMel,
    MelTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub log_ceil: f64,
    pub layout: Layout,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: -10.0,
            log_ceil: 2.0,
            layout: Layout::TimeMel,
        }
    }
}

pub const LOG_EPS: f64 = 1e-10;

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_rate > 0
            && self.win_length > 0
            && self.hop_length > 0
            && self.n_fft >= self.win_length
            && self.fmin_hz >= 0.0
            && self.fmax_hz > self.fmin_hz
            && self.fmax_hz <= self.sample_rate as f64 / 2.0
            && self.log_ceil > self.log_floor;
        if !ok {
            return Err(Error::Config("inconsistent [features] settings".into()));
        }
        Ok(())
    }

    pub fn hop_s(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn norm_constants(&self) -> NormConstants {
        NormConstants {
            log_floor: self.log_floor,
            log_ceil: self.log_ceil,
            eps: LOG_EPS,
        }
    }

    /// Number of STFT frames for `n` samples (centered framing).
    pub fn n_frames(&self, n: usize) -> usize {
        1 + n / self.hop_length
    }
}

/// Normalized log-mel matrix, row-major `[n_frames × N_MELS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
    pub n_frames: usize,
    pub hop_s: f64,
    pub utt_id: String,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>, n_frames: usize, hop_s: f64, utt_id: &str) -> Result<Self> {
        if values.len() != n_frames * N_MELS {
            return Err(Error::Shape(format!(
                "{n_frames} frames × {N_MELS} bins needs {} values, got {}",
                n_frames * N_MELS,
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_frames,
            hop_s,
            utt_id: utt_id.to_string(),
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * N_MELS..(t + 1) * N_MELS]
    }
}

/// One `FRAME_T × N_MELS` training window cut from a spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramFrame {
    pub values: Vec<f32>,
    pub utt_id: String,
    pub start_frame: usize,
    /// Trailing rows that are padding rather than signal.
    pub pad: usize,
}

impl SpectrogramFrame {
    pub fn new(values: Vec<f32>, utt_id: &str, start_frame: usize, pad: usize) -> Result<Self> {
        if values.len() != FRAME_T * N_MELS {
            return Err(Error::Shape(format!(
                "frame must hold {FRAME_T}×{N_MELS} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            utt_id: utt_id.to_string(),
            start_frame,
            pad,
        })
    }

    /// Network input `[1, 1, H, W]` in the configured layout.
    pub fn to_tensor(&self, layout: Layout) -> Tensor<f32> {
        let data = match layout {
            Layout::TimeMel => self.values.clone(),
            Layout::MelTime => transpose(&self.values, FRAME_T, N_MELS),
        };
        let (h, w) = frame_hw(layout);
        Tensor::from_vec(&[1, 1, h, w], data).expect("frame size")
    }

    pub fn from_tensor(t: &Tensor<f32>, layout: Layout, utt_id: &str, start_frame: usize, pad: usize) -> Result<Self> {
        if t.numel() != FRAME_T * N_MELS {
            return Err(Error::Shape(format!("tensor {:?} is not one frame", t.shape())));
        }
        let values = match layout {
            Layout::TimeMel => t.data().to_vec(),
            Layout::MelTime => transpose(t.data(), N_MELS, FRAME_T),
        };
        Self::new(values, utt_id, start_frame, pad)
    }
}

/// `(height, width)` of a frame tensor.
pub fn frame_hw(layout: Layout) -> (usize, usize) {
    match layout {
        Layout::TimeMel => (FRAME_T, N_MELS),
        Layout::MelTime => (N_MELS, FRAME_T),
    }
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_hz / f_sp + (f / min_log_hz).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        m * f_sp
    } else {
        min_log_hz * ((m - min_log_mel) * logstep).exp()
    }
}

/// Triangular filters with unit peaks on the Slaney mel scale,
/// `[N_MELS × (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut fb = vec![0.0; N_MELS * n_bins];
    for m in 0..N_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            fb[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    fb
}

/// Reusable STFT/mel state.
pub struct LogMel {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fb: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fb: mel_filterbank(cfg),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Map a natural mel energy to the normalized [-1, 1] range.
    pub fn normalize(&self, energy: f64) -> f32 {
        let v = (energy + LOG_EPS).log10().clamp(self.cfg.log_floor, self.cfg.log_ceil);
        (2.0 * (v - self.cfg.log_floor) / (self.cfg.log_ceil - self.cfg.log_floor) - 1.0) as f32
    }

    pub fn compute(&self, audio: &[f32], utt_id: &str) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        if audio.len() < cfg.win_length {
            return Err(Error::validation(format!(
                "{utt_id}: {} samples is shorter than one {}-sample window",
                audio.len(),
                cfg.win_length
            )));
        }
        if audio.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{utt_id}: non-finite audio samples")));
        }
        let n_frames = cfg.n_frames(audio.len());
        let half = cfg.win_length / 2;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut mag = vec![0.0; n_bins];
        let mut values = Vec::with_capacity(n_frames * N_MELS);
        for t in 0..n_frames {
            let start = (t * cfg.hop_length) as isize - half as isize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < audio.len() {
                    buf[i].re = audio[j as usize] as f64 * w;
                }
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for m in 0..N_MELS {
                let row = &self.fb[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&mag).map(|(a, b)| a * b).sum();
                values.push(self.normalize(e));
            }
        }
        Spectrogram::new(values, n_frames, cfg.hop_s(), utt_id)
    }
}

pub fn compute_logmel(audio: &[f32], sample_rate: u32) -> Result<Spectrogram> {
    let cfg = FeatureConfig {
        sample_rate,
        fmax_hz: (sample_rate as f64 / 2.0).min(8000.0),
        ..FeatureConfig::default()
    };
    LogMel::new(&cfg)?.compute(audio, "")
}

/// The normalized value of zero energy; used for frame padding.
pub fn floor_value(cfg: &FeatureConfig) -> f32 {
    (2.0 * ((LOG_EPS.log10().clamp(cfg.log_floor, cfg.log_ceil)) - cfg.log_floor)
        / (cfg.log_ceil - cfg.log_floor)
        - 1.0) as f32
}

/// Split into non-overlapping windows of `FRAME_T` rows; the last one is
/// padded with the silence floor and records its pad length.
pub fn frame(spec: &Spectrogram) -> Vec<SpectrogramFrame> {
    frame_with_pad(spec, -1.0)
}

pub fn frame_with_pad(spec: &Spectrogram, pad_value: f32) -> Vec<SpectrogramFrame> {
    let n = spec.n_frames.div_ceil(FRAME_T);
    (0..n)
        .map(|i| {
            let start = i * FRAME_T;
            let end = (start + FRAME_T).min(spec.n_frames);
            let mut values = spec.values[start * N_MELS..end * N_MELS].to_vec();
            let pad = FRAME_T - (end - start);
            values.resize(FRAME_T * N_MELS, pad_value);
            SpectrogramFrame {
                values,
                utt_id: spec.utt_id.clone(),
                start_frame: start,
                pad,
            }
        })
        .collect()
}

/// Inverse of [`frame`]: sort by origin, check the windows tile
/// `[0, total_t)` exactly, and strip padding.
pub fn unframe(frames: &[SpectrogramFrame], total_t: usize, hop_s: f64) -> Result<Spectrogram> {
    let first = frames
        .first()
        .ok_or_else(|| Error::validation("unframe needs at least one frame"))?;
    if frames.iter().any(|f| f.utt_id != first.utt_id) {
        return Err(Error::validation("frames come from different utterances"));
    }
    let mut order: Vec<&SpectrogramFrame> = frames.iter().collect();
    order.sort_by_key(|f| f.start_frame);
    let expected = total_t.div_ceil(FRAME_T);
    if order.len() != expected {
        return Err(Error::validation(format!(
            "{} frames cannot tile {total_t} steps (need {expected})",
            order.len()
        )));
    }
    let mut values = Vec::with_capacity(total_t * N_MELS);
    for (i, f) in order.iter().enumerate() {
        if f.start_frame != i * FRAME_T {
            return Err(Error::validation(format!(
                "frame origin {} leaves a gap or overlap (expected {})",
                f.start_frame,
                i * FRAME_T
            )));
        }
        let keep = (total_t - f.start_frame).min(FRAME_T);
        values.extend_from_slice(&f.values[..keep * N_MELS]);
    }
    Spectrogram::new(values, total_t, hop_s, &first.utt_id)
}

/// Load the spectrogram of a record: featurize audio, or read a cached array.
pub fn load_spectrogram(rec: &UtteranceRecord, manifest_dir: &Path, mel: &LogMel) -> Result<Spectrogram> {
    let path = rec.resolve_audio(manifest_dir);
    match rec.kind {
        RecordKind::Spectrogram => {
            let (spec, _) = read_array(&path)?;
            Ok(spec)
        }
        RecordKind::Audio => {
            let (audio, sr) = read_wav(&path)?;
            if sr != mel.config().sample_rate {
                return Err(Error::validation(format!(
                    "{}: sample rate {sr} differs from configured {}",
                    rec.utt_id,
                    mel.config().sample_rate
                )));
            }
            mel.compute(&audio, &rec.utt_id)
        }
    }
}

/// Cache the log-mel spectrogram of every record in `manifest` as a portable
/// array under `out_dir/arrays`, and write `out_dir/manifest.jsonl` whose
/// records point at those arrays.
pub fn featurize_manifest(manifest: &Path, out_dir: &Path, mel: &LogMel) -> Result<std::path::PathBuf> {
    let records = load_manifest(manifest)?;
    let dir = manifest_dir(manifest);
    let arrays = out_dir.join("arrays");
    std::fs::create_dir_all(&arrays).with_path(&arrays)?;
    let norm = mel.config().norm_constants();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let spec = load_spectrogram(&rec, &dir, mel)?;
        let rel = format!("arrays/{}.f32", rec.utt_id);
        write_array(&out_dir.join(&rel), &spec, &norm)?;
        out.push(UtteranceRecord {
            audio_ref: rel,
            kind: RecordKind::Spectrogram,
            ..rec
        });
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &out)?;
    Ok(path)
}

/// Frames of every record, in record order.
pub fn load_record_frames(
    records: &[UtteranceRecord],
    manifest_dir: &Path,
    mel: &LogMel,
) -> Result<Vec<Vec<SpectrogramFrame>>> {
    records
        .iter()
        .map(|r| load_spectrogram(r, manifest_dir, mel).map(|s| frame(&s)))
        .collect()
}

/// Stack frames into a network batch `[N, 1, H, W]`.
pub fn batch_tensor<F: Float>(frames: &[&SpectrogramFrame], layout: Layout) -> Tensor<F> {
    let (h, w) = frame_hw(layout);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        let t = f.to_tensor(layout);
        data.extend(t.data().iter().map(|&v| F::cst(v as f64)));
    }
    Tensor::from_vec(&[frames.len(), 1, h, w], data).expect("frame batch")
}
