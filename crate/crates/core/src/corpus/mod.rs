//! Manifests, synthetic channels and the parallel multi-channel desk corpus.

pub mod channel;
pub mod manifest;
pub mod speech;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use channel::{apply_channel, preset_profiles, ChannelProfile, EqBand};
pub use manifest::{load_manifest, manifest_dir, validate_records, write_manifest, RecordKind, UtteranceRecord};

use crate::error::{Error, IoContext, Result};

pub const SAMPLE_RATE: u32 = 16000;

/// Read a mono WAV file as `f32` samples in [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path.display().to_string(), io),
        other => Error::Wav(other),
    })?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::validation(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<Vec<_>, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Write 16-bit mono PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_path(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanCorpusSpec {
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
    pub seed: u64,
}

impl Default for CleanCorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 240,
            n_speakers: 12,
            min_dur_s: 1.0,
            max_dur_s: 1.28,
            seed: 0,
        }
    }
}

/// Render a synthetic clean corpus under `out_dir` and return its manifest path.
pub fn gen_clean(spec: &CleanCorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.n_speakers == 0 || spec.min_dur_s <= 0.0 || spec.max_dur_s < spec.min_dur_s {
        return Err(Error::validation("clean corpus needs speakers and a valid duration range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speakers: Vec<speech::Speaker> = (0..spec.n_speakers)
        .map(|i| speech::Speaker::random(&format!("spk{i:02}"), &mut rng))
        .collect();
    let mut records = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let spk = &speakers[i % speakers.len()];
        let dur = if spec.max_dur_s > spec.min_dur_s {
            rng.random_range(spec.min_dur_s..spec.max_dur_s)
        } else {
            spec.min_dur_s
        };
        let (audio, transcript) = speech::synth_utterance(spk, dur, SAMPLE_RATE, rng.random());
        let utt_id = format!("utt{i:04}");
        let rel = format!("wav/{utt_id}.wav");
        write_wav(&out_dir.join(&rel), &audio, SAMPLE_RATE)?;
        records.push(UtteranceRecord {
            set_id: utt_id.clone(),
            utt_id,
            speaker_id: spk.id.clone(),
            channel_label: "dry".into(),
            audio_ref: rel,
            transcript,
            sample_rate: SAMPLE_RATE,
            kind: RecordKind::Audio,
            source_utt: None,
            target_utt: None,
        });
    }
    let path = out_dir.join("clean.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Pass every clean record through every profile. Each clean utterance
/// becomes one set spanning all profiles. Returns the new manifest path.
pub fn synth_corpus(
    clean_records: &[UtteranceRecord],
    clean_dir: &Path,
    profiles: &[ChannelProfile],
    out_dir: &Path,
) -> Result<PathBuf> {
    if profiles.is_empty() {
        return Err(Error::validation("synth_corpus needs at least one profile"));
    }
    let mut names = HashSet::new();
    for p in profiles {
        if !names.insert(p.name.as_str()) {
            return Err(Error::validation(format!("profile {} listed twice", p.name)));
        }
    }
    fs::create_dir_all(out_dir).with_path(out_dir)?;
    let mut records = Vec::with_capacity(clean_records.len() * profiles.len());
    for clean in clean_records {
        let (audio, sr) = read_wav(&clean.resolve_audio(clean_dir))?;
        for p in profiles {
            let utt_id = format!("{}__{}", clean.utt_id, p.name);
            let out = apply_channel(&audio, p, sr, channel::noise_seed(p.seed, &utt_id))?;
            let rel = format!("audio/{}/{utt_id}.wav", p.name);
            write_wav(&out_dir.join(&rel), &out, sr)?;
            records.push(UtteranceRecord {
                utt_id,
                set_id: clean.set_id.clone(),
                speaker_id: clean.speaker_id.clone(),
                channel_label: p.name.clone(),
                audio_ref: rel,
                transcript: clean.transcript.clone(),
                sample_rate: sr,
                kind: RecordKind::Audio,
                source_utt: None,
                target_utt: None,
            });
        }
    }
    manifest::validate_records(&records)?;
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

/// A seeded, rounded `fraction` of the distinct set ids.
pub fn holdout_sets(records: &[UtteranceRecord], fraction: f64, seed: u64) -> HashSet<String> {
    let mut sets: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.set_id.as_str()) {
            sets.push(&r.set_id);
        }
    }
    sets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (sets.len() as f64 * fraction).round() as usize;
    sets[..n_held].iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub source_records: Vec<UtteranceRecord>,
    pub target_records: Vec<UtteranceRecord>,
    pub held_out: Vec<UtteranceRecord>,
}

impl CorpusSplit {
    pub fn new(
        source_records: Vec<UtteranceRecord>,
        target_records: Vec<UtteranceRecord>,
        held_out: Vec<UtteranceRecord>,
    ) -> Result<Self> {
        let src: HashSet<&str> = source_records.iter().map(|r| r.channel_label.as_str()).collect();
        if let Some(r) = target_records.iter().find(|r| src.contains(r.channel_label.as_str())) {
            return Err(Error::validation(format!(
                "channel {} appears in both source and target domains",
                r.channel_label
            )));
        }
        Ok(Self {
            source_records,
            target_records,
            held_out,
        })
    }

    /// Split by channel label. A seeded `held_out_fraction` of sets is
    /// withheld from both domains for evaluation.
    pub fn from_records(
        records: &[UtteranceRecord],
        source_channels: &[String],
        target_channels: &[String],
        held_out_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::validation("held_out_fraction must be in [0, 1)"));
        }
        let held = holdout_sets(records, held_out_fraction, seed);
        let (mut src, mut tgt, mut out) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            let is_src = source_channels.contains(&r.channel_label);
            let is_tgt = target_channels.contains(&r.channel_label);
            if !(is_src || is_tgt) {
                continue;
            }
            if held.contains(&r.set_id) {
                out.push(r.clone());
            } else if is_src {
                src.push(r.clone());
            } else {
                tgt.push(r.clone());
            }
        }
        Self::new(src, tgt, out)
    }
}

/// Draw `n` source and `n` target records independently (no set pairing).
pub fn sample_unpaired(
    split: &CorpusSplit,
    n: usize,
    seed: u64,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    let avail = split.source_records.len().min(split.target_records.len());
    if n > avail {
        return Err(Error::validation(format!(
            "requested {n} utterances per domain, only {avail} available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &[UtteranceRecord]| -> Vec<UtteranceRecord> {
        rand::seq::index::sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    };
    let src = draw(&split.source_records);
    let tgt = draw(&split.target_records);
    Ok((src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(utt: &str, set: &str, ch: &str) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: utt.into(),
            set_id: set.into(),
            speaker_id: "k".into(),
            channel_label: ch.into(),
            audio_ref: String::new(),
            transcript: set.into(),
            sample_rate: SAMPLE_RATE,
            kind: RecordKind::Audio,
            source_utt: None,
            target_utt: None,
        }
    }

    fn split_of(n: usize) -> CorpusSplit {
        let src = (0..n).map(|i| rec(&format!("s{i}"), &format!("a{i}"), "src")).collect();
        let tgt = (0..n).map(|i| rec(&format!("t{i}"), &format!("b{i}"), "tgt")).collect();
        CorpusSplit::new(src, tgt, Vec::new()).unwrap()
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x: Vec<f32> = (0..100).map(|i| (i as f32 / 50.0) - 1.0).collect();
        write_wav(&p, &x, SAMPLE_RATE).unwrap();
        let (y, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, SAMPLE_RATE);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn synth_corpus_counts_and_sets() {
        let dir = tempfile::tempdir().unwrap();
        let clean = gen_clean(
            &CleanCorpusSpec {
                n_utterances: 3,
                n_speakers: 2,
                min_dur_s: 0.3,
                max_dur_s: 0.4,
                seed: 5,
            },
            &dir.path().join("clean"),
        )
        .unwrap();
        let clean_recs = load_manifest(&clean).unwrap();
        let profiles = &preset_profiles()[..4];
        let out = synth_corpus(&clean_recs, &manifest_dir(&clean), profiles, &dir.path().join("corpus")).unwrap();
        let recs = load_manifest(&out).unwrap();
        assert_eq!(recs.len(), 12);
        let sets: HashSet<_> = recs.iter().map(|r| r.set_id.clone()).collect();
        assert_eq!(sets.len(), 3);
        for r in &recs {
            let c = clean_recs.iter().find(|c| c.set_id == r.set_id).unwrap();
            assert_eq!(r.transcript, c.transcript);
            let (a, _) = read_wav(&r.resolve_audio(&manifest_dir(&out))).unwrap();
            let (b, _) = read_wav(&c.resolve_audio(&manifest_dir(&clean))).unwrap();
            assert_eq!(a.len(), b.len());
        }
        assert!(matches!(
            synth_corpus(&clean_recs, &manifest_dir(&clean), &[], &dir.path().join("x")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn forty_plus_forty_from_two_profiles() {
        let mut recs = Vec::new();
        for i in 0..40 {
            recs.push(rec(&format!("u{i}_a"), &format!("u{i}"), "clean"));
            recs.push(rec(&format!("u{i}_b"), &format!("u{i}"), "webcam-ish"));
        }
        let split = CorpusSplit::from_records(&recs, &["clean".into()], &["webcam-ish".into()], 0.0, 1).unwrap();
        let (s, t) = sample_unpaired(&split, 40, 3).unwrap();
        assert_eq!((s.len(), t.len()), (40, 40));
    }

    #[test]
    fn sample_unpaired_contracts() {
        let split = split_of(100);
        let (s, t) = sample_unpaired(&split, 0, 1).unwrap();
        assert!(s.is_empty() && t.is_empty());
        assert_eq!(sample_unpaired(&split, 40, 7).unwrap(), sample_unpaired(&split, 40, 7).unwrap());
        let (s, t) = sample_unpaired(&split, 40, 7).unwrap();
        let su: HashSet<_> = s.iter().map(|r| &r.utt_id).collect();
        let tu: HashSet<_> = t.iter().map(|r| &r.utt_id).collect();
        assert_eq!((su.len(), tu.len()), (40, 40));
        assert!(s.iter().all(|r| r.channel_label == "src"));
        assert!(t.iter().all(|r| r.channel_label == "tgt"));
        assert!(sample_unpaired(&split, 101, 7).is_err());
    }

    #[test]
    fn overlapping_domains_are_rejected() {
        assert!(CorpusSplit::new(vec![rec("a", "1", "x")], vec![rec("b", "2", "x")], vec![]).is_err());
    }

    #[test]
    fn held_out_sets_leave_both_domains() {
        let mut recs = Vec::new();
        for i in 0..20 {
            recs.push(rec(&format!("u{i}_a"), &format!("u{i}"), "clean"));
            recs.push(rec(&format!("u{i}_b"), &format!("u{i}"), "web"));
        }
        let split = CorpusSplit::from_records(&recs, &["clean".into()], &["web".into()], 0.25, 4).unwrap();
        assert_eq!(split.held_out.len(), 10);
        assert_eq!(split.source_records.len(), 15);
        let held: HashSet<_> = split.held_out.iter().map(|r| &r.set_id).collect();
        assert!(split.source_records.iter().all(|r| !held.contains(&r.set_id)));
    }
}
