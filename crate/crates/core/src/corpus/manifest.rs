use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    #[default]
    Audio,
    /// `audio_ref` points at a portable array file of a log-mel spectrogram.
    Spectrogram,
}

impl RecordKind {
    fn is_audio(&self) -> bool {
        *self == RecordKind::Audio
    }
}

/// One line of a JSONL manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Groups recordings of identical content across channels.
    pub set_id: String,
    pub speaker_id: String,
    pub channel_label: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_ref: String,
    pub transcript: String,
    pub sample_rate: u32,
    #[serde(default, skip_serializing_if = "RecordKind::is_audio")]
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_utt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_utt: Option<String>,
}

impl UtteranceRecord {
    pub fn resolve_audio(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.audio_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

/// Directory that relative `audio_ref`s of a manifest resolve against.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = fs::File::open(path).with_path(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_path(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    validate_records(&records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_path(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).with_path(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").with_path(path)?;
    }
    w.flush().with_path(path)
}

/// Check the record invariants: unique `utt_id`, positive sample rate, and
/// within each `set_id` identical transcript and speaker with distinct channels.
pub fn validate_records(records: &[UtteranceRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    let mut sets: HashMap<&str, (&str, &str, HashSet<&str>)> = HashMap::new();
    for r in records {
        if !seen.insert(r.utt_id.as_str()) {
            return Err(Error::validation(format!("duplicate utt_id {}", r.utt_id)));
        }
        if r.sample_rate == 0 {
            return Err(Error::validation(format!("{}: sample_rate must be positive", r.utt_id)));
        }
        let entry = sets
            .entry(r.set_id.as_str())
            .or_insert_with(|| (r.transcript.as_str(), r.speaker_id.as_str(), HashSet::new()));
        if entry.0 != r.transcript || entry.1 != r.speaker_id {
            return Err(Error::validation(format!(
                "set {} mixes transcripts or speakers (at {})",
                r.set_id, r.utt_id
            )));
        }
        if !entry.2.insert(r.channel_label.as_str()) {
            return Err(Error::validation(format!(
                "set {} has channel {} twice",
                r.set_id, r.channel_label
            )));
        }
    }
    Ok(())
}

/// Records grouped by `set_id`, in order of first appearance.
pub fn group_by_set(records: &[UtteranceRecord]) -> Vec<(String, Vec<&UtteranceRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&UtteranceRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(r.set_id.as_str())
            .or_insert_with(|| {
                order.push(r.set_id.clone());
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|s| {
            let g = groups.remove(s.as_str()).unwrap_or_default();
            (s, g)
        })
        .collect()
}
