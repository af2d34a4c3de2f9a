//! Portable array files: raw little-endian `f32` plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Spectrogram, N_MELS};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub log_floor: f64,
    pub log_ceil: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub utt_id: String,
    pub shape: Vec<usize>,
    pub hop_s: f64,
    pub norm_constants: NormConstants,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `spec` to `path` (conventionally `*.f32`) and its sidecar next to it.
pub fn write_array(path: &Path, spec: &Spectrogram, norm: &NormConstants) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_path(dir)?;
    }
    let bytes: Vec<u8> = spec.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_path(path)?;
    let side = ArraySidecar {
        utt_id: spec.utt_id.clone(),
        shape: vec![spec.n_frames, N_MELS],
        hop_s: spec.hop_s,
        norm_constants: norm.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&side)?).with_path(&sp)
}

pub fn read_array(path: &Path) -> Result<(Spectrogram, ArraySidecar)> {
    let sp = sidecar_path(path);
    let side: ArraySidecar = serde_json::from_slice(&fs::read(&sp).with_path(&sp)?)?;
    let bytes = fs::read(path).with_path(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::validation(format!("{}: length is not a multiple of 4", path.display())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let [t, m] = side.shape[..] else {
        return Err(Error::Shape(format!("{}: expected a 2-d array", sp.display())));
    };
    if m != N_MELS {
        return Err(Error::Shape(format!("{}: {m} mel bins, expected {N_MELS}", sp.display())));
    }
    let spec = Spectrogram::new(values, t, side.hop_s, &side.utt_id)?;
    Ok((spec, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/u1.f32");
        let vals: Vec<f32> = (0..3 * N_MELS).map(|i| (i as f32).sin()).collect();
        let s = Spectrogram::new(vals, 3, 0.01, "u1").unwrap();
        let norm = NormConstants { log_floor: -10.0, log_ceil: 2.0, eps: 1e-10 };
        write_array(&p, &s, &norm).unwrap();
        let (back, side) = read_array(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(side.shape, vec![3, N_MELS]);
        assert_eq!(side.norm_constants, norm);
    }
}
