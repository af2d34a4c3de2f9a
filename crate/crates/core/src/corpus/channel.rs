//! Parametric recording channels: peaking EQ, band limits, gain and white noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Second-order IIR section with normalized coefficients (`a0 == 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn normalized(b0: f64, b1: f64, b2: f64, a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b0: b0 / a0,
            b1: b1 / a0,
            b2: b2 / a0,
            a1: a1 / a0,
            a2: a2 / a0,
        }
    }

    /// Cookbook peaking EQ.
    pub fn peaking(fs: f64, f0: f64, gain_db: f64, q: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        Self::normalized(
            1.0 + alpha * a,
            -2.0 * cw,
            1.0 - alpha * a,
            1.0 + alpha / a,
            -2.0 * cw,
            1.0 - alpha / a,
        )
    }

    pub fn lowpass(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        Self::normalized(
            (1.0 - cw) / 2.0,
            1.0 - cw,
            (1.0 - cw) / 2.0,
            1.0 + alpha,
            -2.0 * cw,
            1.0 - alpha,
        )
    }

    pub fn highpass(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        Self::normalized(
            (1.0 + cw) / 2.0,
            -(1.0 + cw),
            (1.0 + cw) / 2.0,
            1.0 + alpha,
            -2.0 * cw,
            1.0 - alpha,
        )
    }

    /// Constant 0 dB peak-gain bandpass.
    pub fn bandpass(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        Self::normalized(alpha, 0.0, -alpha, 1.0 + alpha, -2.0 * cw, 1.0 - alpha)
    }

    /// Filter `x` in place (transposed direct form II, zero initial state).
    pub fn process(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b0 * xin + s1;
            s1 = self.b1 * xin - self.a1 * y + s2;
            s2 = self.b2 * xin - self.a2 * y;
            *v = y;
        }
    }

    /// Magnitude response at `f` Hz.
    pub fn magnitude(&self, fs: f64, f: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b0 + self.b1 * c1 + self.b2 * c2, self.b1 * s1 + self.b2 * s2);
        let den = (1.0 + self.a1 * c1 + self.a2 * c2, self.a1 * s1 + self.a2 * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Section Qs of an 8th-order Butterworth response split into four biquads.
pub fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * theta.sin())
        })
        .collect()
}

pub const BAND_LIMIT_ORDER: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqBand {
    pub freq_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelProfile {
    pub name: String,
    #[serde(default)]
    pub eq_bands: Vec<EqBand>,
    #[serde(default)]
    pub lowpass_hz: Option<f64>,
    #[serde(default)]
    pub highpass_hz: Option<f64>,
    #[serde(default)]
    pub gain_db: f64,
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ChannelProfile {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            eq_bands: Vec::new(),
            lowpass_hz: None,
            highpass_hz: None,
            gain_db: 0.0,
            noise_snr_db: None,
            seed: 0,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let bad = |what: String| Err(Error::validation(format!("profile {}: {what}", self.name)));
        if self.name.is_empty() {
            return Err(Error::validation("profile name is empty"));
        }
        for b in &self.eq_bands {
            if !(b.q > 0.0) || !b.q.is_finite() {
                return bad(format!("band at {} Hz needs Q > 0", b.freq_hz));
            }
            if !(b.freq_hz > 0.0 && b.freq_hz < nyq) || !b.gain_db.is_finite() {
                return bad(format!("band at {} Hz is outside (0, {nyq})", b.freq_hz));
            }
        }
        for (label, f) in [("lowpass_hz", self.lowpass_hz), ("highpass_hz", self.highpass_hz)] {
            if let Some(f) = f {
                if !(f > 0.0 && f < nyq) {
                    return bad(format!("{label}={f} outside (0, {nyq})"));
                }
            }
        }
        if let (Some(hp), Some(lp)) = (self.highpass_hz, self.lowpass_hz) {
            if hp >= lp {
                return bad(format!("highpass_hz {hp} must be below lowpass_hz {lp}"));
            }
        }
        if !self.gain_db.is_finite() || self.noise_snr_db.is_some_and(|s| !s.is_finite()) {
            return bad("gain and SNR must be finite".into());
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.eq_bands.is_empty()
            && self.lowpass_hz.is_none()
            && self.highpass_hz.is_none()
            && self.gain_db == 0.0
            && self.noise_snr_db.is_none()
    }

    /// The filter cascade in application order.
    pub fn sections(&self, sample_rate: u32) -> Vec<Biquad> {
        let fs = sample_rate as f64;
        let mut out: Vec<Biquad> = self
            .eq_bands
            .iter()
            .map(|b| Biquad::peaking(fs, b.freq_hz, b.gain_db, b.q))
            .collect();
        let qs = butterworth_qs(BAND_LIMIT_ORDER);
        if let Some(hp) = self.highpass_hz {
            out.extend(qs.iter().map(|&q| Biquad::highpass(fs, hp, q)));
        }
        if let Some(lp) = self.lowpass_hz {
            out.extend(qs.iter().map(|&q| Biquad::lowpass(fs, lp, q)));
        }
        out
    }
}

/// FNV-1a, used to key per-file noise streams by utterance id.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Noise stream key for one file: independent of generation order.
pub fn noise_seed(profile_seed: u64, utt_id: &str) -> u64 {
    profile_seed.rotate_left(29) ^ fnv1a(utt_id)
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pass `audio` through `profile`. `noise_key` selects the noise stream
/// (see [`noise_seed`]). The output has the input's length.
pub fn apply_channel(
    audio: &[f32],
    profile: &ChannelProfile,
    sample_rate: u32,
    noise_key: u64,
) -> Result<Vec<f32>> {
    if let Some(i) = audio.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite input sample at {i}")));
    }
    profile.validate(sample_rate)?;
    if profile.is_identity() {
        return Ok(audio.to_vec());
    }
    let mut x: Vec<f64> = audio.iter().map(|&v| v as f64).collect();
    for s in profile.sections(sample_rate) {
        s.process(&mut x);
    }
    let g = 10f64.powf(profile.gain_db / 20.0);
    x.iter_mut().for_each(|v| *v *= g);
    if let Some(snr) = profile.noise_snr_db {
        let level = rms(&x);
        if level > 0.0 {
            let sigma = level / 10f64.powf(snr / 20.0);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_key);
            for v in x.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
    }
    Ok(x.into_iter().map(|v| v as f32).collect())
}

/// Shipped profile bank. `clean` and `webcam-ish` are the translation
/// source and target; the other four train the channel encoder.
pub fn preset_profiles() -> Vec<ChannelProfile> {
    let band = |freq_hz: f64, gain_db: f64, q: f64| EqBand { freq_hz, gain_db, q };
    vec![
        ChannelProfile::identity("clean"),
        ChannelProfile {
            name: "webcam-ish".into(),
            eq_bands: vec![band(2500.0, 8.0, 1.2), band(400.0, -6.0, 0.9)],
            lowpass_hz: Some(4500.0),
            highpass_hz: Some(250.0),
            gain_db: -4.0,
            noise_snr_db: Some(20.0),
            seed: 11,
        },
        ChannelProfile {
            name: "telephone-ish".into(),
            eq_bands: vec![band(1800.0, 4.0, 1.0)],
            lowpass_hz: Some(3400.0),
            highpass_hz: Some(300.0),
            gain_db: 0.0,
            noise_snr_db: Some(30.0),
            seed: 23,
        },
        ChannelProfile {
            name: "laptop-ish".into(),
            eq_bands: vec![band(600.0, -8.0, 0.8), band(5000.0, 6.0, 1.5)],
            lowpass_hz: Some(7000.0),
            highpass_hz: Some(150.0),
            gain_db: -2.0,
            noise_snr_db: Some(18.0),
            seed: 37,
        },
        ChannelProfile {
            name: "muffled".into(),
            eq_bands: vec![band(250.0, 6.0, 0.7)],
            lowpass_hz: Some(1800.0),
            highpass_hz: None,
            gain_db: 2.0,
            noise_snr_db: Some(35.0),
            seed: 41,
        },
        ChannelProfile {
            name: "lavalier-ish".into(),
            eq_bands: vec![band(6000.0, 7.0, 0.9), band(150.0, -6.0, 0.7)],
            lowpass_hz: None,
            highpass_hz: Some(100.0),
            gain_db: 0.0,
            noise_snr_db: Some(40.0),
            seed: 53,
        },
    ]
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const FS: u32 = 16000;

    fn sine(f: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / FS as f64).sin() as f32 * 0.5)
            .collect()
    }

    fn rms32(x: &[f32]) -> f64 {
        (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn zero_audio_through_noiseless_profile_is_zero() {
        let mut p = preset_profiles()[2].clone();
        p.noise_snr_db = None;
        let out = apply_channel(&vec![0.0; 800], &p, FS, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_profile_is_bit_identical() {
        let x: Vec<f32> = (0..500).map(|i| ((i * 7919) % 113) as f32 / 113.0 - 0.4).collect();
        assert_eq!(apply_channel(&x, &ChannelProfile::identity("dry"), FS, 3).unwrap(), x);
    }

    #[test]
    fn lowpass_500_attenuates_1khz_sine() {
        let mut p = ChannelProfile::identity("lp");
        p.lowpass_hz = Some(500.0);
        let x = sine(1000.0, FS as usize);
        let y = apply_channel(&x, &p, FS, 0).unwrap();
        // Skip the filter's start-up transient.
        let settle = 2000;
        let ratio = rms32(&y[settle..]) / rms32(&x[settle..]);
        assert!(ratio < 0.1, "ratio {ratio}");
        // Reference: bilinear-transformed analog Butterworth magnitude with
        // cutoff prewarping, |H| = 1 / sqrt(1 + (tan(pi f/fs) / tan(pi fc/fs))^(2N)).
        let t = |f: f64| (std::f64::consts::PI * f / FS as f64).tan();
        let expect = 1.0 / (1.0 + (t(1000.0) / t(500.0)).powi(2 * BAND_LIMIT_ORDER as i32)).sqrt();
        assert!((ratio - expect).abs() / expect < 0.05, "{ratio} vs {expect}");
    }

    #[test]
    fn butterworth_cascade_matches_analog_prototype() {
        let fs = FS as f64;
        let fc = 3000.0;
        let qs = butterworth_qs(8);
        for q in [0.5098, 0.6013, 0.9000, 2.5629] {
            assert!(qs.iter().any(|&v| (v - q).abs() < 1e-4), "{qs:?}");
        }
        let t = |f: f64| (std::f64::consts::PI * f / fs).tan();
        for f in [100.0, 1000.0, 2900.0, 3000.0, 4000.0, 7000.0] {
            let cascade: f64 = qs.iter().map(|&q| Biquad::lowpass(fs, fc, q).magnitude(fs, f)).product();
            let analog = 1.0 / (1.0 + (t(f) / t(fc)).powi(16)).sqrt();
            assert!((cascade - analog).abs() < 1e-9, "f={f}: {cascade} vs {analog}");
        }
    }

    #[test]
    fn peaking_band_hits_its_gain_at_center() {
        let b = Biquad::peaking(16000.0, 1000.0, 6.0, 1.0);
        let db = 20.0 * b.magnitude(16000.0, 1000.0).log10();
        assert!((db - 6.0).abs() < 1e-9);
        assert!((b.magnitude(16000.0, 10.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn noise_matches_requested_snr() {
        let mut p = ChannelProfile::identity("n");
        p.noise_snr_db = Some(20.0);
        let x = sine(440.0, 32000);
        let y = apply_channel(&x, &p, FS, 9).unwrap();
        let noise: Vec<f32> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let snr = 20.0 * (rms32(&x) / rms32(&noise)).log10();
        assert!((snr - 20.0).abs() < 0.3, "snr {snr}");
    }

    #[test]
    fn invalid_profiles_and_inputs_are_rejected() {
        let mut p = ChannelProfile::identity("bad");
        p.highpass_hz = Some(4000.0);
        p.lowpass_hz = Some(1000.0);
        assert!(p.validate(FS).is_err());
        let mut p = ChannelProfile::identity("bad");
        p.eq_bands.push(EqBand { freq_hz: 1000.0, gain_db: 3.0, q: 0.0 });
        assert!(p.validate(FS).is_err());
        let mut p = ChannelProfile::identity("bad");
        p.lowpass_hz = Some(8000.0);
        assert!(p.validate(FS).is_err());
        assert!(apply_channel(&[0.0, f32::NAN], &ChannelProfile::identity("x"), FS, 0).is_err());
        for p in preset_profiles() {
            p.validate(FS).unwrap();
        }
    }

    fn spectrum(x: &[f32]) -> Vec<f64> {
        // Naive DFT magnitude on a coarse grid; enough to compare profiles.
        (1..64)
            .map(|k| {
                let f = k as f64 * 125.0;
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let ph = 2.0 * std::f64::consts::PI * f * n as f64 / FS as f64;
                    re += v as f64 * ph.cos();
                    im -= v as f64 * ph.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn deterministic_and_length_preserving(
            seed in any::<u64>(),
            n in 1usize..1500,
            which in 0usize..6,
        ) {
            let x: Vec<f32> = (0..n).map(|i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0 - 0.5).collect();
            let p = &preset_profiles()[which];
            let a = apply_channel(&x, p, FS, seed).unwrap();
            let b = apply_channel(&x, p, FS, seed).unwrap();
            prop_assert_eq!(a.len(), n);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn octave_apart_lowpass_profiles_differ(seed in any::<u64>(), lp in 700.0f64..3500.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..1024).map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (0.1 * v) as f32
            }).collect();
            let mut a = ChannelProfile::identity("a");
            a.lowpass_hz = Some(lp);
            let mut b = a.clone();
            b.lowpass_hz = Some(lp * 2.0);
            let sa = spectrum(&apply_channel(&x, &a, FS, 0).unwrap());
            let sb = spectrum(&apply_channel(&x, &b, FS, 0).unwrap());
            let diff: f64 = sa.iter().zip(&sb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = sb.iter().map(|q| q * q).sum::<f64>().sqrt();
            prop_assert!(diff / norm > 0.01, "relative distance {}", diff / norm);
        }
    }
}
