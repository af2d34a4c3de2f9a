//! Synthetic clean speech: source-filter vowels, noise fricatives and nasals
//! strung into syllables, with per-speaker pitch and vocal-tract scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::channel::Biquad;

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub f0_hz: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    pub breathiness: f64,
}

impl Speaker {
    pub fn random(id: &str, rng: &mut impl Rng) -> Self {
        Self {
            id: id.to_string(),
            f0_hz: rng.random_range(85.0..230.0),
            formant_scale: rng.random_range(0.88..1.18),
            breathiness: rng.random_range(0.01..0.06),
        }
    }
}

struct Vowel {
    sym: &'static str,
    formants: [f64; 3],
}

const VOWELS: [Vowel; 5] = [
    Vowel { sym: "a", formants: [730.0, 1090.0, 2440.0] },
    Vowel { sym: "e", formants: [530.0, 1840.0, 2480.0] },
    Vowel { sym: "i", formants: [270.0, 2290.0, 3010.0] },
    Vowel { sym: "o", formants: [570.0, 840.0, 2410.0] },
    Vowel { sym: "u", formants: [300.0, 870.0, 2240.0] },
];

#[derive(Clone, Copy)]
enum Consonant {
    /// Band-passed noise: center Hz, Q.
    Fricative(&'static str, f64, f64),
    /// Low voiced murmur: resonance Hz.
    Nasal(&'static str, f64),
}

const CONSONANTS: [Consonant; 6] = [
    Consonant::Fricative("s", 5500.0, 2.0),
    Consonant::Fricative("sh", 3000.0, 1.5),
    Consonant::Fricative("f", 4000.0, 0.5),
    Consonant::Fricative("h", 1500.0, 0.4),
    Consonant::Nasal("m", 250.0),
    Consonant::Nasal("n", 300.0),
];

impl Consonant {
    fn sym(&self) -> &'static str {
        match self {
            Consonant::Fricative(s, ..) | Consonant::Nasal(s, _) => s,
        }
    }
}

/// Short linear ramps at both ends so segments don't click.
fn envelope(n: usize, ramp: usize) -> impl Fn(usize) -> f64 {
    let ramp = ramp.min(n / 2).max(1);
    move |i| {
        let a = (i as f64 / ramp as f64).min(1.0);
        let b = ((n - 1 - i) as f64 / ramp as f64).min(1.0);
        a.min(b)
    }
}

fn glottal(n: usize, fs: f64, f0: f64, phase: &mut f64, rng: &mut ChaCha8Rng, breath: f64) -> Vec<f64> {
    let vib_rate = 5.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let f = f0 * (1.0 + 0.02 * (2.0 * std::f64::consts::PI * vib_rate * t).sin());
            *phase = (*phase + f / fs).fract();
            // Band-limited-ish pulse: steep sawtooth plus a touch of aspiration.
            let saw = 1.0 - 2.0 * *phase;
            let n: f64 = StandardNormal.sample(rng);
            saw + breath * n
        })
        .collect()
}

fn vowel_segment(v: &Vowel, spk: &Speaker, n: usize, fs: f64, phase: &mut f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let src = glottal(n, fs, spk.f0_hz * rng.random_range(0.93..1.07), phase, rng, spk.breathiness);
    let mut out = vec![0.0; n];
    let gains = [1.0, 0.6, 0.3];
    let bws = [80.0, 110.0, 160.0];
    for k in 0..3 {
        let fc = (v.formants[k] * spk.formant_scale).min(fs / 2.0 - 200.0);
        let mut y = src.clone();
        Biquad::bandpass(fs, fc, fc / bws[k]).process(&mut y);
        for (o, y) in out.iter_mut().zip(&y) {
            *o += gains[k] * y;
        }
    }
    out
}

fn consonant_segment(c: Consonant, spk: &Speaker, n: usize, fs: f64, phase: &mut f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match c {
        Consonant::Fricative(_, fc, q) => {
            let mut y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Biquad::bandpass(fs, fc.min(fs / 2.0 - 500.0), q).process(&mut y);
            y.iter_mut().for_each(|v| *v *= 0.35);
            y
        }
        Consonant::Nasal(_, fc) => {
            let mut y = glottal(n, fs, spk.f0_hz, phase, rng, spk.breathiness);
            Biquad::bandpass(fs, fc * spk.formant_scale, 3.0).process(&mut y);
            y.iter_mut().for_each(|v| *v *= 0.5);
            y
        }
    }
}

/// Render one utterance of roughly `target_s` seconds. Returns the samples
/// (peak-normalized to a random level below 0.8) and its phone transcript.
pub fn synth_utterance(spk: &Speaker, target_s: f64, sample_rate: u32, seed: u64) -> (Vec<f32>, String) {
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (target_s * fs) as usize;
    let ms = |m: f64| (m * fs / 1000.0) as usize;
    let mut out: Vec<f64> = Vec::with_capacity(total);
    let mut words: Vec<String> = Vec::new();
    let mut phase = 0.0;
    // Onset and pause placement vary per utterance, so unrelated utterances
    // do not share a speech/silence envelope.
    out.resize(ms(rng.random_range(0.0..350.0)), 0.0);
    while out.len() + ms(260.0) < total {
        let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
        let v = &VOWELS[rng.random_range(0..VOWELS.len())];
        let nc = ms(rng.random_range(50.0..110.0));
        let nv = ms(rng.random_range(90.0..180.0));
        let cs = consonant_segment(c, spk, nc, fs, &mut phase, &mut rng);
        let vs = vowel_segment(v, spk, nv, fs, &mut phase, &mut rng);
        let (ec, ev) = (envelope(nc, ms(8.0)), envelope(nv, ms(15.0)));
        let level = rng.random_range(0.6..1.0);
        out.extend(cs.iter().enumerate().map(|(i, s)| s * ec(i) * level));
        out.extend(vs.iter().enumerate().map(|(i, s)| s * ev(i) * level));
        words.push(format!("{}{}", c.sym(), v.sym));
        if rng.random_bool(0.3) {
            let gap = ms(rng.random_range(40.0..220.0));
            out.resize(out.len() + gap, 0.0);
        }
    }
    out.resize(total.max(out.len()), 0.0);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target_peak = rng.random_range(0.35..0.75);
    let scale = if peak > 0.0 { target_peak / peak } else { 0.0 };
    (out.iter().map(|v| (v * scale) as f32).collect(), words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_is_deterministic_bounded_and_nonsilent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spk = Speaker::random("s1", &mut rng);
        let (a, ta) = synth_utterance(&spk, 1.1, 16000, 42);
        let (b, tb) = synth_utterance(&spk, 1.1, 16000, 42);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.len(), 17600);
        assert!(!ta.is_empty());
        let peak = a.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak > 0.3 && peak < 0.8, "{peak}");
    }

    #[test]
    fn different_seeds_give_different_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spk = Speaker::random("s", &mut rng);
        let (_, t1) = synth_utterance(&spk, 1.2, 16000, 1);
        let (_, t2) = synth_utterance(&spk, 1.2, 16000, 2);
        assert_ne!(t1, t2);
    }
}
