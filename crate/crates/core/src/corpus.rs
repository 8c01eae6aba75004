//! Seeded speech-like test signals.
//!
//! Each utterance is a run of syllables: a voiced harmonic segment with a
//! gliding pitch and three formant resonances, sometimes preceded by a
//! fricative noise burst, separated by short low-level pauses. Nothing here
//! is meant to sound like speech; it only needs the spectro-temporal texture
//! (harmonics, onsets, pauses) that over-smoothing destroys.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;

/// Output gain. Keeps log-mel values of the default profiles inside the
/// codec's fixed [-100, 0] dB range.
pub const LEVEL: f64 = 0.03;

#[derive(Debug, Clone, Copy)]
pub struct UtteranceSpec {
    pub sample_rate: u32,
    pub seconds: f64,
    pub seed: u64,
}

fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(center, width)| (-(f - center).powi(2) / (2.0 * width * width)).exp())
        .sum::<f64>()
        + 0.02
}

pub fn utterance(spec: UtteranceSpec) -> AudioBuffer {
    let sr = spec.sample_rate as f64;
    let n = (spec.seconds * sr).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![0.0; n];
    let nyquist = sr / 2.0;

    let mut pos = (rng.random_range(0.03..0.08) * sr) as usize;
    while pos < n {
        let syl_len = (rng.random_range(0.12..0.26) * sr) as usize;
        let pause = (rng.random_range(0.03..0.09) * sr) as usize;

        if rng.random_bool(0.4) {
            // fricative: differenced white noise, short decay
            let len = (rng.random_range(0.03..0.07) * sr) as usize;
            let amp = rng.random_range(0.02..0.06);
            let mut prev = 0.0;
            for i in 0..len {
                let Some(slot) = out.get_mut(pos + i) else { break };
                let w: f64 = rng.random_range(-1.0..1.0);
                let env = (PI * i as f64 / len as f64).sin();
                *slot += amp * env * (w - prev);
                prev = w;
            }
            pos += len;
        }

        let f0_start = rng.random_range(200.0..320.0);
        let f0_end = f0_start * rng.random_range(0.75..1.25);
        let formants = [
            (rng.random_range(500.0..950.0), 90.0),
            (rng.random_range(1200.0..2400.0), 140.0),
            (rng.random_range(2600.0..3600.0), 220.0),
        ];
        let amp = rng.random_range(0.15..0.35);
        let mut phase = 0.0;
        for i in 0..syl_len {
            let Some(slot) = out.get_mut(pos + i) else { break };
            let frac = i as f64 / syl_len as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += 2.0 * PI * f0 / sr;
            // fast attack, slower release
            let env = (frac * 12.0).min(1.0) * (1.0 - frac).powf(0.7);
            let mut s = 0.0;
            let mut h = 1;
            while h as f64 * f0 < nyquist.min(5000.0) {
                s += formant_gain(h as f64 * f0, &formants) * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            *slot += amp * env * s * 0.3;
        }
        pos += syl_len + pause;
    }

    // breath-level noise so pauses are not digital silence
    for s in out.iter_mut() {
        *s += rng.random_range(-1.0..1.0) * 3e-4;
        *s = (*s * LEVEL).clamp(-0.99, 0.99);
    }
    AudioBuffer::new(out, spec.sample_rate).expect("finite synthetic audio")
}

/// `count` utterances with durations in `[0.9, 1.5)` seconds.
pub fn corpus(sample_rate: u32, count: usize, seed: u64) -> Vec<AudioBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            utterance(UtteranceSpec {
                sample_rate,
                seconds: rng.random_range(0.9..1.5),
                seed: rng.random(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = corpus(16000, 2, 9);
        let b = corpus(16000, 2, 9);
        assert_eq!(a, b);
        for u in &a {
            assert!(u.samples().iter().all(|s| s.abs() < 1.0));
            assert!(u.duration_secs() >= 0.9 && u.duration_secs() < 1.5);
            let peak = u.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
            assert!(peak > 0.05 * LEVEL);
        }
    }
}
