//! Independent oracles shared by the integration and acceptance tests. They
//! deliberately avoid the library's own framing, FFT and filterbank code.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use melfix::dsp::{MelConfig, MelSpectrogram, Profile};

/// Mirror-pad by building the padded signal explicitly, one bounce at a time.
pub fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut remaining = pad;
    let mut left = Vec::new();
    let mut right = Vec::new();
    // bounce back and forth until both sides are long enough
    while remaining > 0 {
        if cur.len() == 1 {
            left = vec![cur[0]; remaining];
            right = vec![cur[0]; remaining];
            break;
        }
        let take = remaining.min(cur.len() - 1);
        let l: Vec<f64> = (1..=take).rev().map(|i| cur[i]).collect();
        let r: Vec<f64> = (0..take).map(|i| cur[cur.len() - 2 - i]).collect();
        let mut next = l.clone();
        next.extend_from_slice(&cur);
        next.extend_from_slice(&r);
        left.splice(0..0, l);
        right.extend(r);
        cur = next;
        remaining -= take;
    }
    let mut out = left;
    out.extend_from_slice(x);
    out.extend(right);
    out
}

/// `|DFT|` of every centered, Hann-windowed frame by direct summation.
/// Returns `[bin][frame]`.
pub fn naive_stft(x: &[f64], n_fft: usize, win: usize, hop: usize) -> Vec<Vec<f64>> {
    let padded = reflect_pad(x, n_fft / 2);
    let frames = 1 + x.len() / hop;
    let off = (n_fft - win) / 2;
    let w: Vec<f64> = (0..n_fft)
        .map(|n| {
            if n < off || n >= off + win {
                0.0
            } else {
                let k = (n - off) as f64;
                0.5 - 0.5 * (2.0 * PI * k / win as f64).cos()
            }
        })
        .collect();
    let mut out = vec![vec![0.0; frames]; n_fft / 2 + 1];
    for t in 0..frames {
        let frame = &padded[t * hop..t * hop + n_fft];
        for (k, row) in out.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..n_fft {
                let ang = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                re += frame[n] * w[n] * ang.cos();
                im -= frame[n] * w[n] * ang.sin();
            }
            row[t] = re.hypot(im);
        }
    }
    out
}

/// Triangle weights straight from the center-frequency formula.
pub fn triangle_filterbank(n_mels: usize, n_fft: usize, sr: f64, f_min: f64, f_max: f64) -> Vec<Vec<f64>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(f_min), mel(f_max));
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| hz(lo + i as f64 * (hi - lo) / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    if f <= pts[m] || f >= pts[m + 2] {
                        0.0
                    } else if f <= pts[m + 1] {
                        (f - pts[m]) / (pts[m + 1] - pts[m])
                    } else {
                        (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1])
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random spectrogram with values in `[lo, hi]` under the desk16k configs.
pub fn random_mel(rng: &mut ChaCha8Rng, n_mels: usize, frames: usize, lo: f64, hi: f64) -> MelSpectrogram {
    let p = Profile::Desk16k;
    let cfg = MelConfig { n_mels, ..p.mel() };
    let values = (0..n_mels * frames).map(|_| rng.random_range(lo..=hi)).collect();
    MelSpectrogram::new(values, n_mels, frames, p.stft(), cfg, "rand").unwrap()
}

pub fn max_norm_rel_error(a: &[f64], oracle: &[f64]) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(oracle).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
