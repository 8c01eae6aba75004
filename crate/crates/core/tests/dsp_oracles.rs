mod common;

use common::{max_norm_rel_error, naive_stft, random_signal, rng, triangle_filterbank};
use melfix::audio::AudioBuffer;
use melfix::dsp::{
    hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, stft_magnitude, MelConfig, Profile, StftConfig,
};
use proptest::prelude::*;

fn stft(x: &[f64], n_fft: usize, win: usize, hop: usize) -> Vec<f64> {
    let audio = AudioBuffer::new(x.to_vec(), 16000).unwrap();
    let cfg = StftConfig {
        win_length: win,
        hop_length: hop,
        n_fft,
        center: true,
    };
    stft_magnitude(&audio, &cfg).unwrap().values
}

#[test]
fn stft_matches_naive_dft() {
    let mut r = rng(1);
    for (len, n_fft, win, hop) in [(300, 64, 48, 16), (97, 32, 32, 8), (5, 16, 12, 4), (1000, 128, 100, 25)] {
        let x = random_signal(&mut r, len);
        let oracle: Vec<f64> = naive_stft(&x, n_fft, win, hop).concat();
        let err = max_norm_rel_error(&stft(&x, n_fft, win, hop), &oracle);
        assert!(err < 1e-10, "len {len} n_fft {n_fft}: {err:e}");
    }
}

#[test]
fn tiny_filterbank_matches_triangle_formula() {
    let cfg = MelConfig {
        n_mels: 2,
        f_min: 0.0,
        f_max: 4000.0,
        sample_rate: 8000,
        floor_db: -100.0,
    };
    let fb = mel_filterbank(&cfg, 8).unwrap();
    let oracle = triangle_filterbank(2, 8, 8000.0, 0.0, 4000.0);
    for m in 0..2 {
        for (a, b) in fb.row(m).iter().zip(&oracle[m]) {
            assert!((a - b).abs() <= 1e-12, "row {m}: {a} vs {b}");
        }
    }
    // hand-evaluated: centers at about 620.7 Hz and 1791.5 Hz
    assert!((fb.row(0)[1] - 0.6760).abs() < 1e-3);
    assert!((fb.row(1)[1] - 0.3240).abs() < 1e-3);
    assert!((fb.row(1)[2] - 0.9056).abs() < 1e-3);
    assert!((fb.row(1)[3] - 0.4528).abs() < 1e-3);
    assert_eq!(fb.row(0)[0], 0.0);
    assert_eq!(fb.row(1)[4], 0.0);
}

#[test]
fn profile_filterbanks_are_well_formed() {
    for p in [Profile::Desk16k, Profile::Paper48k] {
        let n_fft = p.stft().n_fft;
        let fb = mel_filterbank(&p.mel(), n_fft).unwrap();
        assert_eq!(fb.n_mels, 80);
        let oracle = triangle_filterbank(80, n_fft, p.sample_rate() as f64, 0.0, p.sample_rate() as f64 / 2.0);
        let mut last_peak = None;
        for m in 0..80 {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]), "row {m} not rising");
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]), "row {m} not falling");
            if let Some(prev) = last_peak {
                assert!(peak > prev, "peaks not strictly increasing at row {m}");
            }
            last_peak = Some(peak);
            for (a, b) in row.iter().zip(&oracle[m]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let bin_hz = p.sample_rate() as f64 / n_fft as f64;
        let (first, last) = (fb.edges_hz[1], fb.edges_hz[80]);
        for k in 0..fb.n_bins {
            let f = k as f64 * bin_hz;
            if f > first && f < last {
                let col: f64 = (0..80).map(|m| fb.row(m)[k]).sum();
                assert!(col > 0.0, "bin {k} uncovered");
            }
        }
    }
}

#[test]
fn mel_spectrogram_matches_composed_oracle() {
    let p = Profile::Desk16k;
    let x: Vec<f64> = random_signal(&mut rng(2), 8000).into_iter().map(|v| v * 0.01).collect();
    let audio = AudioBuffer::new(x.clone(), 16000).unwrap();
    let (s, m) = (p.stft(), p.mel());
    let mel = mel_spectrogram(&audio, &s, &m, "clip").unwrap();
    let mag = naive_stft(&x, s.n_fft, s.win_length, s.hop_length);
    let fb = triangle_filterbank(80, s.n_fft, 16000.0, 0.0, 8000.0);
    assert_eq!((mel.n_mels(), mel.n_frames()), (80, 1 + 8000 / 200));
    let mut worst = 0.0f64;
    for b in 0..80 {
        for t in 0..mel.n_frames() {
            let e: f64 = (0..fb[b].len()).map(|k| fb[b][k] * mag[k][t]).sum();
            let db = (20.0 * e.max(1e-5).log10()).max(-100.0);
            worst = worst.max((db - mel.get(b, t)).abs());
        }
    }
    assert!(worst <= 1e-9, "{worst:e} dB");
}

#[test]
fn silence_and_framing_examples() {
    let p = Profile::Paper48k;
    let audio = AudioBuffer::new(vec![0.0; 4800], 48000).unwrap();
    let mag = stft_magnitude(&audio, &p.stft()).unwrap();
    assert_eq!(mag.n_frames, 9);
    assert!(mag.values.iter().all(|&v| v == 0.0));
    let mel = mel_spectrogram(&audio, &p.stft(), &p.mel(), "s").unwrap();
    assert!(mel.values().iter().all(|&v| v == -100.0));
    assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_oracle_on_random_inputs(seed in any::<u64>(), len in 1usize..200, hop in 1usize..20) {
        let x = random_signal(&mut rng(seed), len);
        let oracle: Vec<f64> = naive_stft(&x, 32, 24, hop).concat();
        prop_assert!(max_norm_rel_error(&stft(&x, 32, 24, hop), &oracle) < 1e-10);
    }

    #[test]
    fn frame_count_rule(len in 1usize..5000, hop in 1usize..700) {
        let cfg = StftConfig { win_length: 16, hop_length: hop, n_fft: 16, center: true };
        prop_assert_eq!(cfg.n_frames(len), 1 + len / hop);
    }

    #[test]
    fn mel_scale_monotone_and_invertible(a in 0.0f64..30000.0, b in 0.0f64..30000.0) {
        let (ma, mb) = (hz_to_mel(a).unwrap(), hz_to_mel(b).unwrap());
        if a < b { prop_assert!(ma < mb); }
        let back = mel_to_hz(ma).unwrap();
        prop_assert!((back - a).abs() <= 1e-9 * a.max(1e-3));
    }

    #[test]
    fn mel_values_finite_and_floored(seed in any::<u64>(), len in 1usize..3000, gain in 0.0f64..100.0) {
        let x: Vec<f64> = random_signal(&mut rng(seed), len).into_iter().map(|v| v * gain).collect();
        let p = Profile::Desk16k;
        let mel = mel_spectrogram(&AudioBuffer::new(x, 16000).unwrap(), &p.stft(), &p.mel(), "p").unwrap();
        prop_assert_eq!(mel.n_frames(), 1 + len / 200);
        prop_assert!(mel.values().iter().all(|v| v.is_finite() && *v >= -100.0));
    }
}
