mod common;

use common::{random_mel, rng};
use melfix::dsp::MelSpectrogram;
use melfix::metrics::{
    decode_rgb_png, global_variance, gv_ratio_mean, log_spectral_distance, lut_index, luminance, mean_abs_error,
    metric_row, panel_offsets, render_triptych, report_csv, viridis_lut, PANEL_GAP,
};
use proptest::prelude::*;

fn triple(seed: u64, n: usize, t: usize) -> (MelSpectrogram, MelSpectrogram, MelSpectrogram) {
    let mut r = rng(seed);
    (
        random_mel(&mut r, n, t, -90.0, -10.0),
        random_mel(&mut r, n, t, -90.0, -10.0),
        random_mel(&mut r, n, t, -90.0, -10.0),
    )
}

fn lsd_oracle(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
    let mut acc = 0.0;
    for m in 0..a.n_mels() {
        for t in 0..a.n_frames() {
            let d = a.get(m, t) - b.get(m, t);
            acc += d * d;
        }
    }
    (acc / (a.n_mels() * a.n_frames()) as f64).sqrt()
}

#[test]
fn metric_examples() {
    let a = random_mel(&mut rng(1), 2, 2, -50.0, -50.0);
    let b = a.with_values(vec![-50.0, -50.0, -50.0, -46.0]).unwrap();
    assert_eq!(log_spectral_distance(&a, &b).unwrap(), 2.0);
    assert_eq!(mean_abs_error(&a, &b).unwrap(), 1.0);
    assert!(log_spectral_distance(&a, &random_mel(&mut rng(1), 2, 3, -50.0, -50.0)).is_err());
    // flat reference bins are skipped
    assert_eq!(gv_ratio_mean(&b, &b).unwrap(), 1.0);
    assert!(gv_ratio_mean(&a, &a).unwrap().is_nan());
    let row = metric_row("u1", &b, &b).unwrap();
    assert_eq!(report_csv(&[row]), "id,lsd,gv_ratio_mean\nu1,0,1\n");
}

#[test]
fn colormap_is_perceptually_ordered() {
    let lut = viridis_lut();
    assert_eq!(lut.len(), 256);
    assert!(lut.windows(2).all(|w| luminance(w[1]) >= luminance(w[0])));
    assert_eq!(lut_index(-100.0, -100.0), 0);
    assert_eq!(lut_index(0.0, -100.0), 255);
    assert_eq!(lut_index(30.0, -100.0), 255);
}

#[test]
fn triptych_layout() {
    let (a, b, c) = triple(2, 12, 20);
    let img = render_triptych(&a, &b, &c).unwrap();
    assert_eq!((img.width, img.height), (20, 36 + 2 * PANEL_GAP));
    let offs = panel_offsets(12, 3);
    let lut = viridis_lut();
    for (top, mel) in offs.iter().zip([&a, &b, &c]) {
        // highest bin on the panel's top row
        assert_eq!(img.pixel(*top, 5), lut[lut_index(mel.get(11, 5), -100.0)]);
        assert_eq!(img.pixel(top + 11, 5), lut[lut_index(mel.get(0, 5), -100.0)]);
    }
    assert_eq!(img.pixel(12, 0), [255, 255, 255]);
    let bytes = melfix::metrics::encode_rgb_png(&img).unwrap();
    assert_eq!(decode_rgb_png(&bytes).unwrap(), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lsd_is_a_metric(seed in any::<u64>(), n in 1usize..10, t in 1usize..30) {
        let (a, b, c) = triple(seed, n, t);
        let (ab, ba) = (log_spectral_distance(&a, &b).unwrap(), log_spectral_distance(&b, &a).unwrap());
        prop_assert_eq!(log_spectral_distance(&a, &a).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        let (ac, cb) = (log_spectral_distance(&a, &c).unwrap(), log_spectral_distance(&c, &b).unwrap());
        prop_assert!(ab <= ac + cb + 1e-9);
        prop_assert!((ab - lsd_oracle(&a, &b)).abs() <= 1e-12);
        prop_assert!(mean_abs_error(&a, &b).unwrap() <= ab + 1e-12);
    }

    #[test]
    fn gv_translation_invariant_and_quadratic(seed in any::<u64>(), n in 1usize..8, t in 2usize..40,
                                              shift in -9.0f64..9.0, gain in 0.1f64..1.1) {
        let (a, _, _) = triple(seed, n, t);
        let g = global_variance(&a);
        let shifted = a.with_values(a.values().iter().map(|v| v + shift).collect()).unwrap();
        // scale about -50 dB so values stay above the floor
        let scaled = a.with_values(a.values().iter().map(|v| -50.0 + gain * (v + 50.0)).collect()).unwrap();
        for ((g0, g1), g2) in g.0.iter().zip(&global_variance(&shifted).0).zip(&global_variance(&scaled).0) {
            prop_assert!((g0 - g1).abs() <= 1e-9 * g0.max(1.0));
            prop_assert!((g2 - gain * gain * g0).abs() <= 1e-9 * g0.max(1.0));
            prop_assert!(*g0 >= 0.0);
        }
        prop_assert!((gv_ratio_mean(&scaled, &a).unwrap() - gain * gain).abs() < 1e-9);
    }
}
