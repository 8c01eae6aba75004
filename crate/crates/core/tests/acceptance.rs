//! Acceptance suite: one PASS/FAIL line per criterion. Failures make the
//! process exit nonzero only when `MELFIX_ACCEPTANCE_STRICT=1`.

mod common;

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::Instant;

use common::{max_norm_rel_error, naive_stft, random_mel, random_signal, rng, triangle_filterbank};
use melfix::audio::AudioBuffer;
use melfix::codec::{decode_png, encode_png, image_to_mel, mel_to_image, write_image_with_meta};
use melfix::corpus::corpus;
use melfix::dsp::{extract, mel_filterbank, stft_magnitude, MelConfig, MelSpectrogram, Profile, StftConfig};
use melfix::metrics::{
    decode_rgb_png, gv_ratio_mean, lut_index, luminance, mean_abs_error, panel_offsets, plot_triptych, render_mel,
    viridis_lut, PANEL_GAP,
};
use melfix::models::{loss_discriminator, loss_generator, DiscriminatorConfig, Generator, MultiScaleDiscriminator};
use melfix::tensor::gradcheck::{standard_suite, CHAIN_TOLERANCE, OP_TOLERANCE};
use melfix::tensor::{Tape, Tensor};
use melfix::training::{
    degrade_pairs, enhance, oversmooth, save_checkpoint, train, write_loss_csv, write_manifest, Checkpoint,
    ImageSettings, PairDataset, TrainConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dsp_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_fft = [32, 64, 128, 256][r.random_range(0..4)];
        let win = r.random_range(n_fft / 2..=n_fft);
        let hop = r.random_range(1..=win / 2);
        let len = r.random_range(1..2000);
        let x = random_signal(&mut r, len);
        let cfg = StftConfig {
            win_length: win,
            hop_length: hop,
            n_fft,
            center: true,
        };
        let got = stft_magnitude(&AudioBuffer::new(x.clone(), 16000).unwrap(), &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(max_norm_rel_error(&got.values, &naive_stft(&x, n_fft, win, hop).concat()));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst < 1e-10 && secs < 5.0, format!("max rel err {worst:.2e} (< 1e-10), {secs:.2}s (< 5s)"))
}

fn filterbank() -> Outcome {
    let mut notes = Vec::new();
    for p in [Profile::Desk16k, Profile::Paper48k] {
        let n_fft = p.stft().n_fft;
        let fb = mel_filterbank(&p.mel(), n_fft).map_err(|e| e.to_string())?;
        if fb.n_mels != 80 {
            return Err(format!("{p:?}: {} rows", fb.n_mels));
        }
        let mut last = None;
        for m in 0..80 {
            let row = fb.row(m);
            let peak = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            let unimodal = row[..=peak].windows(2).all(|w| w[0] <= w[1]) && row[peak..].windows(2).all(|w| w[0] >= w[1]);
            if row.iter().any(|&w| w < 0.0) || !unimodal || last.is_some_and(|l| peak <= l) {
                return Err(format!("{p:?}: row {m} malformed"));
            }
            last = Some(peak);
        }
        let bin_hz = p.sample_rate() as f64 / n_fft as f64;
        let uncovered = (0..fb.n_bins)
            .filter(|&k| {
                let f = k as f64 * bin_hz;
                f > fb.edges_hz[1] && f < fb.edges_hz[80] && (0..80).all(|m| fb.row(m)[k] == 0.0)
            })
            .count();
        if uncovered > 0 {
            return Err(format!("{p:?}: {uncovered} interior bins uncovered"));
        }
        notes.push(format!("{p:?} ok"));
    }
    let cfg = MelConfig {
        n_mels: 2,
        f_min: 0.0,
        f_max: 4000.0,
        sample_rate: 8000,
        floor_db: -100.0,
    };
    let fb = mel_filterbank(&cfg, 8).map_err(|e| e.to_string())?;
    let oracle = triangle_filterbank(2, 8, 8000.0, 0.0, 4000.0);
    let err = (0..2)
        .flat_map(|m| fb.row(m).iter().zip(&oracle[m]).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    notes.push(format!("tiny case err {err:.1e}"));
    check(err <= 1e-12, notes.join(", "))
}

fn codec() -> Outcome {
    let t0 = Instant::now();
    let bound = 100.0 / (2.0 * 65535.0);
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = r.random_range(1..64);
        let mel = random_mel(&mut r, 80, t, -100.0, 0.0);
        let (img, meta) = mel_to_image(&mel, -100.0, 0.0, 16).map_err(|e| e.to_string())?;
        let decoded = decode_png(&encode_png(&img).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if decoded != img {
            return Err("PNG roundtrip not bit-exact".into());
        }
        let back = image_to_mel(&decoded, &meta, "c").map_err(|e| e.to_string())?;
        worst = mel.values().iter().zip(back.values()).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= bound && secs < 10.0,
        format!("max err {worst:.3e} dB (<= {bound:.3e}), PNG bit-exact, {secs:.2}s (< 10s)"),
    )
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let results = standard_suite(104).map_err(|e| e.to_string())?;
    let (ops, chains): (Vec<_>, Vec<_>) = results.iter().partition(|r| r.tolerance == OP_TOLERANCE);
    let worst = |v: &[&melfix::tensor::gradcheck::CheckResult]| v.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let (wo, wc) = (worst(&ops), worst(&chains));
    let secs = t0.elapsed().as_secs_f64();
    check(
        wo < OP_TOLERANCE && wc < CHAIN_TOLERANCE && !chains.is_empty() && secs < 60.0,
        format!(
            "{} ops max {wo:.2e} (< 1e-5), {} chains max {wc:.2e} (< 1e-4), {secs:.2}s (< 60s)",
            ops.len(),
            chains.len()
        ),
    )
}

fn init_losses() -> Outcome {
    let g = Generator::<f64>::new(Default::default(), 17).map_err(|e| e.to_string())?;
    let d = MultiScaleDiscriminator::<f64>::new(DiscriminatorConfig::default(), 18).map_err(|e| e.to_string())?;
    let x = Tensor::rand_uniform([2, 1, 64, 64], -1.0, 1.0, &mut rng(105));
    let y = Tensor::rand_uniform([2, 1, 64, 64], -1.0, 1.0, &mut rng(106));
    let mut tape = Tape::new();
    let (gp, dp) = (g.params.bind(&mut tape, true), d.params.bind(&mut tape, true));
    let (xv, yv) = (tape.leaf(x.clone(), false), tape.leaf(y.clone(), false));
    let dl = loss_discriminator(&mut tape, &g, &gp, &d, &dp, xv, yv, Default::default()).map_err(|e| e.to_string())?;
    let ld = tape.value(dl.total).data()[0];
    let mut tape = Tape::new();
    let (gp, dp) = (g.params.bind(&mut tape, true), d.params.bind(&mut tape, false));
    let (xv, yv) = (tape.leaf(x, false), tape.leaf(y, false));
    let gl = loss_generator(&mut tape, &g, &gp, &d, &dp, xv, yv, 10.0, Default::default(), Default::default())
        .map_err(|e| e.to_string())?;
    let la = tape.value(gl.adversarial).data()[0];
    let (ed, ea) = ((ld - 6.0 * LN_2).abs(), (la - 3.0 * LN_2).abs());
    check(
        ed <= 1e-6 && ea <= 1e-6,
        format!("D {ld:.9} (6 ln2, err {ed:.1e}), G adv {la:.9} (3 ln2, err {ea:.1e})"),
    )
}

const SIGMA_T: f64 = 3.0;

struct Restoration {
    natural: Vec<MelSpectrogram>,
    degraded: Vec<MelSpectrogram>,
    enhanced: Vec<MelSpectrogram>,
}

fn restoration() -> (Outcome, Option<Restoration>) {
    let run = || -> Result<(String, bool, Restoration), String> {
        let t0 = Instant::now();
        let natural: Vec<MelSpectrogram> = corpus(16000, 8, 17)
            .iter()
            .enumerate()
            .map(|(i, a)| extract(a, Profile::Desk16k, &format!("u{i}")))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let gv_in = mean(
            natural
                .iter()
                .map(|m| gv_ratio_mean(&oversmooth(m, SIGMA_T).unwrap(), m).unwrap())
                .collect(),
        );
        let ds = degrade_pairs(&natural, SIGMA_T, &ImageSettings::default()).map_err(|e| e.to_string())?;
        let cfg = TrainConfig::default();
        let (ck, _) = train::<f32>(&ds, &cfg).map_err(|e| e.to_string())?;
        let (mut degraded, mut enhanced) = (Vec::new(), Vec::new());
        for p in ds.pairs() {
            degraded.push(image_to_mel(&p.x, &p.x_meta, &p.id).map_err(|e| e.to_string())?);
            let (g, gm) = enhance(&ck, &p.x, &p.x_meta).map_err(|e| e.to_string())?;
            enhanced.push(image_to_mel(&g, &gm, &p.id).map_err(|e| e.to_string())?);
        }
        let l1 = |a: &[MelSpectrogram]| mean(a.iter().zip(&natural).map(|(a, y)| mean_abs_error(a, y).unwrap()).collect());
        let (l1x, l1g) = (l1(&degraded), l1(&enhanced));
        let gv_out = mean(enhanced.iter().zip(&natural).map(|(g, y)| gv_ratio_mean(g, y).unwrap()).collect());
        let secs = t0.elapsed().as_secs_f64();
        let ok = gv_in < 0.5 && l1g < 0.5 * l1x && (0.6..=1.4).contains(&gv_out) && secs <= 1800.0;
        let detail = format!(
            "sigma_t {SIGMA_T}: GV(x)/GV(y) {gv_in:.3} (< 0.5); L1(G(x),y) {l1g:.3} dB vs 0.5*L1(x,y) {:.3} dB; \
             GV(G(x))/GV(y) {gv_out:.3} (in [0.6, 1.4]); {} steps in {secs:.0}s (<= 1800s)",
            0.5 * l1x,
            cfg.steps
        );
        Ok((detail, ok, Restoration { natural, degraded, enhanced }))
    };
    match run() {
        Ok((d, true, r)) => (Ok(d), Some(r)),
        Ok((d, false, r)) => (Err(d), Some(r)),
        Err(e) => (Err(e), None),
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let natural: Vec<MelSpectrogram> = corpus(16000, 8, 17)
        .iter()
        .enumerate()
        .map(|(i, a)| extract(a, Profile::Desk16k, &format!("u{i}")).unwrap())
        .collect();
    let ds = degrade_pairs(&natural, SIGMA_T, &ImageSettings::default()).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for p in ds.pairs() {
        let (x, y) = (dir.path().join(format!("x_{}.png", p.id)), dir.path().join(format!("{}.png", p.id)));
        write_image_with_meta(&p.x, &p.x_meta, &x).map_err(|e| e.to_string())?;
        write_image_with_meta(&p.y, &p.y_meta, &y).map_err(|e| e.to_string())?;
        entries.push((x, y));
    }
    let manifest = dir.path().join("pairs.tsv");
    write_manifest(&entries, &manifest).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::default()
    };
    let mut outputs = Vec::new();
    for run in 0..2 {
        let ds = PairDataset::from_manifest(&manifest).map_err(|e| e.to_string())?;
        let (ck, log): (Checkpoint<f32>, _) = train(&ds, &cfg).map_err(|e| e.to_string())?;
        let (c, l) = (dir.path().join(format!("{run}.ckpt")), dir.path().join(format!("{run}.csv")));
        save_checkpoint(&ck, &c).map_err(|e| e.to_string())?;
        write_loss_csv(&log, &l).map_err(|e| e.to_string())?;
        outputs.push((std::fs::read(c).unwrap(), std::fs::read(l).unwrap()));
    }
    let same_ck = outputs[0].0 == outputs[1].0;
    let same_log = outputs[0].1 == outputs[1].1;
    check(
        same_ck && same_log,
        format!(
            "{} steps twice from manifest: checkpoint {} bytes identical={same_ck}, loss log identical={same_log}",
            cfg.steps,
            outputs[0].0.len()
        ),
    )
}

fn figure(r: Option<&Restoration>) -> Outcome {
    let (o, s, e) = match r {
        Some(r) => (r.natural[0].clone(), r.degraded[0].clone(), r.enhanced[0].clone()),
        None => {
            let mut g = rng(108);
            (random_mel(&mut g, 80, 90, -100.0, 0.0), random_mel(&mut g, 80, 90, -100.0, 0.0), random_mel(&mut g, 80, 90, -100.0, 0.0))
        }
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fig.png");
    plot_triptych(&o, &s, &e, &path).map_err(|e| e.to_string())?;
    let img = decode_rgb_png(&std::fs::read(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (h, t) = (o.n_mels(), o.n_frames());
    let dims_ok = img.width == t && img.height == 3 * h + 2 * PANEL_GAP;
    let offsets = panel_offsets(h, 3);
    let order_ok = offsets.iter().zip([&o, &s, &e]).all(|(&top, m)| {
        let panel = render_mel(m);
        (0..h).all(|row| (0..t).all(|c| img.pixel(top + row, c) == panel.pixel(row, c)))
    });
    let gaps_ok = offsets[1..]
        .iter()
        .all(|&top| (top - PANEL_GAP..top).all(|row| (0..t).all(|c| img.pixel(row, c) == [255, 255, 255])));
    let lut = viridis_lut();
    let lut_ok = lut.windows(2).all(|w| luminance(w[1]) >= luminance(w[0])) && luminance(lut[255]) > luminance(lut[0]) && lut_index(-100.0, -100.0) == 0;
    check(
        dims_ok && order_ok && gaps_ok && lut_ok,
        format!(
            "{}x{} px, 3 panels (original, synthesized, enhanced) order={order_ok}, separators={gaps_ok}, monotone LUT={lut_ok}",
            img.width, img.height
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 DSP oracle equivalence", dsp_oracle()),
        ("2 mel filterbank properties", filterbank()),
        ("3 codec roundtrip", codec()),
        ("4 gradient checks", gradients()),
        ("5 init-loss closed forms", init_losses()),
    ];
    let (r6, rest) = restoration();
    results.push(("6 overfit restoration", r6));
    results.push(("7 determinism", determinism()));
    results.push(("8 figure emission", figure(rest.as_ref())));
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    let strict = std::env::var("MELFIX_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
