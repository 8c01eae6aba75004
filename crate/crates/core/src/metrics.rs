//! Over-smoothness and distance measures, and color figures.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::dsp::MelSpectrogram;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {a:?} vs {b:?} (mels, frames)")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error("png: {0}")]
    Png(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn dims(m: &MelSpectrogram) -> (usize, usize) {
    (m.n_mels(), m.n_frames())
}

fn same_shape(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<(), MetricsError> {
    if dims(a) != dims(b) {
        return Err(MetricsError::Shape { a: dims(a), b: dims(b) });
    }
    Ok(())
}

/// Per-bin population variance over time.
#[derive(Debug, Clone, PartialEq)]
pub struct GvProfile(pub Vec<f64>);

impl GvProfile {
    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

pub fn global_variance(mel: &MelSpectrogram) -> GvProfile {
    let t = mel.n_frames() as f64;
    GvProfile(
        (0..mel.n_mels())
            .map(|b| {
                let row = mel.row(b);
                let mean = row.iter().sum::<f64>() / t;
                row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t
            })
            .collect(),
    )
}

/// Variance below this counts as a flat bin and is left out of ratios.
pub const GV_FLAT: f64 = 1e-12;

/// Mean over bins of `GV(a) / GV(b)`, skipping bins where `b` is flat.
/// `NaN` when every bin of `b` is flat.
pub fn gv_ratio_mean(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let (ga, gb) = (global_variance(a), global_variance(b));
    let ratios: Vec<f64> = ga
        .0
        .iter()
        .zip(&gb.0)
        .filter(|(_, &vb)| vb > GV_FLAT)
        .map(|(va, vb)| va / vb)
        .collect();
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// `sqrt(mean((a - b)^2))` in dB.
pub fn log_spectral_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = a.values().len() as f64;
    let ss: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / n).sqrt())
}

/// `mean |a - b|` in dB.
pub fn mean_abs_error(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = a.values().len() as f64;
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub lsd: f64,
    pub gv_ratio_mean: f64,
}

pub fn metric_row(id: &str, a: &MelSpectrogram, b: &MelSpectrogram) -> Result<MetricRow, MetricsError> {
    Ok(MetricRow {
        id: id.to_string(),
        lsd: log_spectral_distance(a, b)?,
        gv_ratio_mean: gv_ratio_mean(a, b)?,
    })
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("id,lsd,gv_ratio_mean\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.id, r.lsd, r.gv_ratio_mean);
    }
    s
}

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS_ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 82, 139],
    [44, 113, 142],
    [33, 145, 140],
    [40, 174, 128],
    [94, 201, 98],
    [170, 220, 50],
    [253, 231, 37],
];

pub const LUT_SIZE: usize = 256;

/// 256-entry color table, linear between anchors.
pub fn viridis_lut() -> Vec<[u8; 3]> {
    let segs = (VIRIDIS_ANCHORS.len() - 1) as f64;
    (0..LUT_SIZE)
        .map(|i| {
            let pos = i as f64 / (LUT_SIZE - 1) as f64 * segs;
            let k = (pos.floor() as usize).min(VIRIDIS_ANCHORS.len() - 2);
            let f = pos - k as f64;
            let (a, b) = (VIRIDIS_ANCHORS[k], VIRIDIS_ANCHORS[k + 1]);
            std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
        })
        .collect()
}

/// Rec. 709 relative luminance of an sRGB-coded triple (no linearization).
pub fn luminance(c: [u8; 3]) -> f64 {
    0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64
}

/// LUT index for a dB value on `[floor_db, 0]`.
pub fn lut_index(db: f64, floor_db: f64) -> usize {
    let u = ((db - floor_db) / -floor_db).clamp(0.0, 1.0);
    (u * (LUT_SIZE - 1) as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Blank rows between triptych panels.
pub const PANEL_GAP: usize = 4;
const GAP_COLOR: [u8; 3] = [255, 255, 255];

fn paint_panel(img: &mut RgbImage, top: usize, mel: &MelSpectrogram, lut: &[[u8; 3]]) {
    let h = mel.n_mels();
    for bin in 0..h {
        let row = top + h - 1 - bin;
        for (f, &v) in mel.row(bin).iter().enumerate() {
            let i = 3 * (row * img.width + f);
            img.data[i..i + 3].copy_from_slice(&lut[lut_index(v, mel.mel.floor_db)]);
        }
    }
}

/// Highest mel bin at the top.
pub fn render_mel(mel: &MelSpectrogram) -> RgbImage {
    let mut img = RgbImage {
        width: mel.n_frames(),
        height: mel.n_mels(),
        data: vec![0; 3 * mel.n_frames() * mel.n_mels()],
    };
    paint_panel(&mut img, 0, mel, &viridis_lut());
    img
}

/// Top row of each panel in a stacked figure of `n_mels`-row panels.
pub fn panel_offsets(n_mels: usize, panels: usize) -> Vec<usize> {
    (0..panels).map(|i| i * (n_mels + PANEL_GAP)).collect()
}

/// Original on top, synthesized in the middle, enhanced at the bottom.
pub fn render_triptych(
    original: &MelSpectrogram,
    synthesized: &MelSpectrogram,
    enhanced: &MelSpectrogram,
) -> Result<RgbImage, MetricsError> {
    same_shape(original, synthesized)?;
    same_shape(original, enhanced)?;
    let (h, t) = dims(original);
    let height = 3 * h + 2 * PANEL_GAP;
    let mut img = RgbImage {
        width: t,
        height,
        data: GAP_COLOR.repeat(t * height),
    };
    let lut = viridis_lut();
    for (top, mel) in panel_offsets(h, 3).into_iter().zip([original, synthesized, enhanced]) {
        paint_panel(&mut img, top, mel, &lut);
    }
    Ok(img)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>, MetricsError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| MetricsError::Png(e.to_string()))?;
        w.write_image_data(&img.data).map_err(|e| MetricsError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage, MetricsError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| MetricsError::Png(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(MetricsError::Png(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = vec![0; reader.output_buffer_size().ok_or_else(|| MetricsError::Png("image too large".into()))?];
    let frame = reader.next_frame(&mut data).map_err(|e| MetricsError::Png(e.to_string()))?;
    data.truncate(frame.buffer_size());
    Ok(RgbImage { width, height, data })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), MetricsError> {
    fs::write(path, bytes).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn plot_mel(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    write(path.as_ref(), &encode_rgb_png(&render_mel(mel))?)
}

pub fn plot_triptych(
    original: &MelSpectrogram,
    synthesized: &MelSpectrogram,
    enhanced: &MelSpectrogram,
    path: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    write(path.as_ref(), &encode_rgb_png(&render_triptych(original, synthesized, enhanced)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{MelConfig, Profile};

    fn mel(values: Vec<f64>, n_mels: usize, t: usize) -> MelSpectrogram {
        let p = Profile::Desk16k;
        let cfg = MelConfig { n_mels, ..p.mel() };
        MelSpectrogram::new(values, n_mels, t, p.stft(), cfg, "m").unwrap()
    }

    #[test]
    fn gv_examples() {
        assert_eq!(global_variance(&mel(vec![-60.0, -58.0], 1, 2)).0, vec![1.0]);
        assert_eq!(global_variance(&mel(vec![-30.0; 6], 2, 3)).0, vec![0.0, 0.0]);
    }

    #[test]
    fn lsd_examples() {
        let a = mel(vec![-10.0, -20.0, -30.0, -40.0], 2, 2);
        let b = mel(vec![-5.0, -15.0, -25.0, -35.0], 2, 2);
        assert_eq!(log_spectral_distance(&a, &a).unwrap(), 0.0);
        assert!((log_spectral_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert!(log_spectral_distance(&a, &mel(vec![-1.0; 2], 1, 2)).is_err());
    }

    #[test]
    fn lut_is_luminance_monotone() {
        let lut = viridis_lut();
        assert_eq!(lut.len(), LUT_SIZE);
        assert_eq!(lut[0], VIRIDIS_ANCHORS[0]);
        assert_eq!(lut[255], VIRIDIS_ANCHORS[8]);
        assert!(lut.windows(2).all(|w| luminance(w[1]) >= luminance(w[0])));
    }

    #[test]
    fn triptych_layout_and_png() {
        let floor = mel(vec![-100.0; 8], 2, 4);
        let loud = mel(vec![0.0; 8], 2, 4);
        let img = render_triptych(&floor, &loud, &floor).unwrap();
        assert_eq!((img.height, img.width), (3 * 2 + 2 * PANEL_GAP, 4));
        assert_eq!(img.pixel(0, 0), VIRIDIS_ANCHORS[0]);
        assert_eq!(img.pixel(2, 0), GAP_COLOR);
        assert_eq!(img.pixel(2 + PANEL_GAP, 3), VIRIDIS_ANCHORS[8]);
        let back = decode_rgb_png(&encode_rgb_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
