//! Invertible mel-spectrogram <-> 16-bit grayscale image codec.
//!
//! Values are normalized against a fixed dB range, quantized to 16 bits and
//! laid out with the highest mel band in the top row. Frames are zero-padded
//! to a multiple of `pad_multiple`; the true frame count travels in
//! [`NormMeta`], which is stored as a `key=value` sidecar next to the PNG.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsp::{DspError, MelConfig, MelSpectrogram, Profile, StftConfig};

pub const DEFAULT_MIN_DB: f64 = -100.0;
pub const DEFAULT_MAX_DB: f64 = 0.0;
pub const DEFAULT_PAD_MULTIPLE: usize = 16;
const QMAX: f64 = 65535.0;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid dB range [{min_db}, {max_db}]")]
    BadRange { min_db: f64, max_db: f64 },
    #[error("non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("unit value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("pad multiple must be positive")]
    ZeroPad,
    #[error("metadata inconsistent with image: {0}")]
    MetaMismatch(String),
    #[error("image has {got} pixels, expected {width}x{height}")]
    PixelCount { width: usize, height: usize, got: usize },
    #[error("unsupported PNG color type {0:?} (need single-channel grayscale)")]
    UnsupportedColor(png::ColorType),
    #[error("unsupported PNG bit depth {0:?} (need 16)")]
    UnsupportedDepth(png::BitDepth),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("sidecar {path}: {msg}")]
    Sidecar { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CodecError + '_ {
    move |source| CodecError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Everything needed to turn an image back into dB values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormMeta {
    pub min_db: f64,
    pub max_db: f64,
    pub orig_frames: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub hop_length: usize,
}

impl NormMeta {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.min_db.is_finite() && self.max_db.is_finite() && self.min_db < self.max_db) {
            return Err(CodecError::BadRange {
                min_db: self.min_db,
                max_db: self.max_db,
            });
        }
        if self.orig_frames == 0 {
            return Err(CodecError::MetaMismatch("orig_frames must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_sidecar(&self) -> String {
        format!(
            "min_db={}\nmax_db={}\norig_frames={}\nn_mels={}\nsample_rate={}\nhop_length={}\n",
            self.min_db, self.max_db, self.orig_frames, self.n_mels, self.sample_rate, self.hop_length
        )
    }

    pub fn parse_sidecar(text: &str) -> Result<Self, String> {
        let mut min_db = None;
        let mut max_db = None;
        let mut orig_frames = None;
        let mut n_mels = None;
        let mut sample_rate = None;
        let mut hop_length = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {k}: {e}", lineno + 1);
            match k {
                "min_db" => min_db = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
                "max_db" => max_db = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
                "orig_frames" => orig_frames = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "n_mels" => n_mels = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "sample_rate" => sample_rate = Some(v.parse::<u32>().map_err(|e| bad(&e))?),
                "hop_length" => hop_length = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                other => return Err(format!("line {}: unknown key '{other}'", lineno + 1)),
            }
        }
        let need = |name: &str| format!("missing key '{name}'");
        Ok(Self {
            min_db: min_db.ok_or_else(|| need("min_db"))?,
            max_db: max_db.ok_or_else(|| need("max_db"))?,
            orig_frames: orig_frames.ok_or_else(|| need("orig_frames"))?,
            n_mels: n_mels.ok_or_else(|| need("n_mels"))?,
            sample_rate: sample_rate.ok_or_else(|| need("sample_rate"))?,
            hop_length: hop_length.ok_or_else(|| need("hop_length"))?,
        })
    }
}

/// Single-channel 16-bit raster, row-major, row 0 at the top.
///
/// Images produced by [`mel_to_image`] with the default settings have both
/// dimensions divisible by 16; arbitrary sizes are accepted for I/O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self, CodecError> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(CodecError::PixelCount {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.width + col]
    }
}

pub fn normalize(mel: &MelSpectrogram, min_db: f64, max_db: f64) -> Result<(Vec<f64>, NormMeta), CodecError> {
    let meta = NormMeta {
        min_db,
        max_db,
        orig_frames: mel.n_frames(),
        n_mels: mel.n_mels(),
        sample_rate: mel.mel.sample_rate,
        hop_length: mel.stft.hop_length,
    };
    meta.validate()?;
    let span = max_db - min_db;
    let unit = mel
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() {
                Ok(((v - min_db) / span).clamp(0.0, 1.0))
            } else {
                Err(CodecError::NonFinite(i))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((unit, meta))
}

/// `round(u * 65535)` with ties away from zero.
pub fn quantize16(u: f64) -> Result<u16, CodecError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(CodecError::OutOfRange(u));
    }
    Ok((u * QMAX).round() as u16)
}

pub fn dequantize16(q: u16) -> f64 {
    q as f64 / QMAX
}

pub fn mel_to_image(
    mel: &MelSpectrogram,
    min_db: f64,
    max_db: f64,
    pad_multiple: usize,
) -> Result<(GrayImage, NormMeta), CodecError> {
    if pad_multiple == 0 {
        return Err(CodecError::ZeroPad);
    }
    let (unit, meta) = normalize(mel, min_db, max_db)?;
    let (h, t) = (mel.n_mels(), mel.n_frames());
    let width = t.div_ceil(pad_multiple) * pad_multiple;
    let mut pixels = vec![0u16; width * h];
    for bin in 0..h {
        let row = h - 1 - bin;
        for f in 0..t {
            pixels[row * width + f] = quantize16(unit[bin * t + f])?;
        }
    }
    Ok((GrayImage::new(width, h, pixels)?, meta))
}

/// Stft/mel settings to attach to a decoded spectrogram. The sidecar only
/// records rate and hop, so window sizes come from the matching profile when
/// there is one.
fn decoded_configs(meta: &NormMeta) -> (StftConfig, MelConfig) {
    let stft = match Profile::matching(meta.sample_rate, meta.hop_length) {
        Some(p) => p.stft(),
        None => {
            let win = meta.hop_length.max(1) * 4;
            StftConfig {
                win_length: win,
                hop_length: meta.hop_length.max(1),
                n_fft: win.next_power_of_two(),
                center: true,
            }
        }
    };
    let mel = MelConfig {
        n_mels: meta.n_mels,
        f_min: 0.0,
        f_max: meta.sample_rate as f64 / 2.0,
        sample_rate: meta.sample_rate,
        floor_db: meta.min_db,
    };
    (stft, mel)
}

pub fn image_to_mel(img: &GrayImage, meta: &NormMeta, source_id: &str) -> Result<MelSpectrogram, CodecError> {
    meta.validate()?;
    if meta.orig_frames > img.width {
        return Err(CodecError::MetaMismatch(format!(
            "orig_frames {} exceeds image width {}",
            meta.orig_frames, img.width
        )));
    }
    if meta.n_mels != img.height {
        return Err(CodecError::MetaMismatch(format!(
            "n_mels {} but image height {}",
            meta.n_mels, img.height
        )));
    }
    let (h, t) = (img.height, meta.orig_frames);
    let span = meta.max_db - meta.min_db;
    let mut values = vec![0.0; h * t];
    for bin in 0..h {
        let row = h - 1 - bin;
        for f in 0..t {
            values[bin * t + f] = meta.min_db + dequantize16(img.get(row, f)) * span;
        }
    }
    let (stft, mel) = decoded_configs(meta);
    Ok(MelSpectrogram::new(values, h, t, stft, mel, source_id)?)
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header()?;
        let bytes: Vec<u8> = img.pixels.iter().flat_map(|p| p.to_be_bytes()).collect();
        writer.write_image_data(&bytes)?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<GrayImage, CodecError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(CodecError::UnsupportedColor(info.color_type));
    }
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(CodecError::UnsupportedDepth(info.bit_depth));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(width * height * 2)];
    let frame = reader.next_frame(&mut buf)?;
    let raw = &buf[..frame.buffer_size()];
    let pixels = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    GrayImage::new(width, height, pixels)
}

pub fn write_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<GrayImage, CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_png(&bytes)
}

/// `foo.png` -> `foo.meta`
pub fn sidecar_path(png_path: impl AsRef<Path>) -> PathBuf {
    png_path.as_ref().with_extension("meta")
}

/// Write the PNG and its metadata sidecar.
pub fn write_image_with_meta(img: &GrayImage, meta: &NormMeta, path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    write_png(img, path)?;
    let side = sidecar_path(path);
    fs::write(&side, meta.to_sidecar()).map_err(io_err(&side))
}

pub fn read_image_with_meta(path: impl AsRef<Path>) -> Result<(GrayImage, NormMeta), CodecError> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta = NormMeta::parse_sidecar(&text).map_err(|msg| CodecError::Sidecar {
        path: side.display().to_string(),
        msg,
    })?;
    meta.validate()?;
    if meta.n_mels != img.height || meta.orig_frames > img.width {
        return Err(CodecError::MetaMismatch(format!(
            "{}: sidecar says {}x{} but image is {}x{}",
            path.display(),
            meta.n_mels,
            meta.orig_frames,
            img.height,
            img.width
        )));
    }
    Ok((img, meta))
}

/// Writes an 8-bit grayscale PNG; only used to exercise the depth check.
#[doc(hidden)]
pub fn encode_png_8bit(width: u32, height: u32, data: &[u8]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(data)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Profile;

    fn mel_from(values: Vec<f64>, n_mels: usize, t: usize) -> MelSpectrogram {
        let p = Profile::Desk16k;
        let mel = MelConfig {
            n_mels,
            ..p.mel()
        };
        MelSpectrogram::new(values, n_mels, t, p.stft(), mel, "t").unwrap()
    }

    #[test]
    fn normalize_points() {
        let m = mel_from(vec![-100.0, 0.0, -50.0], 1, 3);
        let (u, meta) = normalize(&m, -100.0, 0.0).unwrap();
        assert_eq!(u, vec![0.0, 1.0, 0.5]);
        assert_eq!(meta.orig_frames, 3);
        assert!(normalize(&m, 0.0, 0.0).is_err());
    }

    #[test]
    fn quantize_points() {
        assert_eq!(quantize16(0.0).unwrap(), 0);
        assert_eq!(quantize16(1.0).unwrap(), 65535);
        assert_eq!(quantize16(0.5).unwrap(), 32768);
        assert!(quantize16(1.0001).is_err());
        assert!(quantize16(-1e-9).is_err());
        assert!(quantize16(f64::NAN).is_err());
    }

    #[test]
    fn padding_width() {
        for (t, w) in [(250, 256), (256, 256), (1, 16)] {
            let m = mel_from(vec![-20.0; 80 * t], 80, t);
            let (img, meta) = mel_to_image(&m, -100.0, 0.0, 16).unwrap();
            assert_eq!((img.width(), img.height()), (w, 80));
            assert_eq!(meta.orig_frames, t);
            // padding is black
            assert!((t..w).all(|c| img.get(0, c) == 0));
        }
        let m = mel_from(vec![-20.0; 80], 80, 1);
        assert!(matches!(mel_to_image(&m, -100.0, 0.0, 0), Err(CodecError::ZeroPad)));
    }

    #[test]
    fn orientation() {
        // bin 0 loud, others at the floor
        let mut v = vec![-100.0; 80 * 4];
        v[..4].fill(0.0);
        let m = mel_from(v, 80, 4);
        let (img, meta) = mel_to_image(&m, -100.0, 0.0, 16).unwrap();
        assert_eq!(img.get(79, 0), 65535);
        assert_eq!(img.get(0, 0), 0);
        let back = image_to_mel(&img, &meta, "t").unwrap();
        assert_eq!(back.get(0, 0), 0.0);
        assert_eq!(back.get(79, 0), -100.0);
    }

    #[test]
    fn black_image_is_floor() {
        let img = GrayImage::new(16, 80, vec![0; 16 * 80]).unwrap();
        let meta = NormMeta {
            min_db: -100.0,
            max_db: 0.0,
            orig_frames: 10,
            n_mels: 80,
            sample_rate: 16000,
            hop_length: 200,
        };
        let m = image_to_mel(&img, &meta, "z").unwrap();
        assert_eq!(m.n_frames(), 10);
        assert!(m.values().iter().all(|&v| v == -100.0));
        let too_wide = NormMeta {
            orig_frames: 17,
            ..meta
        };
        assert!(matches!(
            image_to_mel(&img, &too_wide, "z"),
            Err(CodecError::MetaMismatch(_))
        ));
    }

    #[test]
    fn sidecar_roundtrip_and_errors() {
        let meta = NormMeta {
            min_db: -100.0,
            max_db: 0.1,
            orig_frames: 250,
            n_mels: 80,
            sample_rate: 48000,
            hop_length: 600,
        };
        assert_eq!(NormMeta::parse_sidecar(&meta.to_sidecar()).unwrap(), meta);
        assert!(NormMeta::parse_sidecar("min_db=1\nbogus=2\n").is_err());
        assert!(NormMeta::parse_sidecar("min_db=-100\n").is_err());
    }

    #[test]
    fn png_single_pixel() {
        let img = GrayImage::new(1, 1, vec![65535]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.get(0, 0), 65535);
    }

    #[test]
    fn png_rejects_8bit() {
        let bytes = encode_png_8bit(2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(matches!(
            decode_png(&bytes),
            Err(CodecError::UnsupportedDepth(png::BitDepth::Eight))
        ));
    }
}
