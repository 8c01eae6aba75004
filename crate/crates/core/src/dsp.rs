//! Log-mel spectrogram extraction.
//!
//! The pipeline is: centered, reflect-padded framing -> periodic Hann window
//! (zero-padded to `n_fft`) -> FFT magnitude -> HTK triangular mel
//! filterbank -> `20 log10(max(1e-5, e))` clamped at `floor_db`.
//!
//! Two profiles are provided. `paper48k` uses a 12.5 ms hop at 48 kHz with a
//! 50 ms window; `desk16k` is the same hop at 16 kHz with smaller frames,
//! intended for quick experiments.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::audio::AudioBuffer;

/// Magnitude floor applied before log compression.
pub const AMPLITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("audio is empty")]
    EmptyAudio,
    #[error("invalid STFT config: {0}")]
    BadStft(String),
    #[error("invalid mel config: {0}")]
    BadMel(String),
    #[error("negative input to mel conversion: {0}")]
    Negative(f64),
    #[error("mel filter {index} covers no FFT bin (n_mels too large for n_fft = {n_fft})")]
    DegenerateFilter { index: usize, n_fft: usize },
    #[error("sample rate mismatch: audio is {audio} Hz, config expects {config} Hz")]
    SampleRateMismatch { audio: u32, config: u32 },
    #[error("invalid mel values: {0}")]
    BadValues(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub center: bool,
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(DspError::BadStft(format!(
                "need 0 < hop ({}) <= win ({})",
                self.hop_length, self.win_length
            )));
        }
        if self.win_length > self.n_fft {
            return Err(DspError::BadStft(format!(
                "win ({}) exceeds n_fft ({})",
                self.win_length, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(DspError::BadStft(format!(
                "n_fft ({}) is not a power of two",
                self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center {
            1 + len / self.hop_length
        } else if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop_length
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    pub floor_db: f64,
}

impl MelConfig {
    /// 80 bands over the full band `[0, sr/2]` with a -100 dB floor.
    pub fn new(sample_rate: u32) -> Self {
        Self {
            n_mels: 80,
            f_min: 0.0,
            f_max: sample_rate as f64 / 2.0,
            sample_rate,
            floor_db: -100.0,
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.n_mels == 0 {
            return Err(DspError::BadMel("n_mels must be >= 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(DspError::BadMel("sample_rate must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(DspError::BadMel(format!(
                "need 0 <= f_min ({}) < f_max ({}) <= {}",
                self.f_min, self.f_max, nyquist
            )));
        }
        if !self.floor_db.is_finite() {
            return Err(DspError::BadMel("floor_db must be finite".into()));
        }
        Ok(())
    }
}

/// Named extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper48k,
    Desk16k,
}

impl Profile {
    pub fn sample_rate(self) -> u32 {
        match self {
            Profile::Paper48k => 48_000,
            Profile::Desk16k => 16_000,
        }
    }

    pub fn stft(self) -> StftConfig {
        match self {
            Profile::Paper48k => StftConfig {
                win_length: 2400,
                hop_length: 600,
                n_fft: 4096,
                center: true,
            },
            Profile::Desk16k => StftConfig {
                win_length: 800,
                hop_length: 200,
                n_fft: 1024,
                center: true,
            },
        }
    }

    pub fn mel(self) -> MelConfig {
        MelConfig::new(self.sample_rate())
    }

    /// The profile whose sample rate and hop match, if any.
    pub fn matching(sample_rate: u32, hop_length: usize) -> Option<Profile> {
        [Profile::Paper48k, Profile::Desk16k]
            .into_iter()
            .find(|p| p.sample_rate() == sample_rate && p.stft().hop_length == hop_length)
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper48k => "paper48k",
            Profile::Desk16k => "desk16k",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper48k" => Ok(Profile::Paper48k),
            "desk16k" => Ok(Profile::Desk16k),
            other => Err(format!("unknown profile '{other}' (expected paper48k or desk16k)")),
        }
    }
}

/// Periodic Hann window, `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>, DspError> {
    if n == 0 {
        return Err(DspError::EmptyWindow);
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect())
}

/// Map an index into `[0, len)` by mirror reflection about the end samples
/// (edge samples are not repeated). Works for any offset, bouncing as often
/// as needed when the pad exceeds the signal.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Row-major `(n_fft/2 + 1) x T` magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
}

impl Magnitudes {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.n_frames + frame]
    }
}

pub fn stft_magnitude(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Magnitudes, DspError> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(DspError::EmptyAudio);
    }
    let x = audio.samples();
    let n_frames = cfg.n_frames(x.len());
    if n_frames == 0 {
        return Err(DspError::BadStft(format!(
            "signal of {} samples is shorter than one uncentered frame",
            x.len()
        )));
    }
    let n_bins = cfg.n_bins();

    // window zero-padded to n_fft, centered
    let mut window = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    window[offset..offset + cfg.win_length].copy_from_slice(&hann_window(cfg.win_length)?);

    let pad = if cfg.center { (cfg.n_fft / 2) as isize } else { 0 };
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = vec![0.0; n_bins * n_frames];

    for t in 0..n_frames {
        let start = (t * cfg.hop_length) as isize - pad;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = x[reflect_index(start + j as isize, x.len())];
            *slot = Complex::new(s * window[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, c) in buf.iter().take(n_bins).enumerate() {
            values[bin * n_frames + t] = c.norm();
        }
    }
    Ok(Magnitudes {
        n_bins,
        n_frames,
        values,
    })
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> Result<f64, DspError> {
    if f < 0.0 || f.is_nan() {
        return Err(DspError::Negative(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64, DspError> {
    if m < 0.0 || m.is_nan() {
        return Err(DspError::Negative(m));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Row-major `n_mels x (n_fft/2 + 1)` triangular filter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Filter edge/center frequencies in Hz (`n_mels + 2` points).
    pub edges_hz: Vec<f64>,
}

impl Filterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

pub fn mel_filterbank(cfg: &MelConfig, n_fft: usize) -> Result<Filterbank, DspError> {
    cfg.validate()?;
    if n_fft < 2 {
        return Err(DspError::BadStft(format!("n_fft {n_fft} too small")));
    }
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min)?;
    let hi = hz_to_mel(cfg.f_max)?;
    let edges_hz = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(DspError::DegenerateFilter { index: m, n_fft });
        }
    }
    Ok(Filterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        edges_hz,
    })
}

/// Log-amplitude mel spectrogram, `n_mels x T` row-major dB values.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn new(
        values: Vec<f64>,
        n_mels: usize,
        n_frames: usize,
        stft: StftConfig,
        mel: MelConfig,
        source_id: impl Into<String>,
    ) -> Result<Self, DspError> {
        if n_frames == 0 || n_mels == 0 {
            return Err(DspError::BadValues("empty spectrogram".into()));
        }
        if values.len() != n_mels * n_frames {
            return Err(DspError::BadValues(format!(
                "{} values for a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        if n_mels != mel.n_mels {
            return Err(DspError::BadValues(format!(
                "{n_mels} rows but config declares {} mels",
                mel.n_mels
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < mel.floor_db) {
            return Err(DspError::BadValues(format!(
                "value {v} is not finite or below floor {} dB",
                mel.floor_db
            )));
        }
        Ok(Self {
            values,
            n_mels,
            n_frames,
            stft,
            mel,
            source_id: source_id.into(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.values[bin * self.n_frames..(bin + 1) * self.n_frames]
    }

    /// Same configuration, new values of identical shape.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, DspError> {
        Self::new(
            values,
            self.n_mels,
            self.n_frames,
            self.stft,
            self.mel,
            self.source_id.clone(),
        )
    }
}

pub fn mel_spectrogram(
    audio: &AudioBuffer,
    stft: &StftConfig,
    mel: &MelConfig,
    source_id: &str,
) -> Result<MelSpectrogram, DspError> {
    if audio.sample_rate() != mel.sample_rate {
        return Err(DspError::SampleRateMismatch {
            audio: audio.sample_rate(),
            config: mel.sample_rate,
        });
    }
    let mag = stft_magnitude(audio, stft)?;
    let fb = mel_filterbank(mel, stft.n_fft)?;
    let t = mag.n_frames;
    let mut values = vec![0.0; fb.n_mels * t];
    for m in 0..fb.n_mels {
        let row = fb.row(m);
        let out = &mut values[m * t..(m + 1) * t];
        for (k, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let col = &mag.values[k * t..(k + 1) * t];
            for (o, &c) in out.iter_mut().zip(col) {
                *o += w * c;
            }
        }
        for o in out.iter_mut() {
            *o = (20.0 * o.max(AMPLITUDE_FLOOR).log10()).max(mel.floor_db);
        }
    }
    MelSpectrogram::new(values, fb.n_mels, t, *stft, *mel, source_id)
}

/// Extract with a named profile, checking the audio's sample rate first.
pub fn extract(audio: &AudioBuffer, profile: Profile, source_id: &str) -> Result<MelSpectrogram, DspError> {
    if audio.sample_rate() != profile.sample_rate() {
        return Err(DspError::SampleRateMismatch {
            audio: audio.sample_rate(),
            config: profile.sample_rate(),
        });
    }
    mel_spectrogram(audio, &profile.stft(), &profile.mel(), source_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_closed_form() {
        let w = hann_window(4).unwrap();
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(hann_window(1).unwrap(), vec![0.0]);
        assert!((hann_window(4).unwrap().iter().sum::<f64>() - 2.0).abs() < 1e-15);
        assert_eq!(hann_window(0), Err(DspError::EmptyWindow));
    }

    #[test]
    fn reflect_indices() {
        // signal a b c d: ... c b | a b c d | c b a ...
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn silent_frames_count() {
        let audio = AudioBuffer::new(vec![0.0; 4800], 48000).unwrap();
        let m = stft_magnitude(&audio, &Profile::Paper48k.stft()).unwrap();
        assert_eq!(m.n_frames, 9);
        assert_eq!(m.n_bins, 2049);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_response_is_window_sum() {
        let cfg = Profile::Desk16k.stft();
        let audio = AudioBuffer::new(vec![1.0; 3000], 16000).unwrap();
        let m = stft_magnitude(&audio, &cfg).unwrap();
        for t in 0..m.n_frames {
            assert!((m.get(0, t) - 400.0).abs() < 1e-9, "frame {t}: {}", m.get(0, t));
        }
    }

    #[test]
    fn stft_config_errors() {
        let audio = AudioBuffer::new(vec![0.0; 10], 16000).unwrap();
        let bad = StftConfig {
            win_length: 100,
            hop_length: 200,
            n_fft: 256,
            center: true,
        };
        assert!(matches!(stft_magnitude(&audio, &bad), Err(DspError::BadStft(_))));
        let bad = StftConfig {
            win_length: 300,
            hop_length: 100,
            n_fft: 300,
            center: true,
        };
        assert!(matches!(stft_magnitude(&audio, &bad), Err(DspError::BadStft(_))));
        let empty = AudioBuffer::new(vec![], 16000).unwrap();
        assert_eq!(
            stft_magnitude(&empty, &Profile::Desk16k.stft()),
            Err(DspError::EmptyAudio)
        );
    }

    #[test]
    fn mel_scale_points() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
        for f in [100.0, 1000.0, 8000.0] {
            let back = mel_to_hz(hz_to_mel(f).unwrap()).unwrap();
            assert!(((back - f) / f).abs() < 1e-9);
        }
        assert!(hz_to_mel(-1.0).is_err());
        assert!(mel_to_hz(-1.0).is_err());
    }

    #[test]
    fn degenerate_filterbank() {
        let cfg = MelConfig {
            n_mels: 40,
            ..MelConfig::new(16000)
        };
        assert!(matches!(
            mel_filterbank(&cfg, 32),
            Err(DspError::DegenerateFilter { .. })
        ));
    }

    #[test]
    fn default_has_80_rows() {
        let fb = mel_filterbank(&MelConfig::new(48000), 4096).unwrap();
        assert_eq!(fb.n_mels, 80);
        assert_eq!(fb.weights.len(), 80 * 2049);
    }

    #[test]
    fn silence_hits_floor() {
        let audio = AudioBuffer::new(vec![0.0; 1600], 16000).unwrap();
        let m = extract(&audio, Profile::Desk16k, "silence").unwrap();
        assert_eq!((m.n_mels(), m.n_frames()), (80, 9));
        assert!(m.values().iter().all(|&v| v == -100.0));
    }

    #[test]
    fn profile_rate_mismatch() {
        let audio = AudioBuffer::new(vec![0.0; 1600], 16000).unwrap();
        assert_eq!(
            extract(&audio, Profile::Paper48k, "x").unwrap_err(),
            DspError::SampleRateMismatch {
                audio: 16000,
                config: 48000
            }
        );
    }

    #[test]
    fn profile_parse() {
        assert_eq!("paper48k".parse::<Profile>().unwrap(), Profile::Paper48k);
        assert_eq!(Profile::Desk16k.to_string(), "desk16k");
        assert!("foo".parse::<Profile>().is_err());
        // 12.5 ms hop in both
        for p in [Profile::Paper48k, Profile::Desk16k] {
            let hop_ms = p.stft().hop_length as f64 / p.sample_rate() as f64 * 1000.0;
            assert_eq!(hop_ms, 12.5);
        }
    }
}
