//! Mono 16-bit PCM WAV input/output.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("unsupported encoding: format tag {format_tag}, {bits} bits per sample (need 16-bit PCM)")]
    NotPcm16 { format_tag: u16, bits: u16 },
    #[error("expected mono audio, found {0} channels")]
    ChannelCount(u16),
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("data chunk truncated: header declares {declared} bytes, {available} present")]
    Truncated { declared: usize, available: usize },
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("invalid sample rate {0}")]
    BadSampleRate(u32),
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
}

/// Mono floating-point audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, WavError> {
        if sample_rate == 0 {
            return Err(WavError::BadSampleRate(sample_rate));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(WavError::NonFinite { index });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse an in-memory WAV file. Samples are scaled by 1/32768.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::MissingChunk("fmt "));
                }
                fmt = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                let available = bytes.len() - body;
                if size > available {
                    return Err(WavError::Truncated {
                        declared: size,
                        available,
                    });
                }
                data = Some(&bytes[body..body + size]);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    let (format_tag, channels, sample_rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    // 0xFFFE is WAVE_FORMAT_EXTENSIBLE; accepted when the payload is plain 16-bit PCM.
    if !(format_tag == 1 || format_tag == 0xFFFE) || bits != 16 {
        return Err(WavError::NotPcm16 { format_tag, bits });
    }
    if channels != 1 {
        return Err(WavError::ChannelCount(channels));
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    if data.len() % 2 != 0 {
        return Err(WavError::Truncated {
            declared: data.len(),
            available: data.len() - 1,
        });
    }
    if data.is_empty() {
        return Err(WavError::EmptyAudio);
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_wav(&bytes)
}

/// Encode as 16-bit PCM mono. Samples are clipped to the representable range.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &audio.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(audio: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), WavError> {
    let path = path.as_ref();
    let io = |source| WavError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_wav(audio)).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm_bytes(samples: &[i16], rate: u32, channels: u16, tag: u16, bits: u16) -> Vec<u8> {
        let mut data = Vec::new();
        for s in samples {
            data.extend_from_slice(&s.to_le_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&data);
        out
    }

    #[test]
    fn scales_pcm_samples() {
        let a = parse_wav(&pcm_bytes(&[0, 16384, -32768], 48000, 1, 1, 16)).unwrap();
        assert_eq!(a.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(a.sample_rate(), 48000);
    }

    #[test]
    fn empty_data_chunk() {
        let err = parse_wav(&pcm_bytes(&[], 16000, 1, 1, 16)).unwrap_err();
        assert!(matches!(err, WavError::EmptyAudio));
    }

    #[test]
    fn rejects_stereo_and_float() {
        let err = parse_wav(&pcm_bytes(&[1, 2], 16000, 2, 1, 16)).unwrap_err();
        assert!(matches!(err, WavError::ChannelCount(2)));
        let err = parse_wav(&pcm_bytes(&[1, 2], 16000, 1, 3, 32)).unwrap_err();
        assert!(matches!(err, WavError::NotPcm16 { format_tag: 3, .. }));
    }

    #[test]
    fn truncated_data() {
        let mut b = pcm_bytes(&[1, 2, 3, 4], 16000, 1, 1, 16);
        b.truncate(b.len() - 3);
        assert!(matches!(
            parse_wav(&b).unwrap_err(),
            WavError::Truncated { declared: 8, .. }
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            read_wav("/definitely/not/here.wav").unwrap_err(),
            WavError::Io { .. }
        ));
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut b = pcm_bytes(&[100], 16000, 1, 1, 16);
        // splice a LIST chunk with odd size before data
        let data_at = b.windows(4).position(|w| w == b"data").unwrap();
        let extra = [b'L', b'I', b'S', b'T', 3, 0, 0, 0, 1, 2, 3, 0];
        b.splice(data_at..data_at, extra);
        let a = parse_wav(&b).unwrap();
        assert_eq!(a.samples(), &[100.0 / 32768.0]);
    }

    #[test]
    fn encode_roundtrip() {
        let a = AudioBuffer::new(vec![0.0, 0.25, -0.5, 32767.0 / 32768.0], 16000).unwrap();
        let back = parse_wav(&encode_wav(&a)).unwrap();
        assert_eq!(back, a);
    }
}
