use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::read_wav;
use crate::codec::{self, image_to_mel, mel_to_image, read_image_with_meta, GrayImage, NormMeta};
use crate::dsp::{extract, reflect_index, MelSpectrogram, Profile};

use super::TrainError;

/// Gaussian blur along time only: radius `ceil(3 sigma)`, reflect padding,
/// kernel normalized to unit sum. `sigma_t = 0` is the identity.
pub fn oversmooth(mel: &MelSpectrogram, sigma_t: f64) -> Result<MelSpectrogram, TrainError> {
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(TrainError::Config(format!("sigma_t must be >= 0, got {sigma_t}")));
    }
    if sigma_t == 0.0 {
        return Ok(mel.clone());
    }
    let radius = (3.0 * sigma_t).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_t * sigma_t)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);

    let t = mel.n_frames();
    let mut values = Vec::with_capacity(mel.values().len());
    for bin in 0..mel.n_mels() {
        let row = mel.row(bin);
        for f in 0..t as isize {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * row[reflect_index(f + j as isize - radius, t)])
                .sum();
            values.push(v);
        }
    }
    // convex combination of in-range values, but round-off can dip below the floor
    let floor = mel.mel.floor_db;
    values.iter_mut().for_each(|v| *v = v.max(floor));
    Ok(mel.with_values(values)?)
}

/// Settings for turning audio into images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSettings {
    pub profile: Profile,
    pub min_db: f64,
    pub max_db: f64,
    pub pad_multiple: usize,
}

impl Default for ImageSettings {
    fn default() -> Self {
        Self {
            profile: Profile::Desk16k,
            min_db: codec::DEFAULT_MIN_DB,
            max_db: codec::DEFAULT_MAX_DB,
            pad_multiple: codec::DEFAULT_PAD_MULTIPLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    /// Condition (over-smoothed / synthesized).
    pub x: GrayImage,
    pub x_meta: NormMeta,
    /// Target (natural).
    pub y: GrayImage,
    pub y_meta: NormMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pairs: Vec<Pair>,
}

impl PairDataset {
    pub fn new(pairs: Vec<Pair>) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.id.clone()) {
                return Err(TrainError::DuplicateId(p.id.clone()));
            }
            if (p.x.width(), p.x.height()) != (p.y.width(), p.y.height()) {
                return Err(TrainError::PairShape {
                    id: p.id.clone(),
                    x: (p.x.height(), p.x.width()),
                    y: (p.y.height(), p.y.width()),
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Tab-separated `x_path<TAB>y_path` lines; the pair id is the stem of
    /// the target file.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (xp, yp) = line.split_once('\t').ok_or_else(|| TrainError::Manifest {
                line: lineno + 1,
                msg: "expected x_path<TAB>y_path".into(),
            })?;
            let resolve = |p: &str| {
                let p = Path::new(p.trim());
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let (xp, yp) = (resolve(xp), resolve(yp));
            let (x, x_meta) = read_image_with_meta(&xp)?;
            let (y, y_meta) = read_image_with_meta(&yp)?;
            pairs.push(Pair {
                id: stem(&yp),
                x,
                x_meta,
                y,
                y_meta,
            });
        }
        Self::new(pairs)
    }
}

pub fn write_manifest(entries: &[(PathBuf, PathBuf)], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|(x, y)| format!("{}\t{}\n", x.display(), y.display()))
        .collect();
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairMode {
    /// Condition = time-blurred copy of each natural spectrogram.
    Degrade { sigma_t: f64 },
    /// Condition = same-named file from another directory.
    Paired { synth_dir: PathBuf },
}

/// Usable inputs in a directory: `.wav` files and `.png` images (with
/// sidecars), keyed by stem and sorted.
fn list_inputs(dir: &Path) -> Result<BTreeMap<String, PathBuf>, TrainError> {
    let entries = fs::read_dir(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for e in entries {
        let p = e
            .map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("wav" | "png")) {
            out.insert(stem(&p), p);
        }
    }
    Ok(out)
}

/// Load one input as an image: WAVs are extracted with the profile.
pub fn load_as_image(path: &Path, settings: &ImageSettings) -> Result<(GrayImage, NormMeta, Option<MelSpectrogram>), TrainError> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let audio = read_wav(path).map_err(|e| TrainError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mel = extract(&audio, settings.profile, &stem(path)).map_err(|e| TrainError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let (img, meta) = mel_to_image(&mel, settings.min_db, settings.max_db, settings.pad_multiple)?;
        Ok((img, meta, Some(mel)))
    } else {
        let (img, meta) = read_image_with_meta(path)?;
        Ok((img, meta, None))
    }
}

/// Degrade-mode pairs from spectrograms already in memory.
pub fn degrade_pairs(mels: &[MelSpectrogram], sigma_t: f64, settings: &ImageSettings) -> Result<PairDataset, TrainError> {
    let pairs = mels
        .iter()
        .map(|m| {
            let (y, y_meta) = mel_to_image(m, settings.min_db, settings.max_db, settings.pad_multiple)?;
            let (x, x_meta) = mel_to_image(&oversmooth(m, sigma_t)?, settings.min_db, settings.max_db, settings.pad_multiple)?;
            Ok(Pair {
                id: m.source_id.clone(),
                x,
                x_meta,
                y,
                y_meta,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    PairDataset::new(pairs)
}

pub fn make_pairs(source: impl AsRef<Path>, mode: &PairMode, settings: &ImageSettings) -> Result<PairDataset, TrainError> {
    let naturals = list_inputs(source.as_ref())?;
    if naturals.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let synth = match mode {
        PairMode::Paired { synth_dir } => {
            let s = list_inputs(synth_dir)?;
            if let Some(id) = naturals.keys().find(|k| !s.contains_key(*k)) {
                return Err(TrainError::UnmatchedPair(id.clone()));
            }
            if let Some(id) = s.keys().find(|k| !naturals.contains_key(*k)) {
                return Err(TrainError::UnmatchedPair(id.clone()));
            }
            Some(s)
        }
        PairMode::Degrade { .. } => None,
    };
    let mut pairs = Vec::with_capacity(naturals.len());
    for (id, path) in &naturals {
        let (y, y_meta, mel) = load_as_image(path, settings)?;
        let (x, x_meta) = match (mode, &synth) {
            (PairMode::Degrade { sigma_t }, _) => {
                let mel = match mel {
                    Some(m) => m,
                    None => image_to_mel(&y, &y_meta, id)?,
                };
                let smooth = oversmooth(&mel, *sigma_t)?;
                mel_to_image(&smooth, y_meta.min_db, y_meta.max_db, settings.pad_multiple)?
            }
            (PairMode::Paired { .. }, Some(s)) => {
                let (x, m, _) = load_as_image(&s[id], settings)?;
                (x, m)
            }
            _ => unreachable!("synth listing exists in paired mode"),
        };
        if (x.width(), x.height()) != (y.width(), y.height()) {
            return Err(TrainError::PairShape {
                id: id.clone(),
                x: (x.height(), x.width()),
                y: (y.height(), y.width()),
            });
        }
        pairs.push(Pair {
            id: id.clone(),
            x,
            x_meta,
            y,
            y_meta,
        });
    }
    PairDataset::new(pairs)
}
