//! Pair construction, the alternating D/G training loop, checkpoints and
//! enhancement.

mod checkpoint;
mod pairs;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{quantize16, CodecError, GrayImage, NormMeta};
use crate::container::ContainerError;
use crate::dsp::{reflect_index, DspError};
use crate::models::{
    generator_adversarial, loss_discriminator, loss_generator, DiscriminatorConfig, GeneratorConfig, GeneratorObjective,
    LossVariant, ModelError, MultiScaleDiscriminator, Generator,
};
use crate::tensor::{Adam, AdamState, Element, Tape, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use pairs::{degrade_pairs, load_as_image, make_pairs, oversmooth, write_manifest, ImageSettings, Pair, PairDataset, PairMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no input files")]
    EmptyDataset,
    #[error("duplicate pair id '{0}'")]
    DuplicateId(String),
    #[error("pair '{id}': condition is {x:?} but target is {y:?} (rows, cols)")]
    PairShape {
        id: String,
        x: (usize, usize),
        y: (usize, usize),
    },
    #[error("no counterpart for '{0}' (UnmatchedPair)")]
    UnmatchedPair(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite {what} at step {step}")]
    NonFiniteLoss { step: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: Adam,
    pub steps: u64,
    pub batch_size: usize,
    /// Random crop `(rows, cols)`, or whole images.
    pub crop: Option<(usize, usize)>,
    pub lambda_l1: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub objective: GeneratorObjective,
    /// Assemble batches on the training thread instead of a prefetch thread.
    pub deterministic: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: Adam::default(),
            steps: 2000,
            batch_size: 2,
            crop: Some((64, 64)),
            lambda_l1: 10.0,
            seed: 17,
            loss_variant: LossVariant::Vanilla,
            objective: GeneratorObjective::NonSaturating,
            deterministic: true,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| TrainError::Config(format!("{key}={value}: {e}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "lr",
        "beta1",
        "beta2",
        "eps",
        "steps",
        "batch_size",
        "crop",
        "lambda_l1",
        "seed",
        "loss_variant",
        "generator_objective",
        "deterministic",
        "g_base_channels",
        "g_n_downsample",
        "g_n_resblocks",
        "g_n_enhancers",
        "d_base_channels",
    ];

    /// Set one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => {
                self.crop = match value.trim() {
                    "none" => None,
                    v => {
                        let (h, w) = v
                            .split_once('x')
                            .ok_or_else(|| TrainError::Config(format!("crop={v}: expected HxW or none")))?;
                        Some((parse(key, h)?, parse(key, w)?))
                    }
                }
            }
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_variant" => self.loss_variant = parse(key, value)?,
            "generator_objective" => self.objective = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "g_base_channels" => self.generator.base_channels = parse(key, value)?,
            "g_n_downsample" => self.generator.n_downsample = parse(key, value)?,
            "g_n_resblocks" => self.generator.n_resblocks = parse(key, value)?,
            "g_n_enhancers" => self.generator.n_enhancers = parse(key, value)?,
            "d_base_channels" => self.discriminator.base_channels = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`; `set` accepts each back unchanged.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let crop = match self.crop {
            Some((h, w)) => format!("{h}x{w}"),
            None => "none".into(),
        };
        let values = [
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.steps.to_string(),
            self.batch_size.to_string(),
            crop,
            self.lambda_l1.to_string(),
            self.seed.to_string(),
            self.loss_variant.to_string(),
            self.objective.to_string(),
            self.deterministic.to_string(),
            self.generator.base_channels.to_string(),
            self.generator.n_downsample.to_string(),
            self.generator.n_resblocks.to_string(),
            self.generator.n_enhancers.to_string(),
            self.discriminator.base_channels.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Parse `key = value` lines (`#` comments allowed) over the defaults.
    pub fn parse_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rows and columns fed to the networks must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.generator.spatial_factor().max(4)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.adam.eps));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1));
        }
        self.generator.validate()?;
        if self.discriminator.base_channels == 0 {
            return bad("d_base_channels must be >= 1".into());
        }
        if self.discriminator.in_channels != self.generator.in_channels + self.generator.out_channels {
            return bad("discriminator must see condition and candidate channels".into());
        }
        if let Some((h, w)) = self.crop {
            let m = self.spatial_multiple();
            if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
                return bad(format!("crop {h}x{w} must be a nonzero multiple of {m}"));
            }
        }
        Ok(())
    }
}

/// One row of the loss log, evaluated at the parameters entering the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    /// Unweighted `mean |G(x) - y|` in the [-1, 1] pixel domain.
    pub loss_g_l1: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_d,loss_g_adv,loss_g_l1";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss_d, r.loss_g_adv, r.loss_g_l1);
    }
    s
}

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(records)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pixels to [-1, 1].
pub fn image_to_tensor<T: Element>(img: &GrayImage) -> Tensor<T> {
    let data = img
        .pixels()
        .iter()
        .map(|&p| T::from_f64(p as f64 / 65535.0 * 2.0 - 1.0))
        .collect();
    Tensor::from_vec([1, 1, img.height(), img.width()], data).expect("image shape")
}

/// [-1, 1] back to pixels, clamping.
pub fn tensor_to_image<T: Element>(t: &Tensor<T>) -> Result<GrayImage, TrainError> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 {
        return Err(TrainError::Config(format!("expected one single-channel image, got {n}x{c}")));
    }
    let pixels = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(CodecError::NonFinite(i));
            }
            quantize16(((v + 1.0) / 2.0).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GrayImage::new(w, h, pixels)?)
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
}

/// Seeded batch sampler: pair indices with replacement, one crop per pair
/// shared by condition and target.
pub struct BatchSampler<'a> {
    ds: &'a PairDataset,
    crop: Option<(usize, usize)>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

const SAMPLER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a PairDataset, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let m = cfg.spatial_multiple();
        for p in ds.pairs() {
            let (h, w) = (p.y.height(), p.y.width());
            match cfg.crop {
                Some((ch, cw)) if ch > h || cw > w => {
                    return Err(TrainError::Config(format!(
                        "pair '{}' is {h}x{w}, smaller than crop {ch}x{cw}",
                        p.id
                    )))
                }
                None if h % m != 0 || w % m != 0 => {
                    return Err(TrainError::Config(format!(
                        "pair '{}' is {h}x{w}, not a multiple of {m}; use crop",
                        p.id
                    )))
                }
                _ => {}
            }
        }
        if cfg.crop.is_none() && cfg.batch_size > 1 {
            let first = &ds.pairs()[0].y;
            if ds
                .pairs()
                .iter()
                .any(|p| (p.y.height(), p.y.width()) != (first.height(), first.width()))
            {
                return Err(TrainError::Config("uncropped batches need equal image sizes".into()));
            }
        }
        Ok(Self {
            ds,
            crop: cfg.crop,
            batch_size: cfg.batch_size,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT),
        })
    }

    pub fn next_batch<T: Element>(&mut self) -> Result<Batch<T>, TrainError> {
        let mut xs = Vec::with_capacity(self.batch_size);
        let mut ys = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let p = &self.ds.pairs()[self.rng.random_range(0..self.ds.len())];
            let x = image_to_tensor::<T>(&p.x);
            let y = image_to_tensor::<T>(&p.y);
            match self.crop {
                Some((ch, cw)) => {
                    let (h, w) = (p.y.height(), p.y.width());
                    // stay inside real frames when they are wide enough
                    let frames = p.y_meta.orig_frames.min(p.x_meta.orig_frames).min(w);
                    let span = if frames >= cw { frames } else { w };
                    let h0 = self.rng.random_range(0..=h - ch);
                    let w0 = self.rng.random_range(0..=span - cw);
                    xs.push(x.crop(h0, w0, ch, cw)?);
                    ys.push(y.crop(h0, w0, ch, cw)?);
                }
                None => {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        Ok(Batch {
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
        })
    }
}

/// Training state: networks plus optimizer moments.
pub struct Trainer<T> {
    pub ck: Checkpoint<T>,
}

fn non_finite(step: u64, e: ModelError) -> TrainError {
    match e {
        ModelError::NonFiniteLoss(what) => TrainError::NonFiniteLoss {
            step,
            what: format!("{what} loss"),
        },
        ModelError::Tensor(TensorError::NonFiniteGradient { index }) => TrainError::NonFiniteLoss {
            step,
            what: format!("gradient (parameter {index})"),
        },
        other => other.into(),
    }
}

impl<T: Element> Trainer<T> {
    /// Fresh networks: G from `seed`, D from `seed + 1`.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let generator = Generator::<T>::new(cfg.generator, cfg.seed)?;
        let discriminator = MultiScaleDiscriminator::<T>::new(cfg.discriminator, cfg.seed.wrapping_add(1))?;
        let opt_g = AdamState::new(generator.params.tensors());
        let opt_d = AdamState::new(discriminator.params.tensors());
        Ok(Self {
            ck: Checkpoint {
                step: 0,
                config: cfg,
                generator,
                discriminator,
                opt_g,
                opt_d,
            },
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        Self { ck }
    }

    /// One Adam update of every discriminator. Returns the losses before the
    /// update; G is read but never written.
    pub fn discriminator_step(&mut self, batch: &Batch<T>) -> Result<LossRecord, TrainError> {
        let step = self.ck.step;
        let cfg = self.ck.config;
        let ck = &mut self.ck;
        let mut tape = Tape::new();
        let gp = ck.generator.params.bind(&mut tape, false);
        let dp = ck.discriminator.params.bind(&mut tape, true);
        let x = tape.leaf(batch.x.clone(), false);
        let y = tape.leaf(batch.y.clone(), false);
        let dl = loss_discriminator(
            &mut tape,
            &ck.generator,
            &gp,
            &ck.discriminator,
            &dp,
            x,
            y,
            cfg.loss_variant,
        )
        .map_err(|e| non_finite(step, e))?;
        let adv = generator_adversarial(&mut tape, &dl.fake_logits, cfg.loss_variant, cfg.objective)?;
        let l1 = tape.l1(dl.fake, y)?;
        let record = LossRecord {
            step,
            loss_d: to_f64(tape.value(dl.total))?,
            loss_g_adv: to_f64(tape.value(adv))?,
            loss_g_l1: to_f64(tape.value(l1))?,
        };
        if !(record.loss_g_adv.is_finite() && record.loss_g_l1.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                step,
                what: "generator loss".into(),
            });
        }
        let grads = tape.backward(dl.total)?.collect(&dp);
        drop(tape);
        cfg.adam
            .step(&mut ck.opt_d, ck.discriminator.params.tensors_mut(), &grads)
            .map_err(|e| non_finite(step, e.into()))?;
        Ok(record)
    }

    /// One Adam update of the generator against the current
    /// discriminators. Returns the total generator loss before the update.
    pub fn generator_step(&mut self, batch: &Batch<T>) -> Result<f64, TrainError> {
        let step = self.ck.step;
        let cfg = self.ck.config;
        let ck = &mut self.ck;
        let mut tape = Tape::new();
        let gp = ck.generator.params.bind(&mut tape, true);
        let dp = ck.discriminator.params.bind(&mut tape, false);
        let x = tape.leaf(batch.x.clone(), false);
        let y = tape.leaf(batch.y.clone(), false);
        let gl = loss_generator(
            &mut tape,
            &ck.generator,
            &gp,
            &ck.discriminator,
            &dp,
            x,
            y,
            cfg.lambda_l1,
            cfg.loss_variant,
            cfg.objective,
        )
        .map_err(|e| non_finite(step, e))?;
        let total = to_f64(tape.value(gl.total))?;
        let grads = tape.backward(gl.total)?.collect(&gp);
        drop(tape);
        cfg.adam
            .step(&mut ck.opt_g, ck.generator.params.tensors_mut(), &grads)
            .map_err(|e| non_finite(step, e.into()))?;
        Ok(total)
    }

    /// D step then G step on the same batch.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossRecord, TrainError> {
        let record = self.discriminator_step(batch)?;
        self.generator_step(batch)?;
        self.ck.step += 1;
        Ok(record)
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.ck
    }
}

fn to_f64<T: Element>(t: &Tensor<T>) -> Result<f64, TensorError> {
    Ok(t.item()?.to_f64().unwrap_or(f64::NAN))
}

/// Run `cfg.steps` steps from fresh networks. `on_step` sees every record as
/// it is produced.
pub fn train_with<T: Element>(
    ds: &PairDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(Checkpoint<T>, Vec<LossRecord>), TrainError> {
    let mut trainer = Trainer::<T>::new(*cfg)?;
    let mut sampler = BatchSampler::new(ds, cfg)?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    if cfg.deterministic {
        for _ in 0..cfg.steps {
            let batch = sampler.next_batch::<T>()?;
            let rec = trainer.step(&batch)?;
            on_step(&rec);
            log.push(rec);
        }
    } else {
        // batch assembly runs ahead; order is still fixed by the sampler seed
        std::thread::scope(|s| -> Result<(), TrainError> {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch<T>, TrainError>>(2);
            let steps = cfg.steps;
            s.spawn(move || {
                for _ in 0..steps {
                    if tx.send(sampler.next_batch::<T>()).is_err() {
                        break;
                    }
                }
            });
            for batch in rx.iter().take(steps as usize) {
                let rec = trainer.step(&batch?)?;
                on_step(&rec);
                log.push(rec);
            }
            Ok(())
        })?;
    }
    Ok((trainer.into_checkpoint(), log))
}

pub fn train<T: Element>(ds: &PairDataset, cfg: &TrainConfig) -> Result<(Checkpoint<T>, Vec<LossRecord>), TrainError> {
    train_with(ds, cfg, |_| {})
}

/// Run the generator on a full image. Dimensions and metadata are kept.
///
/// Only the `orig_frames` real columns go through the network, mirrored out
/// to the generator's spatial multiple; padding columns come back as zero.
pub fn enhance<T: Element>(ck: &Checkpoint<T>, img: &GrayImage, meta: &NormMeta) -> Result<(GrayImage, NormMeta), TrainError> {
    meta.validate()?;
    if meta.n_mels != img.height() || meta.orig_frames > img.width() {
        return Err(CodecError::MetaMismatch(format!(
            "metadata ({} mels, {} frames) does not fit a {}x{} image",
            meta.n_mels,
            meta.orig_frames,
            img.height(),
            img.width()
        ))
        .into());
    }
    let (h, w, t) = (img.height(), img.width(), meta.orig_frames);
    let f = ck.generator.cfg.spatial_factor();
    let tw = t.div_ceil(f) * f;
    let full = image_to_tensor::<T>(img);
    let mut data = Vec::with_capacity(h * tw);
    for r in 0..h {
        let row = &full.data()[r * w..r * w + t];
        data.extend((0..tw).map(|c| row[reflect_index(c as isize, t)]));
    }
    let y = ck.generator.infer(&Tensor::from_vec([1, 1, h, tw], data)?)?;
    let mut out = vec![0u16; h * w];
    let enhanced = tensor_to_image(&y)?;
    for r in 0..h {
        out[r * w..r * w + t].copy_from_slice(&enhanced.pixels()[r * tw..r * tw + t]);
    }
    Ok((GrayImage::new(w, h, out)?, *meta))
}
