use std::path::Path;

use crate::container::{Container, ContainerError, TensorData};
use crate::models::{DiscriminatorConfig, Generator, GeneratorConfig, MultiScaleDiscriminator};
use crate::tensor::{AdamState, Element, Tensor};

use super::{TrainConfig, TrainError};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Generator, discriminators, both optimizer states and the config that
/// produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: MultiScaleDiscriminator<T>,
    pub opt_g: AdamState<T>,
    pub opt_d: AdamState<T>,
}

impl<T: Element> PartialEq for Checkpoint<T> {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.config == other.config
            && self.generator.cfg == other.generator.cfg
            && self.generator.params == other.generator.params
            && self.discriminator.cfg == other.discriminator.cfg
            && self.discriminator.params == other.discriminator.params
            && self.opt_g == other.opt_g
            && self.opt_d == other.opt_d
    }
}

fn get_as<T: Element>(c: &Container, name: &str) -> Result<Tensor<T>, ContainerError> {
    match c.records.iter().find(|(n, _)| n == name).map(|(_, d)| d) {
        Some(TensorData::F32(t)) => Ok(t.cast()),
        Some(TensorData::F64(t)) => Ok(t.cast()),
        None => Err(ContainerError::BadRecord {
            name: name.into(),
            detail: "missing".into(),
        }),
    }
}

fn push_state<T: Element>(c: &mut Container, prefix: &str, names: &[String], s: &AdamState<T>) {
    for (n, t) in names.iter().zip(&s.m) {
        c.push(format!("{prefix}/m/{n}"), t.clone());
    }
    for (n, t) in names.iter().zip(&s.v) {
        c.push(format!("{prefix}/v/{n}"), t.clone());
    }
}

fn read_state<T: Element>(c: &Container, prefix: &str, names: &[String], step: u64) -> Result<AdamState<T>, ContainerError> {
    let m = names
        .iter()
        .map(|n| get_as(c, &format!("{prefix}/m/{n}")))
        .collect::<Result<_, _>>()?;
    let v = names
        .iter()
        .map(|n| get_as(c, &format!("{prefix}/v/{n}")))
        .collect::<Result<_, _>>()?;
    Ok(AdamState { step, m, v })
}

impl<T: Element> Checkpoint<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set_meta("kind", "checkpoint");
        c.set_meta("checkpoint_version", CHECKPOINT_VERSION);
        c.set_meta("dtype", if T::DTYPE == 0 { "f32" } else { "f64" });
        c.set_meta("step", self.step);
        c.set_meta("opt_g_step", self.opt_g.step);
        c.set_meta("opt_d_step", self.opt_d.step);
        for (k, v) in self.config.entries() {
            c.set_meta(&format!("cfg.{k}"), v);
        }
        let g = &self.generator.params;
        let d = &self.discriminator.params;
        for (n, t) in g.names().iter().zip(g.tensors()) {
            c.push(format!("g/{n}"), t.clone());
        }
        for (n, t) in d.names().iter().zip(d.tensors()) {
            c.push(format!("d/{n}"), t.clone());
        }
        push_state(&mut c, "opt_g", g.names(), &self.opt_g);
        push_state(&mut c, "opt_d", d.names(), &self.opt_d);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        if c.meta("kind") != Some("checkpoint") {
            return Err(ContainerError::Meta("not a checkpoint".into()).into());
        }
        let version: u32 = c.meta_parse("checkpoint_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version).into());
        }
        let mut config = TrainConfig::default();
        for (k, v) in &c.meta {
            if let Some(key) = k.strip_prefix("cfg.") {
                config.set(key, v)?;
            }
        }
        config.validate()?;
        let mut generator = Generator::<T>::new(config.generator, 0)?;
        let mut discriminator = MultiScaleDiscriminator::<T>::new(config.discriminator, 0)?;
        let gt = generator
            .params
            .names()
            .iter()
            .map(|n| get_as(c, &format!("g/{n}")))
            .collect::<Result<Vec<_>, _>>()?;
        generator.params.load(gt)?;
        let dt = discriminator
            .params
            .names()
            .iter()
            .map(|n| get_as(c, &format!("d/{n}")))
            .collect::<Result<Vec<_>, _>>()?;
        discriminator.params.load(dt)?;
        let opt_g = read_state(c, "opt_g", generator.params.names(), c.meta_parse("opt_g_step")?)?;
        let opt_d = read_state(c, "opt_d", discriminator.params.names(), c.meta_parse("opt_d_step")?)?;
        for (p, (m, v)) in generator
            .params
            .tensors()
            .iter()
            .chain(discriminator.params.tensors())
            .zip(opt_g.m.iter().chain(&opt_d.m).zip(opt_g.v.iter().chain(&opt_d.v)))
        {
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(ContainerError::Meta("optimizer state shape differs from parameter".into()).into());
            }
        }
        Ok(Self {
            step: c.meta_parse("step")?,
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
        })
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.cfg
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        self.discriminator.cfg
    }
}

pub fn save_checkpoint<T: Element>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<(), TrainError> {
    Ok(ck.to_container().save(path)?)
}

/// Loads any stored precision, converting to `T`.
pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, TrainError> {
    Checkpoint::from_container(&Container::load(path)?)
}
