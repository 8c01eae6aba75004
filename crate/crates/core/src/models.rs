//! Coarse-to-fine generator and three-scale PatchGAN discriminators.
//!
//! Networks own their parameters as plain tensors ([`ParamSet`]). To run one
//! on a tape, [`ParamSet::bind`] copies the parameters in as leaves and the
//! returned handles are passed to `forward`. Gradients for the bound handles
//! come back in the same order, ready for [`crate::tensor::Adam`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const LOCAL_RESBLOCKS: usize = 3;
pub const N_SCALES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input {h}x{w} not divisible by {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("condition {x:?} and target {y:?} differ in shape")]
    PairShape { x: [usize; 4], y: [usize; 4] },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// Replace every tensor, keeping names. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<(), ModelError> {
        if tensors.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(ModelError::Config(format!(
                    "{}: shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Order-sensitive hash of every bit of every parameter.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw f64 images of the values
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

/// Builds a [`ParamSet`] while recording layer handles.
struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, zero: bool) -> Conv {
        let w = if zero {
            Tensor::zeros([cout, cin, k, k])
        } else {
            Tensor::randn([cout, cin, k, k], INIT_STD, self.rng)
        };
        Conv {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])),
            stride,
            pad,
            transpose: false,
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self
                .params
                .push(format!("{name}.weight"), Tensor::randn([cin, cout, 4, 4], INIT_STD, self.rng)),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])),
            stride: 2,
            pad: 1,
            transpose: true,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gain: self.params.push(format!("{name}.gain"), Tensor::full([1, c, 1, 1], T::one())),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1])),
        }
    }
}

fn apply_conv<T: Element>(tape: &mut Tape<T>, p: &[Var], c: Conv, x: Var) -> Result<Var, TensorError> {
    if c.transpose {
        tape.conv_transpose2d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
    } else {
        tape.conv2d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
    }
}

fn apply_norm<T: Element>(tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Result<Var, TensorError> {
    tape.instance_norm(x, p[n.gain], p[n.bias], NORM_EPS)
}

/// conv -> norm -> relu
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    norm: Norm,
}

impl Block {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let h = apply_conv(tape, p, self.conv, x)?;
        let h = apply_norm(tape, p, self.norm, h)?;
        tape.relu(h)
    }
}

/// x + norm(conv(relu(norm(conv(x)))))
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    first: Block,
    conv: Conv,
    norm: Norm,
}

impl ResBlock {
    fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, ch: usize) -> Self {
        Self {
            first: Block {
                conv: b.conv(&format!("{name}.conv1"), ch, ch, 3, 1, 1, false),
                norm: b.norm(&format!("{name}.norm1"), ch),
            },
            conv: b.conv(&format!("{name}.conv2"), ch, ch, 3, 1, 1, false),
            norm: b.norm(&format!("{name}.norm2"), ch),
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let h = self.first.forward(tape, p, x)?;
        let h = apply_conv(tape, p, self.conv, h)?;
        let h = apply_norm(tape, p, self.norm, h)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub n_downsample: usize,
    pub n_resblocks: usize,
    /// 0 = global generator only, 1 = wrapped by a local enhancer.
    pub n_enhancers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            n_downsample: 2,
            n_resblocks: 3,
            n_enhancers: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::Config("channel counts must be >= 1".into()));
        }
        if self.n_enhancers > 1 {
            return Err(ModelError::Config(format!(
                "n_enhancers must be 0 or 1, got {}",
                self.n_enhancers
            )));
        }
        if self.n_downsample > 6 {
            return Err(ModelError::Config(format!("n_downsample {} too deep", self.n_downsample)));
        }
        Ok(())
    }

    /// Spatial dims of the input must be multiples of this.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.n_downsample + self.n_enhancers)
    }
}

#[derive(Debug, Clone)]
struct GlobalNet {
    head: Block,
    downs: Vec<Block>,
    res: Vec<ResBlock>,
    ups: Vec<Block>,
    tail: Conv,
}

impl GlobalNet {
    /// Features before the output conv.
    fn features<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut h = self.head.forward(tape, p, x)?;
        for d in &self.downs {
            h = d.forward(tape, p, h)?;
        }
        for r in &self.res {
            h = r.forward(tape, p, h)?;
        }
        for u in &self.ups {
            h = u.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct LocalEnhancer {
    head: Block,
    down: Block,
    res: Vec<ResBlock>,
    up: Block,
    tail: Conv,
}

/// Encoder / residual / decoder generator with tanh output, optionally
/// wrapped by a local enhancer running at twice the global resolution.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<T>,
    global: GlobalNet,
    local: Option<LocalEnhancer>,
}

impl<T: Element> Generator<T> {
    /// Weights ~ N(0, 0.02), biases 0, norm gains 1; the output conv is
    /// zero so the untrained generator emits exactly 0.
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let base = cfg.base_channels;
        let head = Block {
            conv: b.conv("g.head", cfg.in_channels, base, 7, 1, 3, false),
            norm: b.norm("g.head.norm", base),
        };
        let mut ch = base;
        let mut downs = Vec::new();
        for i in 0..cfg.n_downsample {
            downs.push(Block {
                conv: b.conv(&format!("g.down{i}"), ch, ch * 2, 4, 2, 1, false),
                norm: b.norm(&format!("g.down{i}.norm"), ch * 2),
            });
            ch *= 2;
        }
        let res = (0..cfg.n_resblocks)
            .map(|i| ResBlock::build(&mut b, &format!("g.res{i}"), ch))
            .collect();
        let mut ups = Vec::new();
        for i in 0..cfg.n_downsample {
            ups.push(Block {
                conv: b.conv_t(&format!("g.up{i}"), ch, ch / 2),
                norm: b.norm(&format!("g.up{i}.norm"), ch / 2),
            });
            ch /= 2;
        }
        let tail = b.conv("g.tail", base, cfg.out_channels, 7, 1, 3, true);
        let global = GlobalNet {
            head,
            downs,
            res,
            ups,
            tail,
        };

        let local = (cfg.n_enhancers == 1).then(|| {
            let lc = (base / 2).max(1);
            LocalEnhancer {
                head: Block {
                    conv: b.conv("l.head", cfg.in_channels, lc, 7, 1, 3, false),
                    norm: b.norm("l.head.norm", lc),
                },
                down: Block {
                    conv: b.conv("l.down", lc, base, 4, 2, 1, false),
                    norm: b.norm("l.down.norm", base),
                },
                res: (0..LOCAL_RESBLOCKS)
                    .map(|i| ResBlock::build(&mut b, &format!("l.res{i}"), base))
                    .collect(),
                up: Block {
                    conv: b.conv_t("l.up", base, lc),
                    norm: b.norm("l.up.norm", lc),
                },
                tail: b.conv("l.tail", lc, cfg.out_channels, 7, 1, 3, true),
            }
        });
        let params = b.params;
        Ok(Self {
            cfg,
            params,
            global,
            local,
        })
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<(), ModelError> {
        let [_, c, h, w] = shape;
        if c != self.cfg.in_channels {
            return Err(ModelError::Config(format!(
                "input has {c} channels, generator expects {}",
                self.cfg.in_channels
            )));
        }
        let factor = self.cfg.spatial_factor();
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(ModelError::Indivisible { h, w, factor });
        }
        Ok(())
    }

    /// `x: [N, in, H, W]` to `[N, out, H, W]` in (-1, 1).
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, ModelError> {
        self.check_input(tape.shape(x))?;
        let out = match &self.local {
            None => {
                let h = self.global.features(tape, p, x)?;
                apply_conv(tape, p, self.global.tail, h)?
            }
            Some(local) => {
                let coarse = tape.avg_pool2(x)?;
                let g = self.global.features(tape, p, coarse)?;
                let h = local.head.forward(tape, p, x)?;
                let h = local.down.forward(tape, p, h)?;
                let mut h = tape.add(h, g)?;
                for r in &local.res {
                    h = r.forward(tape, p, h)?;
                }
                let h = local.up.forward(tape, p, h)?;
                apply_conv(tape, p, local.tail, h)?
            }
        };
        Ok(tape.tanh(out)?)
    }

    /// Forward without gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.take(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    /// Channels of condition + candidate.
    pub in_channels: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_channels: 16,
        }
    }
}

/// Three stride-2 4x4 convs with leaky ReLU (instance norm on the last two),
/// then a 3x3 conv to one channel of patch logits.
#[derive(Debug, Clone)]
struct Patch {
    convs: Vec<(Conv, Option<Norm>)>,
    out: Conv,
}

impl Patch {
    fn build<T: Element>(b: &mut Builder<'_, T>, prefix: &str, cfg: &DiscriminatorConfig) -> Self {
        let nd = cfg.base_channels;
        let chans = [cfg.in_channels, nd, nd * 2, nd * 4];
        let convs = (0..3)
            .map(|i| {
                let conv = b.conv(&format!("{prefix}.conv{i}"), chans[i], chans[i + 1], 4, 2, 1, false);
                let norm = (i > 0).then(|| b.norm(&format!("{prefix}.norm{i}"), chans[i + 1]));
                (conv, norm)
            })
            .collect();
        let out = b.conv(&format!("{prefix}.out"), nd * 4, 1, 3, 1, 1, true);
        Self { convs, out }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], input: Var) -> Result<Var, TensorError> {
        let mut h = input;
        for &(conv, norm) in &self.convs {
            h = apply_conv(tape, p, conv, h)?;
            if let Some(n) = norm {
                h = apply_norm(tape, p, n, h)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        apply_conv(tape, p, self.out, h)
    }
}

/// D_1..D_3: identical topology, independent weights, one per pyramid level.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator<T> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet<T>,
    scales: Vec<Patch>,
}

impl<T: Element> MultiScaleDiscriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        if cfg.base_channels == 0 || cfg.in_channels == 0 {
            return Err(ModelError::Config("discriminator channels must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let scales = (0..N_SCALES).map(|i| Patch::build(&mut b, &format!("d{i}"), &cfg)).collect();
        Ok(Self {
            cfg,
            params: b.params,
            scales,
        })
    }

    /// Patch logits of `D_scale(x, y)`: `[N, 1, ~H/8, ~W/8]`.
    pub fn forward_scale(&self, tape: &mut Tape<T>, p: &[Var], scale: usize, x: Var, y: Var) -> Result<Var, ModelError> {
        let (xs, ys) = (tape.shape(x), tape.shape(y));
        if xs != ys {
            return Err(ModelError::PairShape { x: xs, y: ys });
        }
        let d = self
            .scales
            .get(scale)
            .ok_or_else(|| ModelError::Config(format!("no discriminator for scale {scale}")))?;
        let input = tape.concat_channels(x, y)?;
        Ok(d.forward(tape, p, input)?)
    }

    /// Logits at every scale for pyramids of `x` and `y`.
    pub fn forward_all(&self, tape: &mut Tape<T>, p: &[Var], xs: &[Var; N_SCALES], ys: &[Var; N_SCALES]) -> Result<[Var; N_SCALES], ModelError> {
        let mut out = [xs[0]; N_SCALES];
        for i in 0..N_SCALES {
            out[i] = self.forward_scale(tape, p, i, xs[i], ys[i])?;
        }
        Ok(out)
    }
}

/// `[t, pool(t), pool(pool(t))]`
pub fn pyramid<T: Element>(tape: &mut Tape<T>, t: Var) -> Result<[Var; N_SCALES], ModelError> {
    let [_, _, h, w] = tape.shape(t);
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(ModelError::Indivisible { h, w, factor: 4 });
    }
    let half = tape.avg_pool2(t)?;
    let quarter = tape.avg_pool2(half)?;
    Ok([t, half, quarter])
}

/// Tape-free [`pyramid`].
pub fn pyramid_tensors<T: Element>(t: &Tensor<T>) -> Result<[Tensor<T>; N_SCALES], ModelError> {
    let mut tape = Tape::new();
    let v = tape.leaf(t.clone(), false);
    let [a, b, c] = pyramid(&mut tape, v)?;
    Ok([tape.take(a), tape.take(b), tape.take(c)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Binary cross-entropy on logits.
    #[default]
    Vanilla,
    /// Squared error to 1 (real) / 0 (fake).
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeneratorObjective {
    /// Minimize `-log D(x, G(x))`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(x, G(x)))` as written in the min-max game.
    Minimax,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "least_squares" => Ok(Self::LeastSquares),
            other => Err(format!("unknown loss variant '{other}'")),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::LeastSquares => "least_squares",
        })
    }
}

impl std::str::FromStr for GeneratorObjective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non_saturating" => Ok(Self::NonSaturating),
            "minimax" => Ok(Self::Minimax),
            other => Err(format!("unknown generator objective '{other}'")),
        }
    }
}

impl std::fmt::Display for GeneratorObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NonSaturating => "non_saturating",
            Self::Minimax => "minimax",
        })
    }
}

fn real_term<T: Element>(tape: &mut Tape<T>, logits: Var, variant: LossVariant, target: f64) -> Result<Var, TensorError> {
    match variant {
        LossVariant::Vanilla => tape.bce_with_logits(logits, target),
        LossVariant::LeastSquares => tape.mse_to_const(logits, target),
    }
}

fn sum_vars<T: Element>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var, TensorError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Adversarial term for the generator given fake-pair logits at each scale.
pub fn generator_adversarial<T: Element>(
    tape: &mut Tape<T>,
    fake_logits: &[Var; N_SCALES],
    variant: LossVariant,
    objective: GeneratorObjective,
) -> Result<Var, TensorError> {
    let terms = fake_logits
        .iter()
        .map(|&z| match (variant, objective) {
            (LossVariant::Vanilla, GeneratorObjective::Minimax) => {
                let s = tape.bce_with_logits(z, 0.0)?;
                tape.scale(s, -1.0)
            }
            _ => real_term(tape, z, variant, 1.0),
        })
        .collect::<Result<Vec<_>, _>>()?;
    sum_vars(tape, &terms)
}

/// Output of [`loss_discriminator`].
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss {
    pub total: Var,
    /// `G(x)` detached from the generator.
    pub fake: Var,
    pub fake_logits: [Var; N_SCALES],
    pub real_logits: [Var; N_SCALES],
}

/// `sum_i [ l(D_i(x_i, y_i), real) + l(D_i(x_i, G(x)_i), fake) ]` with `G(x)`
/// held constant.
#[allow(clippy::too_many_arguments)]
pub fn loss_discriminator<T: Element>(
    tape: &mut Tape<T>,
    g: &Generator<T>,
    gp: &[Var],
    d: &MultiScaleDiscriminator<T>,
    dp: &[Var],
    x: Var,
    y: Var,
    variant: LossVariant,
) -> Result<DiscriminatorLoss, ModelError> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs != ys {
        return Err(ModelError::PairShape { x: xs, y: ys });
    }
    let generated = g.forward(tape, gp, x)?;
    let fake = tape.detach(generated);
    let xp = pyramid(tape, x)?;
    let yp = pyramid(tape, y)?;
    let fp = pyramid(tape, fake)?;
    let real_logits = d.forward_all(tape, dp, &xp, &yp)?;
    let fake_logits = d.forward_all(tape, dp, &xp, &fp)?;
    let mut terms = Vec::with_capacity(2 * N_SCALES);
    for i in 0..N_SCALES {
        terms.push(real_term(tape, real_logits[i], variant, 1.0)?);
        terms.push(real_term(tape, fake_logits[i], variant, 0.0)?);
    }
    let total = sum_vars(tape, &terms)?;
    if !tape.value(total).all_finite() {
        return Err(ModelError::NonFiniteLoss("discriminator"));
    }
    Ok(DiscriminatorLoss {
        total,
        fake,
        fake_logits,
        real_logits,
    })
}

/// Output of [`loss_generator`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    /// Unweighted `mean |G(x) - y|`.
    pub l1: Var,
    pub generated: Var,
}

/// Adversarial term summed over scales plus `lambda_l1 * mean|G(x) - y|`.
/// Gradients reach the discriminators only if `dp` was bound with
/// `requires_grad`; bind it without to keep them fixed.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator<T: Element>(
    tape: &mut Tape<T>,
    g: &Generator<T>,
    gp: &[Var],
    d: &MultiScaleDiscriminator<T>,
    dp: &[Var],
    x: Var,
    y: Var,
    lambda_l1: f64,
    variant: LossVariant,
    objective: GeneratorObjective,
) -> Result<GeneratorLoss, ModelError> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs != ys {
        return Err(ModelError::PairShape { x: xs, y: ys });
    }
    let generated = g.forward(tape, gp, x)?;
    let xp = pyramid(tape, x)?;
    let fp = pyramid(tape, generated)?;
    let fake_logits = d.forward_all(tape, dp, &xp, &fp)?;
    let adversarial = generator_adversarial(tape, &fake_logits, variant, objective)?;
    let l1 = tape.l1(generated, y)?;
    let weighted = tape.scale(l1, lambda_l1)?;
    let total = tape.add(adversarial, weighted)?;
    if !tape.value(total).all_finite() {
        return Err(ModelError::NonFiniteLoss("generator"));
    }
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
        generated,
    })
}
