//! Central finite-difference checks of tape gradients (64-bit only).
//!
//! The relative error of one partial derivative is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`; the floor keeps
//! derivatives that are zero up to round-off from dominating the report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_EPS: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-3;

/// Tolerance for single differentiable ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for composite chains.
pub const CHAIN_TOLERANCE: f64 = 1e-4;

fn scalar_output<F>(f: &F, inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        let w = proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            Tensor::rand_uniform(tape.shape(out), -1.0, 1.0, &mut rng)
        });
        tape.weighted_sum(out, w)?
    };
    Ok((tape, vars, loss))
}

/// Maximum relative error between tape gradients and central differences
/// over every element of every input. Non-scalar outputs are reduced with a
/// fixed random projection.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut proj = None;
    let (tape, vars, loss) = scalar_output(&f, inputs, &mut proj, 0)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let eval = |inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| -> Result<f64, TensorError> {
        let (tape, _, loss) = scalar_output(&f, inputs, proj, 0)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work, &mut proj)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work, &mut proj)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let an = a.data()[j];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Every differentiable op, plus two composite chains.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, f64, Vec<Tensor<f64>>, CheckFn)> = Vec::new();

    cases.push((
        "conv2d",
        OP_TOLERANCE,
        vec![randn([1, 2, 6, 6], &mut rng), randn([3, 2, 3, 3], &mut rng), randn([1, 3, 1, 1], &mut rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
    ));
    cases.push((
        "conv2d_stride2",
        OP_TOLERANCE,
        vec![randn([2, 2, 6, 6], &mut rng), randn([3, 2, 4, 4], &mut rng), randn([1, 3, 1, 1], &mut rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
    ));
    cases.push((
        "conv_transpose2d",
        OP_TOLERANCE,
        vec![randn([2, 2, 3, 3], &mut rng), randn([2, 3, 4, 4], &mut rng), randn([1, 3, 1, 1], &mut rng)],
        Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)),
    ));
    cases.push((
        "instance_norm",
        OP_TOLERANCE,
        vec![randn([2, 3, 4, 4], &mut rng), randn([1, 3, 1, 1], &mut rng), randn([1, 3, 1, 1], &mut rng)],
        Box::new(|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5)),
    ));
    cases.push(("relu", OP_TOLERANCE, vec![randn([1, 2, 3, 3], &mut rng)], Box::new(|t, v| t.relu(v[0]))));
    cases.push((
        "leaky_relu",
        OP_TOLERANCE,
        vec![randn([1, 2, 3, 3], &mut rng)],
        Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
    ));
    cases.push(("tanh", OP_TOLERANCE, vec![randn([1, 2, 3, 3], &mut rng)], Box::new(|t, v| t.tanh(v[0]))));
    cases.push((
        "avg_pool2",
        OP_TOLERANCE,
        vec![randn([1, 2, 4, 6], &mut rng)],
        Box::new(|t, v| t.avg_pool2(v[0])),
    ));
    cases.push((
        "add",
        OP_TOLERANCE,
        vec![randn([1, 2, 3, 3], &mut rng), randn([1, 2, 3, 3], &mut rng)],
        Box::new(|t, v| t.add(v[0], v[1])),
    ));
    cases.push((
        "scale",
        OP_TOLERANCE,
        vec![randn([1, 1, 3, 3], &mut rng)],
        Box::new(|t, v| t.scale(v[0], -1.7)),
    ));
    cases.push((
        "concat_channels",
        OP_TOLERANCE,
        vec![randn([2, 1, 3, 3], &mut rng), randn([2, 2, 3, 3], &mut rng)],
        Box::new(|t, v| t.concat_channels(v[0], v[1])),
    ));
    cases.push((
        "bce_with_logits_t1",
        OP_TOLERANCE,
        vec![randn([1, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.bce_with_logits(v[0], 1.0)),
    ));
    cases.push((
        "bce_with_logits_t0",
        OP_TOLERANCE,
        vec![randn([1, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.bce_with_logits(v[0], 0.0)),
    ));
    cases.push((
        "mse_to_const",
        OP_TOLERANCE,
        vec![randn([1, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.mse_to_const(v[0], 1.0)),
    ));
    cases.push((
        "l1",
        OP_TOLERANCE,
        vec![randn([1, 1, 4, 4], &mut rng), randn([1, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.l1(v[0], v[1])),
    ));
    cases.push((
        "chain_conv_norm_leaky_pool",
        CHAIN_TOLERANCE,
        vec![
            randn([2, 2, 6, 6], &mut rng),
            randn([3, 2, 3, 3], &mut rng),
            randn([1, 3, 1, 1], &mut rng),
            randn([1, 3, 1, 1], &mut rng),
            randn([1, 3, 1, 1], &mut rng),
        ],
        Box::new(|t, v| {
            let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let n = t.instance_norm(c, v[3], v[4], 1e-5)?;
            let a = t.leaky_relu(n, 0.2)?;
            t.avg_pool2(a)
        }),
    ));
    cases.push((
        "chain_encoder_decoder_gan",
        CHAIN_TOLERANCE,
        vec![
            randn([1, 1, 4, 4], &mut rng),
            randn([2, 1, 4, 4], &mut rng),
            randn([2, 1, 4, 4], &mut rng),
            randn([1, 1, 4, 4], &mut rng),
        ],
        Box::new(|t, v| {
            let down = t.conv2d(v[0], v[1], None, 2, 1)?;
            let act = t.relu(down)?;
            let up = t.conv_transpose2d(act, v[2], None, 2, 1)?;
            let y = t.tanh(up)?;
            let pair = t.concat_channels(v[0], y)?;
            let pooled = t.avg_pool2(pair)?;
            let adv = t.bce_with_logits(pooled, 1.0)?;
            let rec = t.l1(y, v[3])?;
            let rec = t.scale(rec, 10.0)?;
            t.add(adv, rec)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, tolerance, inputs, f)| {
            Ok(CheckResult {
                name,
                max_rel_error: grad_check(f, &inputs, DEFAULT_EPS)?,
                tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // scale's gradient is right; a hand-broken "op" built from detach is not
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.3, -0.4]).unwrap();
        let err = grad_check(
            |t, v| {
                let d = t.detach(v[0]);
                t.mse_to_const(d, 0.0)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
