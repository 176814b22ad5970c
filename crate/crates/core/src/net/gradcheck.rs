//! Finite-difference verification of every layer the network uses and of a
//! small end-to-end network including the loss-weight parameters.

use ect_autodiff::{grad_check, ConvTransposeSpec, GradCheckConfig, GradCheckReport, NormMode, Tape, Tensor, Var};
use rand::Rng;

use super::loss::{compound_loss, LossConfig};
use super::{Activation, BlockConfig, Mode, Network, NetworkConfig};
use crate::dataset::stream_rng;
use crate::error::Result;

const SUITE_STREAM: u64 = 5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Two-block network mapping a 2×3 measurement matrix to a 4×6 image.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        m: 2,
        n: 3,
        blocks: vec![
            BlockConfig {
                out_channels: 3,
                kernel: (2, 3),
                stride: (1, 1),
                padding: (0, 0),
                output_padding: (0, 0),
                batch_norm: true,
                activation: Activation::Relu,
            },
            BlockConfig {
                out_channels: 1,
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
                output_padding: (1, 1),
                batch_norm: false,
                activation: Activation::Sigmoid,
            },
        ],
        output_size: (4, 6),
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

struct Gen(rand_chacha::ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.0.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }
}

/// `Σ R ⊙ y` for a fixed random weighting `R`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> ect_autodiff::Result<Var> {
    let w = tape.constant(r.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs every check with step `1e-5` in double precision.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut g = Gen(stream_rng(seed, SUITE_STREAM, 0));
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(GradCheckEntry {
            name: name.to_string(),
            report,
        })
    };

    let specs = [
        (
            "conv_transpose2d (7x13 projection)",
            (1, 1),
            (7, 13),
            ConvTransposeSpec::unit(),
        ),
        (
            "conv_transpose2d (stride 2, output padding)",
            (3, 4),
            (3, 3),
            ConvTransposeSpec {
                stride: (2, 2),
                padding: (1, 1),
                output_padding: (0, 1),
            },
        ),
    ];
    for (name, (h, w), (kh, kw), spec) in specs {
        let x = g.uniform(&[2, 3, h, w], -1.0, 1.0);
        let wt = g.uniform(&[3, 2, kh, kw], -1.0, 1.0);
        let b = g.uniform(&[2], -1.0, 1.0);
        let (oh, ow) = spec.output_size((h, w), (kh, kw))?;
        let r = g.uniform(&[2, 2, oh, ow], -1.0, 1.0);
        let rep = grad_check(
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], v[2], spec)?;
                weighted_sum(t, y, &r)
            },
            &[x, wt, b],
            &cfg,
        )?;
        push(name, rep);
    }

    let x = g.uniform(&[2, 3, 2, 3], -1.0, 1.0);
    let w = g.uniform(&[4, 3], -1.0, 1.0);
    let b = g.uniform(&[4], -1.0, 1.0);
    let r = g.uniform(&[2, 4, 2, 3], -1.0, 1.0);
    push(
        "conv2d_1x1",
        grad_check(
            |t, v| {
                let y = t.conv2d_1x1(v[0], v[1], v[2])?;
                weighted_sum(t, y, &r)
            },
            &[x, w, b],
            &cfg,
        )?,
    );

    let x = g.uniform(&[3, 2, 2, 3], -1.0, 1.0);
    let gamma = g.uniform(&[2], 0.5, 1.5);
    let beta = g.uniform(&[2], -0.5, 0.5);
    let r = g.uniform(&[3, 2, 2, 3], -1.0, 1.0);
    push(
        "batch_norm2d (train)",
        grad_check(
            |t, v| {
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], NormMode::Train, 1e-5)?;
                weighted_sum(t, y, &r)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            &cfg,
        )?,
    );
    let (mean, var) = ([0.1, -0.2], [0.7, 1.3]);
    push(
        "batch_norm2d (eval)",
        grad_check(
            |t, v| {
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var }, 1e-5)?;
                weighted_sum(t, y, &r)
            },
            &[x, gamma, beta],
            &cfg,
        )?,
    );

    let a = g.uniform(&[2, 2, 3, 4], -1.0, 1.0);
    let b = g.uniform(&[2, 2, 3, 4], -1.0, 1.0);
    let r = g.uniform(&[2, 2, 3, 4], -1.0, 1.0);
    push(
        "relu, sigmoid, add, mul",
        grad_check(
            |t, v| {
                let s = t.sigmoid(v[0]);
                let q = t.relu(v[1]);
                let m = t.mul(s, q)?;
                let y = t.add(m, v[0])?;
                weighted_sum(t, y, &r)
            },
            &[a, b],
            &cfg,
        )?,
    );

    let x = g.uniform(&[2, 3, 3, 5], -1.0, 1.0);
    let r = g.uniform(&[2, 3, 7, 13], -1.0, 1.0);
    push(
        "nearest_upsample",
        grad_check(
            |t, v| {
                let y = t.nearest_upsample(v[0], 7, 13)?;
                weighted_sum(t, y, &r)
            },
            &[x],
            &cfg,
        )?,
    );

    let pred = g.uniform(&[2, 1, 4, 5], 0.05, 0.95);
    let target = g.uniform(&[2, 1, 4, 5], 0.0, 1.0);
    let lambda_raw = g.uniform(&[3], -1.0, 1.0);
    let loss = LossConfig::default();
    push(
        "compound loss (smooth L1, focal, dice, softplus weights)",
        grad_check(
            |t, v| {
                let y = t.constant(target.clone());
                compound_loss(t, v[0], y, v[1], &loss).map_err(to_tensor_err)
            },
            &[pred, lambda_raw],
            &cfg,
        )?,
    );

    let net_cfg = tiny_network_config();
    let net = Network::<f64>::new(&net_cfg, seed)?;
    let mut params: Vec<Tensor<f64>> = net.params().tensors().to_vec();
    // Move λ away from its symmetric initial value.
    params[net.lambda_raw_id()] = g.uniform(&[3], -0.5, 1.0);
    let input = g.uniform(&[3, 6, 1, 1], 0.0, 1.0);
    let target = g.uniform(&[3, 1, 4, 6], 0.0, 1.0);
    let lambda_id = net.lambda_raw_id();
    push(
        "end-to-end two-block network",
        grad_check(
            |t, v| {
                let x = t.constant(input.clone());
                let y = t.constant(target.clone());
                let pass = net.record_with(t, x, v.to_vec(), Mode::Train).map_err(to_tensor_err)?;
                compound_loss(t, pass.output, y, v[lambda_id], &loss).map_err(to_tensor_err)
            },
            &params,
            &cfg,
        )?,
    );
    Ok(out)
}

fn to_tensor_err(e: crate::Error) -> ect_autodiff::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => ect_autodiff::Error::Shape {
            op: "network",
            detail: other.to_string(),
        },
    }
}
