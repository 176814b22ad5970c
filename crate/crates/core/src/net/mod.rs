//! Transposed-convolution reconstruction network.
//!
//! The flattened `m × n` capacitance matrix enters as an `(m·n)`-channel 1×1
//! feature map and is expanded by five transposed-convolution blocks to the
//! 100×200 image. Each block adds a residual path (1×1 convolution of its
//! input, nearest-upsampled) before its activation.

mod gradcheck;
mod io;
mod loss;
mod train;

use ect_autodiff::{ConvTransposeSpec, NormMode, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::stream_rng;
use crate::error::{Error, Result};
use crate::fem::CapacitanceMatrix;
use crate::image::PermittivityImage;

pub use gradcheck::{gradient_suite, tiny_network_config, GradCheckEntry};
pub use io::{decode_model, encode_model, load_model, load_model_expecting, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use loss::{compound_loss, loss_dice, loss_focal, loss_smooth_l1, LossConfig, LossTerm, LAMBDA_INIT_RAW};
pub use train::{train, train_with, EpochRecord, TrainConfig, TrainedModel, TrainingMeta};

pub(crate) const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
    pub batch_norm: bool,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn conv_spec(&self) -> ConvTransposeSpec {
        ConvTransposeSpec {
            stride: self.stride,
            padding: self.padding,
            output_padding: self.output_padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Measurement matrix rows (electrode offsets) and columns (electrodes).
    pub m: usize,
    pub n: usize,
    pub blocks: Vec<BlockConfig>,
    /// Required `(height, width)` after the last block.
    pub output_size: (usize, usize),
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_widths([64, 32, 16, 8])
    }
}

impl NetworkConfig {
    /// Standard five-block schedule `(1,1) → (7,13) → (13,25) → (25,50) → (50,100) → (100,200)`
    /// with the given hidden widths and a single output channel.
    pub fn with_widths(widths: [usize; 4]) -> Self {
        let mut blocks = vec![BlockConfig {
            out_channels: widths[0],
            kernel: (7, 13),
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
            batch_norm: true,
            activation: Activation::Relu,
        }];
        let ops = [(0, 0), (0, 1), (1, 1), (1, 1)];
        for (k, &op) in ops.iter().enumerate() {
            let last = k == ops.len() - 1;
            blocks.push(BlockConfig {
                out_channels: if last { 1 } else { widths[k + 1] },
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
                output_padding: op,
                batch_norm: !last,
                activation: if last { Activation::Sigmoid } else { Activation::Relu },
            });
        }
        Self {
            m: 5,
            n: 20,
            blocks,
            output_size: (100, 200),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.m * self.n
    }

    /// Spatial size after every block, starting from the 1×1 input.
    pub fn shape_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut sizes = vec![(1, 1)];
        for b in &self.blocks {
            let spec = b.conv_spec();
            spec.validate()?;
            sizes.push(spec.output_size(*sizes.last().expect("non-empty"), b.kernel)?);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("network config: {msg}")));
        if self.blocks.is_empty() || self.input_channels() == 0 {
            return bad("needs at least one block and one input channel".into());
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return bad("block widths must be positive".into());
        }
        let chain = self.shape_chain()?;
        if *chain.last().expect("non-empty") != self.output_size {
            return bad(format!(
                "blocks produce {:?}, expected {:?}",
                chain.last(),
                self.output_size
            ));
        }
        let last = self.blocks.last().expect("non-empty");
        if last.out_channels != 1 || last.activation != Activation::Sigmoid {
            return bad("final block must have one channel and a sigmoid".into());
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("invalid batch-norm constants".into());
        }
        Ok(())
    }
}

/// Parameter indices of one block inside the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockParams {
    weight: usize,
    bias: usize,
    res_weight: usize,
    res_bias: usize,
    bn: Option<(usize, usize)>,
}

/// Running batch-norm statistics of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Network weights, learnable loss weights and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    running: Vec<Option<RunningStats<T>>>,
    blocks: Vec<BlockParams>,
    lambda_raw: usize,
}

/// Result of recording one forward pass on a tape.
pub struct ForwardPass<T> {
    pub output: Var,
    /// One leaf per parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics per block (None for blocks without batch norm).
    pub batch_stats: Vec<Option<ect_autodiff::BatchStats<T>>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn lambda_raw(&self, net: &Network<T>) -> Var {
        self.params[net.lambda_raw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn block_names(k: usize) -> [String; 6] {
    [
        format!("block{k}.weight"),
        format!("block{k}.bias"),
        format!("block{k}.res_weight"),
        format!("block{k}.res_bias"),
        format!("block{k}.bn_gamma"),
        format!("block{k}.bn_beta"),
    ]
}

pub const LAMBDA_PARAM: &str = "loss.lambda_raw";

/// Effective fan-in per output pixel of a transposed convolution.
fn conv_fan_in(cin: usize, b: &BlockConfig, input: (usize, usize)) -> usize {
    let taps = |k: usize, s: usize, i: usize| k.div_ceil(s).min(i);
    cin * taps(b.kernel.0, b.stride.0, input.0) * taps(b.kernel.1, b.stride.1, input.1)
}

impl<T: Scalar> Network<T> {
    /// He-initialized network (Xavier-like for the sigmoid block), zero biases,
    /// unit batch-norm scale and λ = 1.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let chain = config.shape_chain()?;
        let mut rng = stream_rng(seed, INIT_STREAM, 0);
        let mut normal = |shape: &[usize], std: f64| -> Tensor<T> {
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::from_vec(shape, data).expect("shape matches")
        };
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut running = Vec::new();
        let mut cin = config.input_channels();
        for (k, b) in config.blocks.iter().enumerate() {
            let names = block_names(k);
            let gain = if b.activation == Activation::Relu { 2.0 } else { 1.0 };
            let fan = conv_fan_in(cin, b, chain[k]) as f64;
            let cout = b.out_channels;
            let weight = params.add(
                &names[0],
                normal(&[cin, cout, b.kernel.0, b.kernel.1], (gain / fan).sqrt()),
            );
            let bias = params.add(&names[1], Tensor::zeros(&[cout]));
            // The residual path starts small so early training is dominated by the main path.
            let res_weight = params.add(&names[2], normal(&[cout, cin], 0.5 * (1.0 / cin as f64).sqrt()));
            let res_bias = params.add(&names[3], Tensor::zeros(&[cout]));
            let bn = b.batch_norm.then(|| {
                (
                    params.add(&names[4], Tensor::full(&[cout], T::one())),
                    params.add(&names[5], Tensor::zeros(&[cout])),
                )
            });
            running.push(b.batch_norm.then(|| RunningStats {
                mean: vec![T::zero(); cout],
                var: vec![T::one(); cout],
            }));
            blocks.push(BlockParams {
                weight,
                bias,
                res_weight,
                res_bias,
                bn,
            });
            cin = cout;
        }
        let lambda_raw = params.add(LAMBDA_PARAM, Tensor::full(&[3], T::of(LAMBDA_INIT_RAW)));
        Ok(Self {
            config: config.clone(),
            params,
            running,
            blocks,
            lambda_raw,
        })
    }

    /// Rebuilds a network from named tensors, checking every shape against `config`.
    pub fn from_named(config: &NetworkConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let mismatch = |name: &str, detail: String| Error::InvalidInput(format!("parameter `{name}`: {detail}"));
        for id in 0..net.params.len() {
            let name = net.params.name(id).to_string();
            let t = lookup(&name).ok_or_else(|| mismatch(&name, "missing".into()))?;
            if t.shape() != net.params.get(id).shape() {
                return Err(mismatch(
                    &name,
                    format!("shape {:?}, expected {:?}", t.shape(), net.params.get(id).shape()),
                ));
            }
            *net.params.get_mut(id) = t;
        }
        for k in 0..net.running.len() {
            if let Some(rs) = net.running[k].as_mut() {
                for (suffix, slot) in [("running_mean", &mut rs.mean), ("running_var", &mut rs.var)] {
                    let name = format!("block{k}.bn_{suffix}");
                    let t = lookup(&name).ok_or_else(|| mismatch(&name, "missing".into()))?;
                    if t.shape() != [slot.len()] {
                        return Err(mismatch(&name, format!("shape {:?}", t.shape())));
                    }
                    *slot = t.into_data();
                }
            }
        }
        Ok(net)
    }

    /// Every named tensor: parameters in store order, then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = (0..self.params.len())
            .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
            .collect();
        for (k, rs) in self.running.iter().enumerate() {
            if let Some(rs) = rs {
                let len = rs.mean.len();
                out.push((
                    format!("block{k}.bn_running_mean"),
                    Tensor::from_vec(&[len], rs.mean.clone()).expect("len"),
                ));
                out.push((
                    format!("block{k}.bn_running_var"),
                    Tensor::from_vec(&[len], rs.var.clone()).expect("len"),
                ));
            }
        }
        out
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running(&self) -> &[Option<RunningStats<T>>] {
        &self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Raw loss-weight parameters `a`; effective weights are `softplus(a)`.
    pub fn lambda_raw(&self) -> &Tensor<T> {
        self.params.get(self.lambda_raw)
    }

    pub fn lambda_raw_id(&self) -> usize {
        self.lambda_raw
    }

    pub fn lambdas(&self) -> [f64; 3] {
        let a = self.lambda_raw().data();
        std::array::from_fn(|i| loss::softplus(a[i].as_f64()))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                        var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                    })
                })
                .collect(),
            blocks: self.blocks.clone(),
            lambda_raw: self.lambda_raw,
        }
    }

    /// Registers every parameter as a leaf and records the forward pass.
    pub fn record(&self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass<T>> {
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        self.record_with(tape, input, vars, mode)
    }

    /// Forward pass using caller-provided parameter variables (in store order).
    pub fn record_with(&self, tape: &mut Tape<T>, input: Var, params: Vec<Var>, mode: Mode) -> Result<ForwardPass<T>> {
        let c = self.config.input_channels();
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != c || shape[2] != 1 || shape[3] != 1 {
            return Err(Error::InvalidInput(format!(
                "network input shape {shape:?}, expected [batch, {c}, 1, 1]"
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::InvalidInput("parameter variable count mismatch".into()));
        }
        let chain = self.config.shape_chain()?;
        let eps = T::of(self.config.bn_eps);
        let mut x = input;
        let mut batch_stats = Vec::with_capacity(self.blocks.len());
        for (k, (b, ids)) in self.config.blocks.iter().zip(&self.blocks).enumerate() {
            let mut y = tape.conv_transpose2d(x, params[ids.weight], params[ids.bias], b.conv_spec())?;
            let mut stats = None;
            if let Some((g, be)) = ids.bn {
                let norm = match mode {
                    Mode::Train => NormMode::Train,
                    Mode::Eval => {
                        let rs = self.running[k].as_ref().expect("batch-norm block has running stats");
                        NormMode::Eval {
                            mean: &rs.mean,
                            var: &rs.var,
                        }
                    }
                };
                let (v, s) = tape.batch_norm2d(y, params[g], params[be], norm, eps)?;
                y = v;
                stats = s;
            }
            let r = tape.conv2d_1x1(x, params[ids.res_weight], params[ids.res_bias])?;
            let (h, w) = chain[k + 1];
            let r = tape.nearest_upsample(r, h, w)?;
            let z = tape.add(y, r)?;
            x = match b.activation {
                Activation::Relu => tape.relu(z),
                Activation::Sigmoid => tape.sigmoid(z),
            };
            batch_stats.push(stats);
        }
        Ok(ForwardPass {
            output: x,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[Option<ect_autodiff::BatchStats<T>>]) {
        let momentum = T::of(self.config.bn_momentum);
        for (rs, s) in self.running.iter_mut().zip(stats) {
            if let (Some(rs), Some(s)) = (rs.as_mut(), s) {
                s.update_running(&mut rs.mean, &mut rs.var, momentum);
            }
        }
    }

    /// Eval-mode forward of an input batch `[batch, m·n, 1, 1]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let pass = self.record_with(&mut tape, x, vars, Mode::Eval)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Eval-mode reconstruction of a single measurement matrix.
    pub fn predict(&self, c: &CapacitanceMatrix) -> Result<PermittivityImage> {
        Ok(self.predict_batch(&[c])?.pop().expect("one output"))
    }

    pub fn predict_batch(&self, cs: &[&CapacitanceMatrix]) -> Result<Vec<PermittivityImage>> {
        let input = input_batch::<T>(cs, &self.config)?;
        let out = self.forward(&input)?;
        let (h, w) = self.config.output_size;
        Ok(out
            .data()
            .chunks_exact(h * w)
            .map(|px| {
                let v = px.iter().map(|p| p.as_f64().clamp(0.0, 1.0)).collect();
                PermittivityImage::new(h, w, v).expect("sigmoid output in range")
            })
            .collect())
    }
}

/// `[1, m·n, 1, 1]` tensor; entry `(d, i)` lands in channel `d·n + i`.
pub fn reshape_input<T: Scalar>(c: &CapacitanceMatrix, config: &NetworkConfig) -> Result<Tensor<T>> {
    input_batch(&[c], config)
}

pub fn input_batch<T: Scalar>(cs: &[&CapacitanceMatrix], config: &NetworkConfig) -> Result<Tensor<T>> {
    let ch = config.input_channels();
    let mut data = Vec::with_capacity(cs.len() * ch);
    for c in cs {
        if (c.m, c.n) != (config.m, config.n) {
            return Err(Error::InvalidInput(format!(
                "capacitance matrix {}×{}, network expects {}×{}",
                c.m, c.n, config.m, config.n
            )));
        }
        data.extend(c.values.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::from_vec(&[cs.len(), ch, 1, 1], data)?)
}

/// `[batch, 1, h, w]` target tensor from ground-truth images.
pub fn target_batch<T: Scalar>(images: &[&PermittivityImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.rows(), img.cols()) != (h, w) {
            return Err(Error::InvalidInput("target images differ in size".into()));
        }
        data.extend(img.values().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_reaches_image_size() {
        let cfg = NetworkConfig::default();
        assert_eq!(
            cfg.shape_chain().unwrap(),
            vec![(1, 1), (7, 13), (13, 25), (25, 50), (50, 100), (100, 200)]
        );
        cfg.validate().unwrap();
        let net = Network::<f32>::new(&cfg, 0).unwrap();
        assert!(net.num_parameters() < 1_000_000, "{}", net.num_parameters());
    }

    #[test]
    fn broken_schedule_rejected() {
        let mut cfg = NetworkConfig::default();
        cfg.blocks[2].output_padding = (0, 0);
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.blocks[4].activation = Activation::Relu;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_layout() {
        let cfg = NetworkConfig::default();
        let values: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let c = CapacitanceMatrix::new(5, 20, values).unwrap();
        let t: Tensor<f64> = reshape_input(&c, &cfg).unwrap();
        assert_eq!(t.shape(), &[1, 100, 1, 1]);
        for d in 0..5 {
            for i in 0..20 {
                assert_eq!(t.data()[d * 20 + i], c.get(d, i));
            }
        }
        let zero: Tensor<f64> = reshape_input(&CapacitanceMatrix::zeros(5, 20), &cfg).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(reshape_input::<f64>(&CapacitanceMatrix::zeros(4, 20), &cfg).is_err());
    }

    #[test]
    fn forward_shape_range_and_batch_invariance() {
        let cfg = NetworkConfig::default();
        let net = Network::<f32>::new(&cfg, 1).unwrap();
        let a = CapacitanceMatrix::new(5, 20, (0..100).map(|k| (k % 7) as f64 / 7.0).collect()).unwrap();
        let b = CapacitanceMatrix::new(5, 20, (0..100).map(|k| (k % 3) as f64 / 3.0).collect()).unwrap();
        let out = net.forward(&input_batch(&[&a], &cfg).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 100, 200]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let batch = net.predict_batch(&[&a, &b, &a]).unwrap();
        assert_eq!(batch[0], batch[2]);
        assert_eq!(batch[0], net.predict(&a).unwrap());
        assert_eq!(batch[1], net.predict(&b).unwrap());
    }

    #[test]
    fn initial_loss_weights_are_one() {
        let net = Network::<f64>::new(&NetworkConfig::default(), 0).unwrap();
        for l in net.lambdas() {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }
}
