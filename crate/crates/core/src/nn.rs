//! Network building blocks on top of the tape: parameter storage, layers,
//! and the architectural units shared by all models (conv encoder/decoder,
//! MLP heads, and the batch-normalized logit-space transition module).
//!
//! Batch norm is built from tape primitives, so its backward pass comes from
//! the autodiff rules. Running statistics live in the `ParamStore` next to
//! the weights; after training they are replaced by exact statistics over
//! the whole training set, one layer at a time in forward order, so that
//! every layer sees inputs produced by already-finalized predecessors.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{Tape, Var};

pub const BN_EPS: f64 = 1e-3;
/// Keras-style momentum: running = 0.99 * running + 0.01 * batch.
const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Owns every parameter array of a model, in a stable registration order.
/// Optimizer state and checkpoints key off that order and the names.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, bool)> {
        (0..self.names.len()).map(|i| (self.names[i].as_str(), &self.values[i], self.trainable[i]))
    }

    /// Overwrite a parameter by name; shape must match. Used when loading.
    pub fn restore(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), String> {
        let id = self
            .lookup(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: stored shape {:?}, loaded shape {:?}",
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Push every parameter onto the tape as a leaf, in registration order.
    pub fn bind(&self, t: &mut Tape) -> BoundParams {
        let vars = self.values.iter().map(|v| t.leaf(v.clone())).collect();
        BoundParams { vars }
    }
}

/// Tape handles for one binding of the store; index-compatible with it.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Accumulates per-channel input statistics for one batch-norm layer while
/// the training set is streamed through the frozen network.
pub struct BnAccum {
    pub count: f64,
    pub sum: Array1<f64>,
    pub sumsq: Array1<f64>,
}

impl BnAccum {
    pub fn new(channels: usize) -> BnAccum {
        BnAccum {
            count: 0.0,
            sum: Array1::zeros(channels),
            sumsq: Array1::zeros(channels),
        }
    }

    pub fn add(&mut self, x: &ArrayD<f64>) {
        let c = self.sum.len();
        assert_eq!(x.shape()[1], c, "channel axis mismatch in capture");
        self.count += (x.len() / c) as f64;
        for (idx, &v) in x.indexed_iter() {
            self.sum[idx[1]] += v;
            self.sumsq[idx[1]] += v * v;
        }
    }

    pub fn mean(&self) -> Array1<f64> {
        &self.sum / self.count
    }

    pub fn var(&self) -> Array1<f64> {
        let m = self.mean();
        let v = &self.sumsq / self.count - &m * &m;
        v.mapv(|x| x.max(0.0))
    }
}

/// Forward-pass mode. `Capture` behaves like `Eval` but additionally records
/// the inputs of the batch-norm layer named `target`.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
    Capture { target: &'a str, acc: &'a mut BnAccum },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)); for layers feeding a ReLU.
    He,
    /// Uniform with limit sqrt(6/(fan_in+fan_out)); for everything else.
    Xavier,
}

fn init_uniform(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let limit = match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

/// Additive white noise on the input image; identity outside training.
pub struct GaussianNoise {
    pub sigma: f64,
}

impl GaussianNoise {
    pub fn forward(&self, t: &mut Tape, x: Var, mode: &mut Mode) -> Var {
        match mode {
            Mode::Train { rng } => {
                let shape = t.value(x).raw_dim();
                let noise = ArrayD::from_shape_fn(shape, |_| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * self.sigma
                });
                let n = t.leaf(noise);
                t.add(x, n)
            }
            _ => x,
        }
    }
}

/// Inverted dropout: surviving units are scaled by 1/(1-p) during training
/// so the expected activation matches evaluation mode.
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, t: &mut Tape, x: Var, mode: &mut Mode) -> Var {
        match mode {
            Mode::Train { rng } => {
                let keep = 1.0 - self.p;
                let shape = t.value(x).raw_dim();
                let mask = ArrayD::from_shape_fn(shape, |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = t.leaf(mask);
                t.mul(x, m)
            }
            _ => x,
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = store.add(
            &format!("{name}/w"),
            init_uniform(&[in_dim, out_dim], in_dim, out_dim, init, rng),
            true,
        );
        let b = bias.then(|| store.add(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[out_dim])), true));
        Linear { w, b }
    }

    /// x: [B, in] -> [B, out].
    pub fn forward(&self, t: &mut Tape, bound: &BoundParams, x: Var) -> Var {
        let y = t.matmul(x, bound.var(self.w));
        match self.b {
            Some(b) => {
                let shape = t.value(y).shape().to_vec();
                let bb = t.channel_broadcast(bound.var(b), 1, &shape);
                t.add(y, bb)
            }
            None => y,
        }
    }
}

pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = store.add(
            &format!("{name}/w"),
            init_uniform(&[cout, cin, k, k], fan_in, fan_out, init, rng),
            true,
        );
        let b = bias.then(|| store.add(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[cout])), true));
        Conv { w, b }
    }

    /// x: [B, Cin, H, W] -> [B, Cout, H, W], stride 1, same padding.
    pub fn forward(&self, t: &mut Tape, bound: &BoundParams, x: Var) -> Var {
        let y = t.conv2d_same(x, bound.var(self.w));
        match self.b {
            Some(b) => {
                let shape = t.value(y).shape().to_vec();
                let bb = t.channel_broadcast(bound.var(b), 1, &shape);
                t.add(y, bb)
            }
            None => y,
        }
    }
}

/// Batch normalization over axis 1, any rank. Training mode normalizes with
/// batch statistics (differentiable through the tape) and maintains running
/// averages; evaluation and capture modes use the stored running statistics.
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub rmean: ParamId,
    pub rvar: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm {
        let gamma = store.add(&format!("{name}/gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), true);
        let beta = store.add(&format!("{name}/beta"), ArrayD::zeros(IxDyn(&[channels])), true);
        let rmean = store.add(&format!("{name}/rmean"), ArrayD::zeros(IxDyn(&[channels])), false);
        let rvar = store.add(&format!("{name}/rvar"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), false);
        BatchNorm { name: name.to_string(), gamma, beta, rmean, rvar, channels }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        bound: &BoundParams,
        x: Var,
        mode: &mut Mode,
    ) -> Var {
        let shape = t.value(x).shape().to_vec();
        assert_eq!(shape[1], self.channels, "batch norm channel mismatch at {}", self.name);
        match mode {
            Mode::Train { .. } => {
                let n = t.value(x).len() / self.channels;
                let inv_n = 1.0 / n as f64;
                let sum = t.channel_sum(x, 1);
                let mean = t.mul_scalar(sum, inv_n);
                let mean_b = t.channel_broadcast(mean, 1, &shape);
                let center = t.sub(x, mean_b);
                let sq = t.mul(center, center);
                let var_sum = t.channel_sum(sq, 1);
                let var = t.mul_scalar(var_sum, inv_n);

                // Fold the batch statistics into the running averages.
                let m_now = t.value(mean).clone();
                let v_now = t.value(var).clone();
                {
                    let rm = store.value_mut(self.rmean);
                    *rm = &*rm * BN_MOMENTUM + &(&m_now * (1.0 - BN_MOMENTUM));
                    let rv = store.value_mut(self.rvar);
                    *rv = &*rv * BN_MOMENTUM + &(&v_now * (1.0 - BN_MOMENTUM));
                }

                let var_eps = t.add_scalar(var, BN_EPS);
                let std = t.sqrt(var_eps);
                let rstd = t.recip(std);
                let rstd_b = t.channel_broadcast(rstd, 1, &shape);
                let xhat = t.mul(center, rstd_b);
                self.scale_shift(t, bound, xhat, &shape)
            }
            Mode::Capture { target, acc } => {
                if *target == self.name {
                    acc.add(t.value(x));
                }
                self.eval_forward(t, bound, x, &shape)
            }
            Mode::Eval => self.eval_forward(t, bound, x, &shape),
        }
    }

    fn eval_forward(&self, t: &mut Tape, bound: &BoundParams, x: Var, shape: &[usize]) -> Var {
        let mean_b = t.channel_broadcast(bound.var(self.rmean), 1, shape);
        let center = t.sub(x, mean_b);
        let var_eps = t.add_scalar(bound.var(self.rvar), BN_EPS);
        let std = t.sqrt(var_eps);
        let rstd = t.recip(std);
        let rstd_b = t.channel_broadcast(rstd, 1, shape);
        let xhat = t.mul(center, rstd_b);
        self.scale_shift(t, bound, xhat, shape)
    }

    fn scale_shift(&self, t: &mut Tape, bound: &BoundParams, xhat: Var, shape: &[usize]) -> Var {
        let g = t.channel_broadcast(bound.var(self.gamma), 1, shape);
        let b = t.channel_broadcast(bound.var(self.beta), 1, shape);
        let scaled = t.mul(xhat, g);
        t.add(scaled, b)
    }

    /// Replace the running statistics with exact ones from an accumulator.
    pub fn finalize(&self, store: &mut ParamStore, acc: &BnAccum) {
        assert!(acc.count > 0.0, "no data captured for {}", self.name);
        *store.value_mut(self.rmean) = acc.mean().into_dyn();
        *store.value_mut(self.rvar) = acc.var().into_dyn();
    }
}

/// Image encoder: noisy normalized input -> latent logits, one per bit.
/// Layout: noise, BN, twice (conv, relu, BN, dropout), conv, flatten, FC.
pub struct ConvEncoder {
    noise: GaussianNoise,
    bn_in: BatchNorm,
    conv1: Conv,
    bn1: BatchNorm,
    drop1: Dropout,
    conv2: Conv,
    bn2: BatchNorm,
    drop2: Dropout,
    conv3: Conv,
    fc: Linear,
    in_shape: (usize, usize, usize),
    channels: usize,
}

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_shape: (usize, usize, usize),
        channels: usize,
        kernel: usize,
        f_bits: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvEncoder {
        let (c, h, w) = in_shape;
        ConvEncoder {
            noise: GaussianNoise { sigma: 0.2 },
            bn_in: BatchNorm::new(store, &format!("{name}/bn_in"), c),
            conv1: Conv::new(store, &format!("{name}/conv1"), c, channels, kernel, false, Init::He, rng),
            bn1: BatchNorm::new(store, &format!("{name}/bn1"), channels),
            drop1: Dropout { p: 0.2 },
            conv2: Conv::new(store, &format!("{name}/conv2"), channels, channels, kernel, false, Init::He, rng),
            bn2: BatchNorm::new(store, &format!("{name}/bn2"), channels),
            drop2: Dropout { p: 0.2 },
            conv3: Conv::new(store, &format!("{name}/conv3"), channels, channels, kernel, true, Init::Xavier, rng),
            fc: Linear::new(store, &format!("{name}/fc"), channels * h * w, f_bits, true, Init::Xavier, rng),
            in_shape,
            channels,
        }
    }

    /// x: [B, C, H, W] -> logits [B, F].
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        bound: &BoundParams,
        x: Var,
        mode: &mut Mode,
    ) -> Var {
        let (_, h, w) = self.in_shape;
        let b = t.value(x).shape()[0];
        let x = self.noise.forward(t, x, mode);
        let x = self.bn_in.forward(t, store, bound, x, mode);
        let x = self.conv1.forward(t, bound, x);
        let x = t.relu(x);
        let x = self.bn1.forward(t, store, bound, x, mode);
        let x = self.drop1.forward(t, x, mode);
        let x = self.conv2.forward(t, bound, x);
        let x = t.relu(x);
        let x = self.bn2.forward(t, store, bound, x, mode);
        let x = self.drop2.forward(t, x, mode);
        let x = self.conv3.forward(t, bound, x);
        let flat = t.reshape(x, &[b, self.channels * h * w]);
        self.fc.forward(t, bound, flat)
    }

    pub fn bn_names(&self) -> Vec<String> {
        vec![self.bn_in.name.clone(), self.bn1.name.clone(), self.bn2.name.clone()]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn_in, &self.bn1, &self.bn2]
    }
}

/// Latent-to-image decoder: FC to a spatial map, then convolutions back to
/// pixel space. The output is an unconstrained real image estimate.
pub struct ConvDecoder {
    fc: Linear,
    bn_in: BatchNorm,
    conv1: Conv,
    bn1: BatchNorm,
    drop1: Dropout,
    conv2: Conv,
    bn2: BatchNorm,
    drop2: Dropout,
    conv_out: Conv,
    out_shape: (usize, usize, usize),
    channels: usize,
}

impl ConvDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_bits: usize,
        out_shape: (usize, usize, usize),
        channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvDecoder {
        let (c, h, w) = out_shape;
        ConvDecoder {
            fc: Linear::new(store, &format!("{name}/fc"), f_bits, channels * h * w, false, Init::Xavier, rng),
            bn_in: BatchNorm::new(store, &format!("{name}/bn_in"), channels),
            conv1: Conv::new(store, &format!("{name}/conv1"), channels, channels, kernel, false, Init::He, rng),
            bn1: BatchNorm::new(store, &format!("{name}/bn1"), channels),
            drop1: Dropout { p: 0.2 },
            conv2: Conv::new(store, &format!("{name}/conv2"), channels, channels, kernel, false, Init::He, rng),
            bn2: BatchNorm::new(store, &format!("{name}/bn2"), channels),
            drop2: Dropout { p: 0.2 },
            conv_out: Conv::new(store, &format!("{name}/conv_out"), channels, c, kernel, true, Init::Xavier, rng),
            out_shape,
            channels,
        }
    }

    /// z: [B, F] -> image estimate [B, C, H, W].
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        bound: &BoundParams,
        z: Var,
        mode: &mut Mode,
    ) -> Var {
        let (_, h, w) = self.out_shape;
        let b = t.value(z).shape()[0];
        let x = self.fc.forward(t, bound, z);
        let x = t.reshape(x, &[b, self.channels, h, w]);
        let x = self.bn_in.forward(t, store, bound, x, mode);
        let x = self.conv1.forward(t, bound, x);
        let x = t.relu(x);
        let x = self.bn1.forward(t, store, bound, x, mode);
        let x = self.drop1.forward(t, x, mode);
        let x = self.conv2.forward(t, bound, x);
        let x = t.relu(x);
        let x = self.bn2.forward(t, store, bound, x, mode);
        let x = self.drop2.forward(t, x, mode);
        self.conv_out.forward(t, bound, x)
    }

    pub fn bn_names(&self) -> Vec<String> {
        vec![self.bn_in.name.clone(), self.bn1.name.clone(), self.bn2.name.clone()]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn_in, &self.bn1, &self.bn2]
    }
}

/// Two-layer MLP head: optional input squashing, then FC, ReLU, BN, dropout,
/// FC to the output logits. Used for the action classifier (squashed latent
/// logits in) and for direct successor prediction.
pub struct MlpHead {
    squash_input: bool,
    fc1: Linear,
    bn: BatchNorm,
    drop: Dropout,
    fc2: Linear,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        squash_input: bool,
        rng: &mut ChaCha8Rng,
    ) -> MlpHead {
        MlpHead {
            squash_input,
            fc1: Linear::new(store, &format!("{name}/fc1"), in_dim, hidden, false, Init::He, rng),
            bn: BatchNorm::new(store, &format!("{name}/bn"), hidden),
            drop: Dropout { p: 0.2 },
            fc2: Linear::new(store, &format!("{name}/fc2"), hidden, out_dim, true, Init::Xavier, rng),
        }
    }

    /// x: [B, in] -> logits [B, out].
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        bound: &BoundParams,
        x: Var,
        mode: &mut Mode,
    ) -> Var {
        let x = if self.squash_input { t.sigmoid(x) } else { x };
        let x = self.fc1.forward(t, bound, x);
        let x = t.relu(x);
        let x = self.bn.forward(t, store, bound, x, mode);
        let x = self.drop.forward(t, x, mode);
        self.fc2.forward(t, bound, x)
    }

    pub fn bn_names(&self) -> Vec<String> {
        vec![self.bn.name.clone()]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn]
    }
}

/// Transition dynamics in logit space: the successor (or predecessor) logit
/// for each bit is BN(current bits) + BN(embedding of the action), with two
/// dedicated batch norms per direction. With a non-negative slope on the
/// state branch each bit acts monotonically: as a function of the input bit
/// the determinized output is one of set, clear, or copy, never flip.
pub struct BackToLogit {
    pub emb: ParamId,
    bn_state: BatchNorm,
    bn_action: BatchNorm,
    f_bits: usize,
}

impl BackToLogit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        actions: usize,
        f_bits: usize,
        rng: &mut ChaCha8Rng,
    ) -> BackToLogit {
        let emb = store.add(
            &format!("{name}/emb"),
            init_uniform(&[actions, f_bits], actions, f_bits, Init::Xavier, rng),
            true,
        );
        BackToLogit {
            emb,
            bn_state: BatchNorm::new(store, &format!("{name}/bn_state"), f_bits),
            bn_action: BatchNorm::new(store, &format!("{name}/bn_action"), f_bits),
            f_bits,
        }
    }

    /// z: [B, F] bits, a: [B, A] action weights -> logits [B, F].
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        bound: &BoundParams,
        z: Var,
        a: Var,
        mode: &mut Mode,
    ) -> Var {
        let ea = t.matmul(a, bound.var(self.emb));
        let bz = self.bn_state.forward(t, store, bound, z, mode);
        let be = self.bn_action.forward(t, store, bound, ea, mode);
        t.add(bz, be)
    }

    pub fn bn_names(&self) -> Vec<String> {
        vec![self.bn_state.name.clone(), self.bn_action.name.clone()]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn_state, &self.bn_action]
    }

    /// Evaluation-mode logits as an affine function of each input bit:
    /// logit_f(z_f) = slope_f * z_f + intercept_f for the given action.
    /// Matches `forward` in eval mode exactly.
    pub fn per_bit_affine(&self, store: &ParamStore, action_one_hot: &[f64]) -> Vec<BitAffine> {
        let gs = store.value(self.bn_state.gamma);
        let bs = store.value(self.bn_state.beta);
        let ms = store.value(self.bn_state.rmean);
        let vs = store.value(self.bn_state.rvar);
        let ga = store.value(self.bn_action.gamma);
        let ba = store.value(self.bn_action.beta);
        let ma = store.value(self.bn_action.rmean);
        let va = store.value(self.bn_action.rvar);
        let emb = store.value(self.emb);
        let emb = emb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        (0..self.f_bits)
            .map(|f| {
                let ea: f64 = action_one_hot
                    .iter()
                    .enumerate()
                    .map(|(a, &wa)| wa * emb[[a, f]])
                    .sum();
                let rstd_s = 1.0 / (vs[f] + BN_EPS).sqrt();
                let rstd_a = 1.0 / (va[f] + BN_EPS).sqrt();
                let slope = gs[f] * rstd_s;
                let intercept =
                    bs[f] - gs[f] * ms[f] * rstd_s + ga[f] * (ea - ma[f]) * rstd_a + ba[f];
                BitAffine { slope, intercept }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BitAffine {
    pub slope: f64,
    pub intercept: f64,
}

/// What the determinized transition does to one bit as its input flips 0 -> 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitBehavior {
    Set,
    Clear,
    Copy,
    Flip,
}

impl BitAffine {
    pub fn output_bit(&self, input: f64) -> bool {
        self.slope * input + self.intercept >= 0.0
    }

    pub fn behavior(&self) -> BitBehavior {
        match (self.output_bit(0.0), self.output_bit(1.0)) {
            (true, true) => BitBehavior::Set,
            (false, false) => BitBehavior::Clear,
            (false, true) => BitBehavior::Copy,
            (true, false) => BitBehavior::Flip,
        }
    }
}

/// Convenience constructors used across models and tests.
pub fn leaf_images(t: &mut Tape, x: Array4<f64>) -> Var {
    t.leaf(x.into_dyn())
}

pub fn leaf_matrix(t: &mut Tape, x: Array2<f64>) -> Var {
    t.leaf(x.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let mut r = rng(1);
        let x = ArrayD::from_shape_fn(IxDyn(&[8, 3, 4, 4]), |_| r.gen_range(-3.0..9.0));
        let xv = t.leaf(x);
        let mut mode = Mode::Train { rng: &mut r };
        let y = bn.forward(&mut t, &mut store, &bound, xv, &mut mode);
        let yv = t.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = yv
                .indexed_iter()
                .filter(|(idx, _)| idx[1] == c)
                .map(|(_, &v)| v)
                .collect();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            // gamma=1, beta=0: variance is var/(var+eps), slightly below 1.
            assert!((var - 1.0).abs() < 0.05, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_running_stats_move_toward_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut r = rng(2);
        for _ in 0..600 {
            let mut t = Tape::new();
            let bound = store.bind(&mut t);
            let x = ArrayD::from_shape_fn(IxDyn(&[16, 2]), |idx| {
                let base = if idx[1] == 0 { 4.0 } else { -1.0 };
                base + r.gen_range(-0.5..0.5)
            });
            let xv = t.leaf(x);
            let mut mode = Mode::Train { rng: &mut r };
            bn.forward(&mut t, &mut store, &bound, xv, &mut mode);
        }
        let rm = store.value(bn.rmean);
        assert!((rm[0] - 4.0).abs() < 0.2, "running mean {:?}", rm);
        assert!((rm[1] + 1.0).abs() < 0.2, "running mean {:?}", rm);
    }

    #[test]
    fn batchnorm_capture_and_finalize_match_population() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut r = rng(3);
        let batches: Vec<ArrayD<f64>> = (0..5)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[7, 2]), |idx| {
                if idx[1] == 0 { r.gen_range(0.0..2.0) } else { r.gen_range(-5.0..5.0) }
            }))
            .collect();
        let mut acc = BnAccum::new(2);
        for b in &batches {
            let mut t = Tape::new();
            let bound = store.bind(&mut t);
            let xv = t.leaf(b.clone());
            let mut mode = Mode::Capture { target: "bn", acc: &mut acc };
            bn.forward(&mut t, &mut store, &bound, xv, &mut mode);
        }
        bn.finalize(&mut store, &acc);

        // Compare with direct population statistics over all batches.
        for c in 0..2 {
            let vals: Vec<f64> = batches
                .iter()
                .flat_map(|b| b.indexed_iter().filter(|(i, _)| i[1] == c).map(|(_, &v)| v).collect::<Vec<_>>())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((store.value(bn.rmean)[c] - mean).abs() < 1e-10);
            assert!((store.value(bn.rvar)[c] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn batchnorm_gradcheck_through_composite() {
        // Finite differences through the full train-mode normalization.
        let mut r = rng(4);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |_| r.gen_range(-1.0..1.0));
        let run = |x: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 2);
            *store.value_mut(bn.gamma) = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.3, 0.7]).unwrap();
            *store.value_mut(bn.beta) = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2, -0.1]).unwrap();
            let mut t = Tape::new();
            let bound = store.bind(&mut t);
            let xv = t.leaf(x.clone());
            let mut noise = rng(5);
            let mut mode = Mode::Train { rng: &mut noise };
            let y = bn.forward(&mut t, &mut store, &bound, xv, &mut mode);
            let sq = t.mul(y, y);
            let s = t.sum_all(sq);
            t.backward(s);
            (t.scalar(s), t.grad(xv))
        };
        let (_, analytic) = run(&x0);
        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (run(&xp).0 - run(&xm).0) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            assert!(rel < 1e-3, "coordinate {idx}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn dropout_scales_survivors_and_is_identity_in_eval() {
        let drop = Dropout { p: 0.2 };
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1000]), 1.0));
        let mut r = rng(6);
        let mut mode = Mode::Train { rng: &mut r };
        let y = drop.forward(&mut t, x, &mut mode);
        let yv = t.value(y);
        let zeros = yv.iter().filter(|&&v| v == 0.0).count();
        let kept: Vec<f64> = yv.iter().cloned().filter(|&v| v != 0.0).collect();
        assert!((zeros as f64 / 1000.0 - 0.2).abs() < 0.06);
        assert!(kept.iter().all(|&v| (v - 1.25).abs() < 1e-12));

        let mut mode = Mode::Eval;
        let y2 = drop.forward(&mut t, x, &mut mode);
        assert_eq!(y2, x);
    }

    #[test]
    fn encoder_decoder_shapes_round_trip() {
        let mut store = ParamStore::new();
        let mut r = rng(7);
        let enc = ConvEncoder::new(&mut store, "enc", (1, 9, 9), 4, 5, 12, &mut r);
        let dec = ConvDecoder::new(&mut store, "dec", 12, (1, 9, 9), 4, 5, &mut r);
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = leaf_images(&mut t, Array4::zeros((3, 1, 9, 9)));
        let mut mode = Mode::Eval;
        let logits = enc.forward(&mut t, &mut store, &bound, x, &mut mode);
        assert_eq!(t.value(logits).shape(), &[3, 12]);
        let z = t.sigmoid(logits);
        let y = dec.forward(&mut t, &mut store, &bound, z, &mut mode);
        assert_eq!(t.value(y).shape(), &[3, 1, 9, 9]);
        assert_eq!(enc.bn_names().len() + dec.bn_names().len(), 6);
    }

    #[test]
    fn mlp_head_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let head = MlpHead::new(&mut store, "act", 24, 50, 16, true, &mut r);
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = leaf_matrix(&mut t, Array2::zeros((5, 24)));
        let mut mode = Mode::Eval;
        let y = head.forward(&mut t, &mut store, &bound, x, &mut mode);
        assert_eq!(t.value(y).shape(), &[5, 16]);
    }

    #[test]
    fn btl_affine_matches_eval_forward() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let btl = BackToLogit::new(&mut store, "apply", 6, 8, &mut r);
        // Perturb every stored statistic so the check is not trivial.
        for name in ["apply/bn_state", "apply/bn_action"] {
            for part in ["gamma", "beta", "rmean", "rvar"] {
                let id = store.lookup(&format!("{name}/{part}")).unwrap();
                let v = store.value_mut(id);
                for x in v.iter_mut() {
                    *x = match part {
                        "rvar" => r.gen_range(0.2..2.0),
                        _ => r.gen_range(-1.0..1.0),
                    };
                }
            }
        }
        for action in 0..6 {
            let one_hot = crate::discrete::one_hot(action, 6);
            let affine = btl.per_bit_affine(&store, &one_hot);
            for trial in 0..4 {
                let z: Vec<f64> = (0..8).map(|i| ((trial + i) % 2) as f64).collect();
                let mut t = Tape::new();
                let bound = store.bind(&mut t);
                let zv = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 8]), z.clone()).unwrap());
                let av = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 6]), one_hot.clone()).unwrap());
                let mut mode = Mode::Eval;
                let logits = btl.forward(&mut t, &mut store, &bound, zv, av, &mut mode);
                let lv = t.value(logits);
                for f in 0..8 {
                    let predicted = affine[f].slope * z[f] + affine[f].intercept;
                    assert!(
                        (lv[[0, f]] - predicted).abs() < 1e-10,
                        "action {action} bit {f}: forward {} affine {predicted}",
                        lv[[0, f]]
                    );
                }
            }
        }
    }

    #[test]
    fn bit_behavior_classification() {
        assert_eq!(BitAffine { slope: 0.5, intercept: 1.0 }.behavior(), BitBehavior::Set);
        assert_eq!(BitAffine { slope: 0.5, intercept: -2.0 }.behavior(), BitBehavior::Clear);
        assert_eq!(BitAffine { slope: 2.0, intercept: -1.0 }.behavior(), BitBehavior::Copy);
        assert_eq!(BitAffine { slope: -2.0, intercept: 1.0 }.behavior(), BitBehavior::Flip);
    }

    #[test]
    fn params_receive_gradients_through_blocks() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let enc = ConvEncoder::new(&mut store, "enc", (1, 7, 7), 3, 3, 6, &mut r);
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = leaf_images(&mut t, Array4::from_shape_fn((2, 1, 7, 7), |_| r.gen_range(0.0..1.0)));
        let mut noise = rng(11);
        let mut mode = Mode::Train { rng: &mut noise };
        let logits = enc.forward(&mut t, &mut store, &bound, x, &mut mode);
        let s = t.sigmoid(logits);
        let loss = t.sum_all(s);
        t.backward(loss);
        let mut nonzero = 0;
        for id in store.ids() {
            if store.is_trainable(id) && t.grad(bound.var(id)).iter().any(|&g| g != 0.0) {
                nonzero += 1;
            }
        }
        // Every trainable parameter of the encoder is on the gradient path.
        let trainables = store.ids().filter(|&id| store.is_trainable(id)).count();
        assert_eq!(nonzero, trainables, "{nonzero} of {trainables} got gradients");
    }
}
