//! Trainable models over image-pair transitions.
//!
//! All of them share the same convolutional encoder/decoder architecture and
//! the relaxed discrete bottlenecks:
//!
//! * `Sae`: plain state autoencoder, image to bit vector and back.
//! * `Ama2`: action classifier plus direct successor predictor on top of a
//!   frozen `Sae`; works in latent space only.
//! * `CubeSpace`: joint model whose transition runs through a
//!   batch-normalized logit-space module, optionally bidirectional (with a
//!   regression branch sharing encoder, decoder, and action classifier).
//!
//! Training losses are single-sample relaxed estimates; evaluation losses use
//! determinized latents. Loss components are reported unweighted in
//! `ElboBreakdown`, with `total` carrying the weighted sum actually optimized.

pub mod checkpoint;
pub mod train;

use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::{self, LatentConfig, PROB_EPS};
use crate::nn::{
    BackToLogit, BatchNorm, BitAffine, BnAccum, BoundParams, ConvDecoder, ConvEncoder, Init,
    Linear, MlpHead, Mode, ParamId, ParamStore,
};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input image shape as (channels, height, width).
    pub image_shape: (usize, usize, usize),
    pub conv_channels: usize,
    pub kernel: usize,
    pub action_hidden: usize,
}

impl NetworkConfig {
    pub fn new(image_shape: (usize, usize, usize)) -> NetworkConfig {
        NetworkConfig { image_shape, conv_channels: 32, kernel: 5, action_hidden: 1000 }
    }
}

/// Unweighted loss components plus the weighted optimization objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub total: f64,
    pub rec_x0: f64,
    pub rec_x1_direct: f64,
    pub rec_x1_applied: f64,
    pub rec_x0_regressed: f64,
    pub kl_prior: f64,
    pub kl_action: f64,
    pub kl_regaction: f64,
    pub kl_effect: f64,
    pub kl_precondition: f64,
}

impl ElboBreakdown {
    pub const TERMS: [&'static str; 10] = [
        "total",
        "rec_x0",
        "rec_x1_direct",
        "rec_x1_applied",
        "rec_x0_regressed",
        "kl_prior",
        "kl_action",
        "kl_regaction",
        "kl_effect",
        "kl_precondition",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.total,
            self.rec_x0,
            self.rec_x1_direct,
            self.rec_x1_applied,
            self.rec_x0_regressed,
            self.kl_prior,
            self.kl_action,
            self.kl_regaction,
            self.kl_effect,
            self.kl_precondition,
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    pub fn scaled_add(&mut self, other: &ElboBreakdown, weight: f64) {
        let mine = [
            &mut self.total,
            &mut self.rec_x0,
            &mut self.rec_x1_direct,
            &mut self.rec_x1_applied,
            &mut self.rec_x0_regressed,
            &mut self.kl_prior,
            &mut self.kl_action,
            &mut self.kl_regaction,
            &mut self.kl_effect,
            &mut self.kl_precondition,
        ];
        for (slot, v) in mine.into_iter().zip(other.values()) {
            *slot += weight * v;
        }
    }
}

/// Batch-norm bookkeeping needed to finalize statistics without holding
/// layer borrows: name, channel count, and the running-stat parameter ids.
#[derive(Clone)]
pub struct BnInfo {
    pub name: String,
    pub channels: usize,
    pub rmean: ParamId,
    pub rvar: ParamId,
}

fn bn_info_of(layers: &[&BatchNorm]) -> Vec<BnInfo> {
    layers
        .iter()
        .map(|bn| BnInfo {
            name: bn.name.clone(),
            channels: bn.channels,
            rmean: bn.rmean,
            rvar: bn.rvar,
        })
        .collect()
}

pub(crate) fn determinize_rows(logits: &Array2<f64>) -> Array2<f64> {
    logits.mapv(discrete::determinize_bc)
}

pub(crate) fn one_hot_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let row: Vec<f64> = row.to_vec();
        out[[i, discrete::determinize_gs(&row)]] = 1.0;
    }
    out
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| discrete::determinize_gs(&row.to_vec()))
        .collect()
}

/// Relaxed Bernoulli sample of every logit in training mode; hard threshold
/// at zero otherwise. The hard path enters the tape as a constant.
fn sample_bits(t: &mut Tape, logits: Var, tau: f64, mode: &mut Mode) -> Var {
    match mode {
        Mode::Train { rng } => {
            let shape = t.value(logits).raw_dim();
            let noise = ArrayD::from_shape_fn(shape, |_| discrete::logistic_noise(*rng));
            let n = t.leaf(noise);
            let s = t.add(logits, n);
            let s = t.mul_scalar(s, 1.0 / tau);
            t.sigmoid(s)
        }
        _ => {
            let hard = t.value(logits).mapv(discrete::determinize_bc);
            t.leaf(hard)
        }
    }
}

/// Relaxed one-hot sample over action logits in training mode; exact argmax
/// one-hot otherwise.
fn sample_action(t: &mut Tape, logits: Var, tau: f64, mode: &mut Mode) -> Var {
    match mode {
        Mode::Train { rng } => {
            let shape = t.value(logits).raw_dim();
            let noise = ArrayD::from_shape_fn(shape, |_| discrete::gumbel_noise(*rng));
            let n = t.leaf(noise);
            let s = t.add(logits, n);
            let s = t.mul_scalar(s, 1.0 / tau);
            t.softmax_rows(s)
        }
        _ => {
            let v = t.value(logits).clone().into_dimensionality().unwrap();
            let hard = one_hot_rows(&v);
            t.leaf(hard.into_dyn())
        }
    }
}

/// Mean over the batch of the squared-error Gaussian likelihood term,
/// summed over pixels. The additive log-normalization constant is left out.
fn rec_gaussian(t: &mut Tape, x: Var, xhat: Var, sigma: f64) -> Var {
    let b = t.value(x).shape()[0] as f64;
    let d = t.sub(x, xhat);
    let sq = t.mul(d, d);
    let s = t.sum_all(sq);
    t.mul_scalar(s, 1.0 / (2.0 * sigma * sigma * b))
}

fn clamp_prob(t: &mut Tape, p: Var) -> Var {
    t.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean over the batch of sum_f KL(Bernoulli(sigmoid(l_f)) || Bernoulli(eps)).
fn kl_bern_eps(t: &mut Tape, logits: Var, eps: f64) -> Var {
    let b = t.value(logits).shape()[0] as f64;
    let q = t.sigmoid(logits);
    let q = clamp_prob(t, q);
    let ln_q = t.ln(q);
    let one_minus_q = {
        let nq = t.mul_scalar(q, -1.0);
        t.add_scalar(nq, 1.0)
    };
    let ln_1q = t.ln(one_minus_q);
    let t1 = {
        let shifted = t.add_scalar(ln_q, -eps.ln());
        t.mul(q, shifted)
    };
    let t2 = {
        let shifted = t.add_scalar(ln_1q, -(1.0 - eps).ln());
        t.mul(one_minus_q, shifted)
    };
    let s = t.add(t1, t2);
    let s = t.sum_all(s);
    t.mul_scalar(s, 1.0 / b)
}

/// Mean over the batch of sum_f KL between Bernoullis given by two logit sets.
fn kl_bern_pair(t: &mut Tape, q_logits: Var, p_logits: Var) -> Var {
    let b = t.value(q_logits).shape()[0] as f64;
    let q = t.sigmoid(q_logits);
    let q = clamp_prob(t, q);
    let p = t.sigmoid(p_logits);
    let p = clamp_prob(t, p);
    let ln_q = t.ln(q);
    let ln_p = t.ln(p);
    let one_minus_q = {
        let nq = t.mul_scalar(q, -1.0);
        t.add_scalar(nq, 1.0)
    };
    let one_minus_p = {
        let np = t.mul_scalar(p, -1.0);
        t.add_scalar(np, 1.0)
    };
    let ln_1q = t.ln(one_minus_q);
    let ln_1p = t.ln(one_minus_p);
    let d1 = t.sub(ln_q, ln_p);
    let t1 = t.mul(q, d1);
    let d2 = t.sub(ln_1q, ln_1p);
    let t2 = t.mul(one_minus_q, d2);
    let s = t.add(t1, t2);
    let s = t.sum_all(s);
    t.mul_scalar(s, 1.0 / b)
}

/// Mean over the batch of KL(softmax(q_logits) || softmax(p_logits)).
/// Probabilities are taken at temperature one, as if annealing had finished.
fn kl_cat_pair(t: &mut Tape, q_logits: Var, p_logits: Var) -> Var {
    let b = t.value(q_logits).shape()[0] as f64;
    let q = t.softmax_rows(q_logits);
    let q = clamp_prob(t, q);
    let p = t.softmax_rows(p_logits);
    let p = clamp_prob(t, p);
    let ln_q = t.ln(q);
    let ln_p = t.ln(p);
    let d = t.sub(ln_q, ln_p);
    let term = t.mul(q, d);
    let s = t.sum_all(term);
    t.mul_scalar(s, 1.0 / b)
}

/// Mean over the batch of the binary cross-entropy between target bits and
/// predicted bit logits, summed over bits.
fn bce_logits(t: &mut Tape, pred_logits: Var, target: Var) -> Var {
    let b = t.value(target).shape()[0] as f64;
    let p = t.sigmoid(pred_logits);
    let p = clamp_prob(t, p);
    let ln_p = t.ln(p);
    let one_minus_p = {
        let np = t.mul_scalar(p, -1.0);
        t.add_scalar(np, 1.0)
    };
    let ln_1p = t.ln(one_minus_p);
    let one_minus_t = {
        let nt = t.mul_scalar(target, -1.0);
        t.add_scalar(nt, 1.0)
    };
    let t1 = t.mul(target, ln_p);
    let t2 = t.mul(one_minus_t, ln_1p);
    let s = t.add(t1, t2);
    let s = t.sum_all(s);
    t.mul_scalar(s, -1.0 / b)
}

/// State autoencoder: images to bit logits and back.
pub struct Sae {
    pub store: ParamStore,
    pub enc: ConvEncoder,
    pub dec: ConvDecoder,
    pub net: NetworkConfig,
    pub lat: LatentConfig,
}

impl Sae {
    pub fn new(net: NetworkConfig, lat: LatentConfig, rng: &mut ChaCha8Rng) -> Sae {
        let mut store = ParamStore::new();
        let enc = ConvEncoder::new(
            &mut store,
            "enc",
            net.image_shape,
            net.conv_channels,
            net.kernel,
            lat.f_bits,
            rng,
        );
        let dec = ConvDecoder::new(
            &mut store,
            "dec",
            lat.f_bits,
            net.image_shape,
            net.conv_channels,
            net.kernel,
            rng,
        );
        Sae { store, enc, dec, net, lat }
    }

    /// Loss over a batch of single images. `bound` must be a binding of this
    /// model's store on the same tape.
    fn loss(
        &mut self,
        t: &mut Tape,
        bound: &BoundParams,
        x: Var,
        tau: f64,
        betas: (f64, f64, f64),
        mode: &mut Mode,
    ) -> (Var, ElboBreakdown) {
        let logits = self.enc.forward(t, &mut self.store, bound, x, mode);
        let z = sample_bits(t, logits, tau, mode);
        let xhat = self.dec.forward(t, &mut self.store, bound, z, mode);
        let rec = rec_gaussian(t, x, xhat, self.lat.sigma_rec);
        let kl = kl_bern_eps(t, logits, self.lat.epsilon);
        let weighted_kl = t.mul_scalar(kl, betas.0);
        let total = t.add(rec, weighted_kl);
        let bd = ElboBreakdown {
            total: t.scalar(total),
            rec_x0: t.scalar(rec),
            kl_prior: t.scalar(kl),
            ..ElboBreakdown::default()
        };
        (total, bd)
    }

    pub fn bn_info(&self) -> Vec<BnInfo> {
        let mut layers = self.enc.bn_layers();
        layers.extend(self.dec.bn_layers());
        bn_info_of(&layers)
    }

    fn capture_pass(&mut self, target: &str, acc: &mut BnAccum, x: &Array4<f64>) {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let xv = t.leaf(x.clone().into_dyn());
        let mut mode = Mode::Capture { target, acc };
        self.loss(&mut t, &bound, xv, 1.0, self.betas(), &mut mode);
    }

    fn betas(&self) -> (f64, f64, f64) {
        (self.lat.beta1, self.lat.beta2, self.lat.beta3)
    }

    /// Deterministic bit logits for a batch of images.
    pub fn encode_logits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let xv = t.leaf(x.clone().into_dyn());
        let mut mode = Mode::Eval;
        let logits = self.enc.forward(&mut t, &mut self.store, &bound, xv, &mut mode);
        t.value(logits).clone().into_dimensionality().unwrap()
    }

    pub fn encode_bits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        determinize_rows(&self.encode_logits(x))
    }

    pub fn decode_bits(&mut self, z: &Array2<f64>) -> Array4<f64> {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let zv = t.leaf(z.clone().into_dyn());
        let mut mode = Mode::Eval;
        let y = self.dec.forward(&mut t, &mut self.store, &bound, zv, &mut mode);
        t.value(y).clone().into_dimensionality().unwrap()
    }
}

/// Action classifier and successor predictor trained on the latent codes of
/// a frozen state autoencoder. It never touches pixels during training: the
/// transition loss is a cross-entropy between predicted and encoded
/// successor bits plus a uniform-prior regularizer on the action choice.
pub struct Ama2 {
    pub sae: Sae,
    pub store: ParamStore,
    pub action: MlpHead,
    pub succ: MlpHead,
    pub lat: LatentConfig,
}

impl Ama2 {
    pub fn new(sae: Sae, rng: &mut ChaCha8Rng) -> Ama2 {
        let lat = sae.lat;
        let mut store = ParamStore::new();
        let hidden = sae.net.action_hidden;
        let action = MlpHead::new(&mut store, "action", 2 * lat.f_bits, hidden, lat.actions, true, rng);
        let succ = MlpHead::new(&mut store, "succ", lat.f_bits + lat.actions, hidden, lat.f_bits, false, rng);
        Ama2 { sae, store, action, succ, lat }
    }

    /// Loss in latent space; `l0`/`l1` are frozen-encoder logits and
    /// `z0`/`z1` the corresponding determinized bits.
    fn loss(
        &mut self,
        t: &mut Tape,
        bound: &BoundParams,
        l0: &Array2<f64>,
        l1: &Array2<f64>,
        tau: f64,
        betas: (f64, f64, f64),
        mode: &mut Mode,
    ) -> (Var, ElboBreakdown) {
        let z0 = t.leaf(determinize_rows(l0).into_dyn());
        let z1 = t.leaf(determinize_rows(l1).into_dyn());
        let l0v = t.leaf(l0.clone().into_dyn());
        let l1v = t.leaf(l1.clone().into_dyn());
        let pair = t.concat_cols(l0v, l1v);
        let a_logits = self.action.forward(t, &mut self.store, bound, pair, mode);
        let a = sample_action(t, a_logits, tau, mode);
        let succ_in = t.concat_cols(z0, a);
        let pred = self.succ.forward(t, &mut self.store, bound, succ_in, mode);
        let rec = bce_logits(t, pred, z1);
        let uniform = t.leaf(Array2::<f64>::zeros((l0.nrows(), self.lat.actions)).into_dyn());
        let kl = kl_cat_pair(t, a_logits, uniform);
        let weighted = t.mul_scalar(kl, betas.1);
        let total = t.add(rec, weighted);
        let bd = ElboBreakdown {
            total: t.scalar(total),
            rec_x1_direct: t.scalar(rec),
            kl_action: t.scalar(kl),
            ..ElboBreakdown::default()
        };
        (total, bd)
    }

    fn encode_pair(&mut self, x0: &Array4<f64>, x1: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        (self.sae.encode_logits(x0), self.sae.encode_logits(x1))
    }

    pub fn bn_info(&self) -> Vec<BnInfo> {
        let mut layers = self.action.bn_layers();
        layers.extend(self.succ.bn_layers());
        bn_info_of(&layers)
    }

    /// Most likely action label per transition.
    pub fn action_labels(&mut self, x0: &Array4<f64>, x1: &Array4<f64>) -> Vec<usize> {
        let (l0, l1) = self.encode_pair(x0, x1);
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let l0v = t.leaf(l0.into_dyn());
        let l1v = t.leaf(l1.into_dyn());
        let pair = t.concat_cols(l0v, l1v);
        let mut mode = Mode::Eval;
        let a_logits = self.action.forward(&mut t, &mut self.store, &bound, pair, &mut mode);
        argmax_rows(&t.value(a_logits).clone().into_dimensionality().unwrap())
    }

    /// Determinized successor bits predicted for given state bits and labels.
    pub fn apply_bits(&mut self, z0: &Array2<f64>, actions: &[usize]) -> Array2<f64> {
        let b = z0.nrows();
        assert_eq!(actions.len(), b);
        let mut a = Array2::zeros((b, self.lat.actions));
        for (i, &lab) in actions.iter().enumerate() {
            a[[i, lab]] = 1.0;
        }
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let zv = t.leaf(z0.clone().into_dyn());
        let av = t.leaf(a.into_dyn());
        let joint = t.concat_cols(zv, av);
        let mut mode = Mode::Eval;
        let pred = self.succ.forward(&mut t, &mut self.store, &bound, joint, &mut mode);
        determinize_rows(&t.value(pred).clone().into_dimensionality().unwrap())
    }
}

/// Joint transition model. The successor bits are predicted by a logit-space
/// module conditioned on the chosen action; when `bidirectional` is set a
/// mirrored branch predicts predecessor bits and both directions share the
/// encoder, decoder, and action classifier.
pub struct CubeSpace {
    pub store: ParamStore,
    pub enc: ConvEncoder,
    pub dec: ConvDecoder,
    pub action: MlpHead,
    pub applicable: Linear,
    pub apply_btl: BackToLogit,
    pub regressable: Option<Linear>,
    pub regress_btl: Option<BackToLogit>,
    pub net: NetworkConfig,
    pub lat: LatentConfig,
}

impl CubeSpace {
    pub fn new(
        net: NetworkConfig,
        lat: LatentConfig,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> CubeSpace {
        let mut store = ParamStore::new();
        let enc = ConvEncoder::new(
            &mut store,
            "enc",
            net.image_shape,
            net.conv_channels,
            net.kernel,
            lat.f_bits,
            rng,
        );
        let dec = ConvDecoder::new(
            &mut store,
            "dec",
            lat.f_bits,
            net.image_shape,
            net.conv_channels,
            net.kernel,
            rng,
        );
        let action = MlpHead::new(
            &mut store,
            "action",
            2 * lat.f_bits,
            net.action_hidden,
            lat.actions,
            true,
            rng,
        );
        let applicable =
            Linear::new(&mut store, "applicable", lat.f_bits, lat.actions, true, Init::Xavier, rng);
        let apply_btl = BackToLogit::new(&mut store, "apply", lat.actions, lat.f_bits, rng);
        let (regressable, regress_btl) = if bidirectional {
            let r = Linear::new(&mut store, "regressable", lat.f_bits, lat.actions, true, Init::Xavier, rng);
            let b = BackToLogit::new(&mut store, "regress", lat.actions, lat.f_bits, rng);
            (Some(r), Some(b))
        } else {
            (None, None)
        };
        CubeSpace {
            store,
            enc,
            dec,
            action,
            applicable,
            apply_btl,
            regressable,
            regress_btl,
            net,
            lat,
        }
    }

    pub fn bidirectional(&self) -> bool {
        self.regress_btl.is_some()
    }

    fn betas(&self) -> (f64, f64, f64) {
        (self.lat.beta1, self.lat.beta2, self.lat.beta3)
    }

    /// Loss over a batch of image pairs. `bound` must be a binding of this
    /// model's store on the same tape.
    fn loss(
        &mut self,
        t: &mut Tape,
        bound: &BoundParams,
        x0: Var,
        x1: Var,
        tau: f64,
        betas: (f64, f64, f64),
        mode: &mut Mode,
    ) -> (Var, ElboBreakdown) {
        let (b1, b2, b3) = betas;
        let l0 = self.enc.forward(t, &mut self.store, bound, x0, mode);
        let l1 = self.enc.forward(t, &mut self.store, bound, x1, mode);
        let z0 = sample_bits(t, l0, tau, mode);
        let z1 = sample_bits(t, l1, tau, mode);
        let pair = t.concat_cols(l0, l1);
        let a_logits = self.action.forward(t, &mut self.store, bound, pair, mode);
        let a = sample_action(t, a_logits, tau, mode);

        // Forward transition: successor logits, sampled successor bits.
        let l2 = self.apply_btl.forward(t, &mut self.store, &bound, z0, a, mode);
        let z2 = sample_bits(t, l2, tau, mode);

        let xhat0 = self.dec.forward(t, &mut self.store, &bound, z0, mode);
        let xhat1_direct = self.dec.forward(t, &mut self.store, &bound, z1, mode);
        let xhat1_applied = self.dec.forward(t, &mut self.store, &bound, z2, mode);
        let rec_x0 = rec_gaussian(t, x0, xhat0, self.lat.sigma_rec);
        let rec_x1_direct = rec_gaussian(t, x1, xhat1_direct, self.lat.sigma_rec);
        let rec_x1_applied = rec_gaussian(t, x1, xhat1_applied, self.lat.sigma_rec);

        let kl0 = kl_bern_eps(t, l0, self.lat.epsilon);

        // Action prior conditioned on the current state. The latent input is
        // detached so the prior does not drag the encoder; the head itself
        // still learns from the divergence.
        let z0_sg = t.stop_grad(z0);
        let app_logits = self.applicable.forward(t, &bound, z0_sg);
        let kl_action = kl_cat_pair(t, a_logits, app_logits);

        // Successor prior from a second pass of the transition module with
        // detached inputs: the posterior over z1 is pulled toward it while the
        // module parameters train through this branch as well.
        let a_sg = t.stop_grad(a);
        let l2_prior = self.apply_btl.forward(t, &mut self.store, &bound, z0_sg, a_sg, mode);
        let kl_effect = kl_bern_pair(t, l1, l2_prior);

        if !self.bidirectional() {
            let half_rec = t.add(rec_x1_direct, rec_x1_applied);
            let half_rec = t.mul_scalar(half_rec, 0.5);
            let rec = t.add(rec_x0, half_rec);
            let w_kl0 = t.mul_scalar(kl0, b1);
            let w_ka = t.mul_scalar(kl_action, b2);
            let w_ke = t.mul_scalar(kl_effect, 0.5 * b3);
            let kl_a = t.add(w_kl0, w_ka);
            let kl_all = t.add(kl_a, w_ke);
            let total = t.add(rec, kl_all);
            let bd = ElboBreakdown {
                total: t.scalar(total),
                rec_x0: t.scalar(rec_x0),
                rec_x1_direct: t.scalar(rec_x1_direct),
                rec_x1_applied: t.scalar(rec_x1_applied),
                kl_prior: t.scalar(kl0),
                kl_action: t.scalar(kl_action),
                kl_effect: t.scalar(kl_effect),
                ..ElboBreakdown::default()
            };
            return (total, bd);
        }

        // Backward transition branch, mirroring the forward one.
        let regress_btl = self.regress_btl.as_ref().unwrap();
        let regressable = self.regressable.as_ref().unwrap();
        let l3 = regress_btl.forward(t, &mut self.store, &bound, z1, a, mode);
        let z3 = sample_bits(t, l3, tau, mode);
        let xhat0_regressed = self.dec.forward(t, &mut self.store, &bound, z3, mode);
        let rec_x0_regressed = rec_gaussian(t, x0, xhat0_regressed, self.lat.sigma_rec);

        let kl1 = kl_bern_eps(t, l1, self.lat.epsilon);
        let z1_sg = t.stop_grad(z1);
        let reg_logits = regressable.forward(t, &bound, z1_sg);
        let kl_regaction = kl_cat_pair(t, a_logits, reg_logits);
        let l3_prior = regress_btl.forward(t, &mut self.store, &bound, z1_sg, a_sg, mode);
        let kl_precondition = kl_bern_pair(t, l0, l3_prior);

        // Average of the two directional objectives.
        let r0 = t.mul_scalar(rec_x0, 0.75);
        let r1 = t.mul_scalar(rec_x1_direct, 0.75);
        let r2 = t.mul_scalar(rec_x1_applied, 0.25);
        let r3 = t.mul_scalar(rec_x0_regressed, 0.25);
        let kl_prior_sum = t.add(kl0, kl1);
        let kp = t.mul_scalar(kl_prior_sum, 0.5 * b1);
        let ka_sum = t.add(kl_action, kl_regaction);
        let ka = t.mul_scalar(ka_sum, 0.5 * b2);
        let ke_sum = t.add(kl_effect, kl_precondition);
        let ke = t.mul_scalar(ke_sum, 0.25 * b3);
        let s = t.add(r0, r1);
        let s = t.add(s, r2);
        let s = t.add(s, r3);
        let s = t.add(s, kp);
        let s = t.add(s, ka);
        let total = t.add(s, ke);
        let bd = ElboBreakdown {
            total: t.scalar(total),
            rec_x0: t.scalar(rec_x0),
            rec_x1_direct: t.scalar(rec_x1_direct),
            rec_x1_applied: t.scalar(rec_x1_applied),
            rec_x0_regressed: t.scalar(rec_x0_regressed),
            kl_prior: 0.5 * (t.scalar(kl0) + t.scalar(kl1)),
            kl_action: t.scalar(kl_action),
            kl_regaction: t.scalar(kl_regaction),
            kl_effect: t.scalar(kl_effect),
            kl_precondition: t.scalar(kl_precondition),
            ..ElboBreakdown::default()
        };
        (total, bd)
    }

    pub fn bn_info(&self) -> Vec<BnInfo> {
        let mut layers = self.enc.bn_layers();
        layers.extend(self.action.bn_layers());
        layers.extend(self.apply_btl.bn_layers());
        if let Some(r) = &self.regress_btl {
            layers.extend(r.bn_layers());
        }
        layers.extend(self.dec.bn_layers());
        bn_info_of(&layers)
    }

    fn capture_pass(&mut self, target: &str, acc: &mut BnAccum, x0: &Array4<f64>, x1: &Array4<f64>) {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let x0v = t.leaf(x0.clone().into_dyn());
        let x1v = t.leaf(x1.clone().into_dyn());
        let mut mode = Mode::Capture { target, acc };
        self.loss(&mut t, &bound, x0v, x1v, 1.0, self.betas(), &mut mode);
    }

    pub fn encode_logits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let xv = t.leaf(x.clone().into_dyn());
        let mut mode = Mode::Eval;
        let logits = self.enc.forward(&mut t, &mut self.store, &bound, xv, &mut mode);
        t.value(logits).clone().into_dimensionality().unwrap()
    }

    pub fn encode_bits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        determinize_rows(&self.encode_logits(x))
    }

    pub fn decode_bits(&mut self, z: &Array2<f64>) -> Array4<f64> {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let zv = t.leaf(z.clone().into_dyn());
        let mut mode = Mode::Eval;
        let y = self.dec.forward(&mut t, &mut self.store, &bound, zv, &mut mode);
        t.value(y).clone().into_dimensionality().unwrap()
    }

    fn btl_logits(
        &mut self,
        which: BtlSide,
        z: &Array2<f64>,
        actions: &[usize],
    ) -> Array2<f64> {
        let b = z.nrows();
        assert_eq!(actions.len(), b);
        let mut a = Array2::zeros((b, self.lat.actions));
        for (i, &lab) in actions.iter().enumerate() {
            a[[i, lab]] = 1.0;
        }
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let zv = t.leaf(z.clone().into_dyn());
        let av = t.leaf(a.into_dyn());
        let mut mode = Mode::Eval;
        let logits = match which {
            BtlSide::Apply => {
                self.apply_btl.forward(&mut t, &mut self.store, &bound, zv, av, &mut mode)
            }
            BtlSide::Regress => {
                let btl = self.regress_btl.as_ref().expect("regression branch not present");
                btl.forward(&mut t, &mut self.store, &bound, zv, av, &mut mode)
            }
        };
        t.value(logits).clone().into_dimensionality().unwrap()
    }

    /// Successor bit logits for state bits under the given action labels.
    pub fn apply_logits(&mut self, z: &Array2<f64>, actions: &[usize]) -> Array2<f64> {
        self.btl_logits(BtlSide::Apply, z, actions)
    }

    pub fn apply_bits(&mut self, z: &Array2<f64>, actions: &[usize]) -> Array2<f64> {
        determinize_rows(&self.apply_logits(z, actions))
    }

    /// Predecessor bit logits; only available on bidirectional models.
    pub fn regress_logits(&mut self, z: &Array2<f64>, actions: &[usize]) -> Array2<f64> {
        self.btl_logits(BtlSide::Regress, z, actions)
    }

    pub fn regress_bits(&mut self, z: &Array2<f64>, actions: &[usize]) -> Array2<f64> {
        determinize_rows(&self.regress_logits(z, actions))
    }

    /// Most likely action label for each encoded transition.
    pub fn action_labels(&mut self, x0: &Array4<f64>, x1: &Array4<f64>) -> Vec<usize> {
        let l0 = self.encode_logits(x0);
        let l1 = self.encode_logits(x1);
        self.action_labels_from_logits(&l0, &l1)
    }

    pub fn action_labels_from_logits(&mut self, l0: &Array2<f64>, l1: &Array2<f64>) -> Vec<usize> {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let l0v = t.leaf(l0.clone().into_dyn());
        let l1v = t.leaf(l1.clone().into_dyn());
        let pair = t.concat_cols(l0v, l1v);
        let mut mode = Mode::Eval;
        let a_logits = self.action.forward(&mut t, &mut self.store, &bound, pair, &mut mode);
        argmax_rows(&t.value(a_logits).clone().into_dimensionality().unwrap())
    }

    /// Per-bit affine logit response of the forward transition for one action.
    pub fn apply_affines(&self, action: usize) -> Vec<BitAffine> {
        let one_hot = discrete::one_hot(action, self.lat.actions);
        self.apply_btl.per_bit_affine(&self.store, &one_hot)
    }

    pub fn regress_affines(&self, action: usize) -> Vec<BitAffine> {
        let one_hot = discrete::one_hot(action, self.lat.actions);
        self.regress_btl
            .as_ref()
            .expect("regression branch not present")
            .per_bit_affine(&self.store, &one_hot)
    }
}

#[derive(Clone, Copy)]
enum BtlSide {
    Apply,
    Regress,
}

/// A trained model of any kind, as stored in a checkpoint.
pub enum TrainedModel {
    Sae(Sae),
    Ama2(Ama2),
    CubeSpace(CubeSpace),
}

impl TrainedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainedModel::Sae(_) => "sae",
            TrainedModel::Ama2(_) => "ama2",
            TrainedModel::CubeSpace(m) => {
                if m.bidirectional() {
                    "bicsae"
                } else {
                    "csae"
                }
            }
        }
    }

    pub fn lat(&self) -> &LatentConfig {
        match self {
            TrainedModel::Sae(m) => &m.lat,
            TrainedModel::Ama2(m) => &m.lat,
            TrainedModel::CubeSpace(m) => &m.lat,
        }
    }

    pub fn net(&self) -> &NetworkConfig {
        match self {
            TrainedModel::Sae(m) => &m.net,
            TrainedModel::Ama2(m) => &m.sae.net,
            TrainedModel::CubeSpace(m) => &m.net,
        }
    }

    pub fn as_cube_space(&mut self) -> Option<&mut CubeSpace> {
        match self {
            TrainedModel::CubeSpace(m) => Some(m),
            _ => None,
        }
    }

    pub fn encode_bits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        match self {
            TrainedModel::Sae(m) => m.encode_bits(x),
            TrainedModel::Ama2(m) => m.sae.encode_bits(x),
            TrainedModel::CubeSpace(m) => m.encode_bits(x),
        }
    }

    pub fn decode_bits(&mut self, z: &Array2<f64>) -> Array4<f64> {
        match self {
            TrainedModel::Sae(m) => m.decode_bits(z),
            TrainedModel::Ama2(m) => m.sae.decode_bits(z),
            TrainedModel::CubeSpace(m) => m.decode_bits(z),
        }
    }

    pub fn encode_logits(&mut self, x: &Array4<f64>) -> Array2<f64> {
        match self {
            TrainedModel::Sae(m) => m.encode_logits(x),
            TrainedModel::Ama2(m) => m.sae.encode_logits(x),
            TrainedModel::CubeSpace(m) => m.encode_logits(x),
        }
    }

    /// Evaluation-mode loss with determinized latents at the given weights.
    pub fn eval_batch(
        &mut self,
        x0: &Array4<f64>,
        x1: &Array4<f64>,
        betas: (f64, f64, f64),
    ) -> ElboBreakdown {
        use train::TransitionModel;
        match self {
            TrainedModel::Sae(m) => m.eval_batch(x0, x1, betas),
            TrainedModel::Ama2(m) => m.eval_batch(x0, x1, betas),
            TrainedModel::CubeSpace(m) => m.eval_batch(x0, x1, betas),
        }
    }

    pub fn betas(&self) -> (f64, f64, f64) {
        let lat = self.lat();
        (lat.beta1, lat.beta2, lat.beta3)
    }
}
