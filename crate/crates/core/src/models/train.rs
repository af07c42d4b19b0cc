//! Optimizer and training loop shared by all models.
//!
//! One optimization step builds a fresh tape, runs the model's loss in
//! training mode, backpropagates, clips the global gradient norm, and applies
//! an Adam update. The loop shuffles the training split each epoch, logs one
//! TSV row per epoch, and aborts with the name of the offending loss term as
//! soon as anything goes non-finite. After the last epoch the batch-norm
//! running statistics are replaced by exact training-set statistics.

use std::io::Write;

use ndarray::{concatenate, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::AnnealSchedule;
use crate::nn::{BnAccum, BoundParams, Mode, ParamStore};
use crate::tape::Tape;

use super::{Ama2, CubeSpace, ElboBreakdown, Sae, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Maximum global gradient norm; updates are scaled down beyond it.
    pub grad_clip: f64,
    pub seed: u64,
    pub anneal: AnnealSchedule,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 2000,
            batch: 400,
            lr: 1e-3,
            grad_clip: 0.1,
            seed: 0,
            anneal: AnnealSchedule::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss term {term} became non-finite at epoch {epoch}, batch {batch}")]
    NonFinite { term: String, epoch: usize, batch: usize },
    #[error("training log could not be written: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset: need at least 3 transitions for the train/val/test split")]
    TooFewTransitions,
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Adam {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// Clip the global norm, then update every trainable parameter in place.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut [Option<ArrayD<f64>>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, id) in store.ids().enumerate() {
            let g = match &grads[idx] {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[idx];
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            let v = &mut self.v[idx];
            *v *= self.beta2;
            *v += &(&(g * g) * (1.0 - self.beta2));
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&self.m[idx]).and(&self.v[idx]).for_each(|p, &m, &v| {
                let mhat = m / c1;
                let vhat = v / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Scale gradients so their global Euclidean norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<ArrayD<f64>>], clip: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Gradients of every trainable parameter after a backward pass, indexed in
/// store order; non-trainable slots are `None`.
pub fn collect_gradients(store: &ParamStore, tape: &Tape, bound: &BoundParams) -> Vec<Option<ArrayD<f64>>> {
    store
        .ids()
        .map(|id| store.is_trainable(id).then(|| tape.grad(bound.var(id))))
        .collect()
}

/// Anything the shared loop can train on image-pair transitions.
pub trait TransitionModel {
    fn kind(&self) -> &'static str;
    /// Store holding the parameters that the optimizer updates.
    fn opt_store(&self) -> &ParamStore;
    fn train_step(
        &mut self,
        x0: &Array4<f64>,
        x1: &Array4<f64>,
        tau: f64,
        rng: &mut ChaCha8Rng,
        opt: &mut Adam,
        clip: f64,
    ) -> ElboBreakdown;
    /// Evaluation-mode loss with determinized latents at the given weights.
    fn eval_batch(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, betas: (f64, f64, f64)) -> ElboBreakdown;
    /// Replace running batch-norm statistics with exact statistics of the
    /// given set, front to back.
    fn finalize_batchnorm(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, batch: usize);
    fn betas(&self) -> (f64, f64, f64);
}

fn stack_singles(x0: &Array4<f64>, x1: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(0), &[x0.view(), x1.view()]).unwrap()
}

impl TransitionModel for Sae {
    fn kind(&self) -> &'static str {
        "sae"
    }

    fn opt_store(&self) -> &ParamStore {
        &self.store
    }

    fn train_step(
        &mut self,
        x0: &Array4<f64>,
        x1: &Array4<f64>,
        tau: f64,
        rng: &mut ChaCha8Rng,
        opt: &mut Adam,
        clip: f64,
    ) -> ElboBreakdown {
        let x = stack_singles(x0, x1);
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let xv = t.leaf(x.into_dyn());
        let betas = self.betas();
        let mut mode = Mode::Train { rng };
        let (total, bd) = self.loss(&mut t, &bound, xv, tau, betas, &mut mode);
        if bd.non_finite_term().is_some() {
            return bd;
        }
        t.backward(total);
        let mut grads = collect_gradients(&self.store, &t, &bound);
        clip_gradients(&mut grads, clip);
        opt.apply(&mut self.store, &mut grads);
        bd
    }

    fn eval_batch(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, betas: (f64, f64, f64)) -> ElboBreakdown {
        let x = stack_singles(x0, x1);
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let xv = t.leaf(x.into_dyn());
        let mut mode = Mode::Eval;
        let (_, bd) = self.loss(&mut t, &bound, xv, 1.0, betas, &mut mode);
        bd
    }

    fn finalize_batchnorm(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, batch: usize) {
        let x = stack_singles(x0, x1);
        let n = x.len_of(Axis(0));
        let infos = self.bn_info();
        for info in infos {
            let mut acc = BnAccum::new(info.channels);
            for start in (0..n).step_by(batch.max(1)) {
                let end = (start + batch).min(n);
                let slice = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                self.capture_pass(&info.name, &mut acc, &slice);
            }
            *self.store.value_mut(info.rmean) = acc.mean().into_dyn();
            *self.store.value_mut(info.rvar) = acc.var().into_dyn();
        }
    }

    fn betas(&self) -> (f64, f64, f64) {
        (self.lat.beta1, self.lat.beta2, self.lat.beta3)
    }
}

impl TransitionModel for CubeSpace {
    fn kind(&self) -> &'static str {
        if self.bidirectional() {
            "bicsae"
        } else {
            "csae"
        }
    }

    fn opt_store(&self) -> &ParamStore {
        &self.store
    }

    fn train_step(
        &mut self,
        x0: &Array4<f64>,
        x1: &Array4<f64>,
        tau: f64,
        rng: &mut ChaCha8Rng,
        opt: &mut Adam,
        clip: f64,
    ) -> ElboBreakdown {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let x0v = t.leaf(x0.clone().into_dyn());
        let x1v = t.leaf(x1.clone().into_dyn());
        let betas = self.betas();
        let mut mode = Mode::Train { rng };
        let (total, bd) = self.loss(&mut t, &bound, x0v, x1v, tau, betas, &mut mode);
        if bd.non_finite_term().is_some() {
            return bd;
        }
        t.backward(total);
        let mut grads = collect_gradients(&self.store, &t, &bound);
        clip_gradients(&mut grads, clip);
        opt.apply(&mut self.store, &mut grads);
        bd
    }

    fn eval_batch(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, betas: (f64, f64, f64)) -> ElboBreakdown {
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let x0v = t.leaf(x0.clone().into_dyn());
        let x1v = t.leaf(x1.clone().into_dyn());
        let mut mode = Mode::Eval;
        let (_, bd) = self.loss(&mut t, &bound, x0v, x1v, 1.0, betas, &mut mode);
        bd
    }

    fn finalize_batchnorm(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, batch: usize) {
        let n = x0.len_of(Axis(0));
        let infos = self.bn_info();
        for info in infos {
            let mut acc = BnAccum::new(info.channels);
            for start in (0..n).step_by(batch.max(1)) {
                let end = (start + batch).min(n);
                let s0 = x0.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                let s1 = x1.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                self.capture_pass(&info.name, &mut acc, &s0, &s1);
            }
            *self.store.value_mut(info.rmean) = acc.mean().into_dyn();
            *self.store.value_mut(info.rvar) = acc.var().into_dyn();
        }
    }

    fn betas(&self) -> (f64, f64, f64) {
        (self.lat.beta1, self.lat.beta2, self.lat.beta3)
    }
}

impl TransitionModel for Ama2 {
    fn kind(&self) -> &'static str {
        "ama2"
    }

    fn opt_store(&self) -> &ParamStore {
        &self.store
    }

    fn train_step(
        &mut self,
        x0: &Array4<f64>,
        x1: &Array4<f64>,
        tau: f64,
        rng: &mut ChaCha8Rng,
        opt: &mut Adam,
        clip: f64,
    ) -> ElboBreakdown {
        let (l0, l1) = self.encode_pair(x0, x1);
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let betas = self.betas();
        let mut mode = Mode::Train { rng };
        let (total, bd) = self.loss(&mut t, &bound, &l0, &l1, tau, betas, &mut mode);
        if bd.non_finite_term().is_some() {
            return bd;
        }
        t.backward(total);
        let mut grads = collect_gradients(&self.store, &t, &bound);
        clip_gradients(&mut grads, clip);
        opt.apply(&mut self.store, &mut grads);
        bd
    }

    fn eval_batch(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, betas: (f64, f64, f64)) -> ElboBreakdown {
        let (l0, l1) = self.encode_pair(x0, x1);
        let mut t = Tape::new();
        let bound = self.store.bind(&mut t);
        let mut mode = Mode::Eval;
        let (_, bd) = self.loss(&mut t, &bound, &l0, &l1, 1.0, betas, &mut mode);
        bd
    }

    fn finalize_batchnorm(&mut self, x0: &Array4<f64>, x1: &Array4<f64>, batch: usize) {
        let n = x0.len_of(Axis(0));
        let infos = self.bn_info();
        for info in infos {
            let mut acc = BnAccum::new(info.channels);
            for start in (0..n).step_by(batch.max(1)) {
                let end = (start + batch).min(n);
                let s0 = x0.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                let s1 = x1.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                let (l0, l1) = self.encode_pair(&s0, &s1);
                let mut t = Tape::new();
                let bound = self.store.bind(&mut t);
                let betas = self.betas();
                let mut mode = Mode::Capture { target: &info.name, acc: &mut acc };
                self.loss(&mut t, &bound, &l0, &l1, 1.0, betas, &mut mode);
            }
            *self.store.value_mut(info.rmean) = acc.mean().into_dyn();
            *self.store.value_mut(info.rvar) = acc.var().into_dyn();
        }
    }

    fn betas(&self) -> (f64, f64, f64) {
        (self.lat.beta1, self.lat.beta2, self.lat.beta3)
    }
}

pub struct TrainReport {
    pub epochs: usize,
    pub final_train: ElboBreakdown,
    pub final_val: ElboBreakdown,
    pub test: ElboBreakdown,
}

pub const LOG_HEADER: &str = "epoch\ttau\ttotal\trec_x0\trec_x1_direct\trec_x1_applied\trec_x0_regressed\tkl_prior\tkl_action\tkl_regaction\tkl_effect\tkl_precondition\tval_total";

fn select(x: &Array4<f64>, idx: &[usize]) -> Array4<f64> {
    x.select(Axis(0), idx)
}

/// Deterministic 90/5/5 index split; the data is assumed pre-shuffled.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    assert!(n >= 3, "need at least 3 transitions");
    let n_val = (n / 20).max(1);
    let n_test = (n / 20).max(1);
    let n_train = n - n_val - n_test;
    let train = (0..n_train).collect();
    let val = (n_train..n_train + n_val).collect();
    let test = (n_train + n_val..n).collect();
    (train, val, test)
}

fn eval_split<M: TransitionModel>(
    model: &mut M,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
    idx: &[usize],
    batch: usize,
    betas: (f64, f64, f64),
) -> ElboBreakdown {
    let mut out = ElboBreakdown::default();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let bd = model.eval_batch(&select(x0, chunk), &select(x1, chunk), betas);
        out.scaled_add(&bd, chunk.len() as f64);
        total += chunk.len() as f64;
    }
    let mut mean = ElboBreakdown::default();
    mean.scaled_add(&out, 1.0 / total);
    mean
}

/// Train a model on pre-shuffled transitions, writing one TSV row per epoch
/// to `log` when given. Finalizes batch-norm statistics on the training
/// split before the final evaluation.
pub fn train<M: TransitionModel>(
    model: &mut M,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    let n = x0.len_of(Axis(0));
    if n < 3 {
        return Err(TrainError::TooFewTransitions);
    }
    let (train_idx, val_idx, test_idx) = split_indices(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.opt_store(), cfg.lr);
    let betas = model.betas();

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }

    let mut order: Vec<usize> = train_idx.clone();
    let mut last_train = ElboBreakdown::default();
    let mut last_val = ElboBreakdown::default();
    for epoch in 0..cfg.epochs {
        let tau = cfg.anneal.tau(epoch);
        order.shuffle(&mut rng);
        let mut epoch_bd = ElboBreakdown::default();
        let mut seen = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let bx0 = select(x0, chunk);
            let bx1 = select(x1, chunk);
            let bd = model.train_step(&bx0, &bx1, tau, &mut rng, &mut opt, cfg.grad_clip);
            if let Some(term) = bd.non_finite_term() {
                return Err(TrainError::NonFinite { term: term.to_string(), epoch, batch: batch_no });
            }
            epoch_bd.scaled_add(&bd, chunk.len() as f64);
            seen += chunk.len() as f64;
        }
        let mut train_mean = ElboBreakdown::default();
        train_mean.scaled_add(&epoch_bd, 1.0 / seen);
        let val = eval_split(model, x0, x1, &val_idx, cfg.batch, betas);
        if let Some(term) = val.non_finite_term() {
            return Err(TrainError::NonFinite { term: term.to_string(), epoch, batch: usize::MAX });
        }
        if let Some(w) = log.as_deref_mut() {
            let v = train_mean.values();
            let row: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(w, "{}\t{:.6}\t{}\t{:.6}", epoch, tau, row.join("\t"), val.total)?;
        }
        last_train = train_mean;
        last_val = val;
    }

    let tx0 = select(x0, &train_idx);
    let tx1 = select(x1, &train_idx);
    model.finalize_batchnorm(&tx0, &tx1, cfg.batch);
    let final_val = eval_split(model, x0, x1, &val_idx, cfg.batch, betas);
    let test = eval_split(model, x0, x1, &test_idx, cfg.batch, betas);
    let _ = (last_train, last_val);

    Ok(TrainReport {
        epochs: cfg.epochs,
        final_train: eval_split(model, x0, x1, &train_idx, cfg.batch, betas),
        final_val,
        test,
    })
}

/// Train boxed models of any supported kind.
pub fn train_any(
    model: &mut TrainedModel,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    match model {
        TrainedModel::Sae(m) => train(m, x0, x1, cfg, log),
        TrainedModel::Ama2(m) => train(m, x0, x1, cfg, log),
        TrainedModel::CubeSpace(m) => train(m, x0, x1, cfg, log),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::LatentConfig;
    use crate::models::NetworkConfig;
    use ndarray::Array1;
    use rand::Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Array1::from_vec(vec![5.0, -3.0]).into_dyn(), true);
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..600 {
            let mut t = Tape::new();
            let bound = store.bind(&mut t);
            let target = t.leaf(Array1::from_vec(vec![1.0, 2.0]).into_dyn());
            let d = t.sub(bound.var(p), target);
            let sq = t.mul(d, d);
            let loss = t.sum_all(sq);
            t.backward(loss);
            let mut grads = vec![Some(t.grad(bound.var(p)))];
            clip_gradients(&mut grads, 1e9);
            opt.apply(&mut store, &mut grads);
        }
        let v = store.value(p);
        assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] - 2.0).abs() < 1e-3, "got {v:?}");
    }

    #[test]
    fn clip_rescales_only_large_gradients() {
        let mut grads = vec![
            Some(Array1::from_vec(vec![3.0, 0.0]).into_dyn()),
            Some(Array1::from_vec(vec![0.0, 4.0]).into_dyn()),
        ];
        let norm = clip_gradients(&mut grads, 0.5);
        assert!((norm - 5.0).abs() < 1e-12);
        let total: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((total - 0.5).abs() < 1e-12);

        let mut small = vec![Some(Array1::from_vec(vec![0.01]).into_dyn())];
        clip_gradients(&mut small, 0.5);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.01);
    }

    #[test]
    fn split_is_90_5_5_shaped() {
        let (tr, va, te) = split_indices(100);
        assert_eq!((tr.len(), va.len(), te.len()), (90, 5, 5));
        let (tr, va, te) = split_indices(20);
        assert_eq!((tr.len(), va.len(), te.len()), (18, 1, 1));
    }

    fn tiny_cube(seed: u64, bidirectional: bool) -> CubeSpace {
        let net = NetworkConfig { image_shape: (1, 7, 7), conv_channels: 3, kernel: 3, action_hidden: 16 };
        let lat = LatentConfig::new(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CubeSpace::new(net, lat, bidirectional, &mut rng)
    }

    fn random_pairs(n: usize, seed: u64) -> (Array4<f64>, Array4<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array4::from_shape_fn((n, 1, 7, 7), |_| rng.gen_range(0.0..1.0));
        let x1 = Array4::from_shape_fn((n, 1, 7, 7), |_| rng.gen_range(0.0..1.0));
        (x0, x1)
    }

    #[test]
    fn train_loop_runs_and_logs() {
        let mut m = tiny_cube(1, true);
        let (x0, x1) = random_pairs(20, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch: 8,
            lr: 1e-3,
            grad_clip: 0.1,
            seed: 7,
            anneal: AnnealSchedule::default(),
        };
        let mut log = Vec::new();
        let report = train(&mut m, &x0, &x1, &cfg, Some(&mut log)).unwrap();
        assert_eq!(report.epochs, 3);
        assert!(report.final_val.total.is_finite());
        assert!(report.test.total.is_finite());
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header plus one row per epoch");
        assert!(lines[0].starts_with("epoch\ttau\ttotal"));
        assert_eq!(lines[1].split('\t').count(), 13);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_task() {
        // Identity transitions of two fixed images; the model should at
        // least improve its reconstruction substantially.
        let mut m = tiny_cube(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proto = Array4::from_shape_fn((2, 1, 7, 7), |_| rng.gen_range(0.0..1.0));
        let n = 12;
        let mut x0 = Array4::zeros((n, 1, 7, 7));
        for i in 0..n {
            x0.slice_mut(ndarray::s![i, .., .., ..])
                .assign(&proto.slice(ndarray::s![i % 2, .., .., ..]));
        }
        let x1 = x0.clone();
        let betas = (1.0, 1.0, 1.0);
        let before = eval_split(&mut m, &x0, &x1, &(0..n).collect::<Vec<_>>(), 6, betas);
        let cfg = TrainConfig {
            epochs: 40,
            batch: 6,
            lr: 1e-3,
            grad_clip: 0.1,
            seed: 8,
            anneal: AnnealSchedule { tau_max: 5.0, tau_min: 0.7, anneal_epochs: 30 },
        };
        train(&mut m, &x0, &x1, &cfg, None).unwrap();
        let after = eval_split(&mut m, &x0, &x1, &(0..n).collect::<Vec<_>>(), 6, betas);
        assert!(
            after.total < before.total * 0.8,
            "no real progress: before {} after {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn non_finite_loss_is_reported_with_term_name() {
        let mut m = tiny_cube(5, true);
        let id = m.store.lookup("enc/fc/w").unwrap();
        m.store.value_mut(id)[[0, 0]] = f64::NAN;
        let (x0, x1) = random_pairs(10, 6);
        let cfg = TrainConfig { epochs: 1, batch: 4, ..TrainConfig::default() };
        match train(&mut m, &x0, &x1, &cfg, None) {
            Err(TrainError::NonFinite { term, epoch: 0, .. }) => {
                assert!(!term.is_empty());
            }
            other => panic!("expected a non-finite abort, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn finalize_makes_eval_deterministic_and_consistent() {
        let mut m = tiny_cube(9, true);
        let (x0, x1) = random_pairs(16, 10);
        let cfg = TrainConfig {
            epochs: 2,
            batch: 8,
            lr: 1e-3,
            grad_clip: 0.1,
            seed: 11,
            anneal: AnnealSchedule::default(),
        };
        train(&mut m, &x0, &x1, &cfg, None).unwrap();
        let a = m.eval_batch(&x0, &x1, (1.0, 1.0, 1.0));
        let b = m.eval_batch(&x0, &x1, (1.0, 1.0, 1.0));
        assert_eq!(a, b);
        // Running stats should have moved away from their initial values.
        let rm = m.store.lookup("enc/bn1/rmean").unwrap();
        assert!(m.store.value(rm).iter().any(|&v| v != 0.0));
    }
}
