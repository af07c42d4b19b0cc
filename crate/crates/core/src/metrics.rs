//! Quantitative evaluation of trained checkpoints: likelihood bounds,
//! latent-space health, successor prediction accuracy, and grounded-domain
//! statistics, plus small plot writers for report images.
//!
//! Everything here runs the networks in eval mode with determinized
//! latents, so values are reproducible bit for bit. The one deliberate
//! exception is [`state_variance`], which measures robustness by sampling;
//! it takes an explicit seed.

use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::extraction::{DomainArtifacts, LatentDataset};
use crate::models::TrainedModel;
use crate::strips::GroundAction;

/// Input corruption spread for the latent-variance probe.
pub const VARIANCE_NOISE_SIGMA: f64 = 0.3;
/// Number of corrupted encodings the variance is taken over.
pub const VARIANCE_DRAWS: usize = 10;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

/// Statistics of a grounded domain and of the latent dataset it was read
/// from. Undefined for checkpoints that never produced a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PddlStatistics {
    /// Actions before xor compilation.
    pub actions_a1: usize,
    /// Grounded actions after xor compilation.
    pub actions_a2: usize,
    pub xor_effect_mean: f64,
    pub xor_precondition_mean: f64,
    /// Mean count of bits that flip across a dataset transition.
    pub mean_state_difference: f64,
    pub mean_add: f64,
    pub mean_del: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
}

impl PddlStatistics {
    /// Statistics of a compiled domain produced by the extraction pipeline.
    pub fn from_artifacts(artifacts: &DomainArtifacts, data: &LatentDataset) -> PddlStatistics {
        let (mean_add, mean_del, mean_pos, mean_neg) = action_means(&artifacts.actions);
        PddlStatistics {
            actions_a1: artifacts.extracted.len(),
            actions_a2: artifacts.actions.len(),
            xor_effect_mean: artifacts.report.mean_xor_effect_bits(),
            xor_precondition_mean: artifacts.report.mean_xor_precondition_bits(),
            mean_state_difference: mean_latent_difference(&data.z0, &data.z1),
            mean_add,
            mean_del,
            mean_pos,
            mean_neg,
        }
    }

    /// Statistics of a per-transition domain, where each distinct latent
    /// pair is its own action and nothing is compiled.
    pub fn from_ama1(
        actions: &[GroundAction],
        z0: &Array2<f64>,
        z1: &Array2<f64>,
    ) -> PddlStatistics {
        let (mean_add, mean_del, mean_pos, mean_neg) = action_means(actions);
        PddlStatistics {
            actions_a1: actions.len(),
            actions_a2: actions.len(),
            xor_effect_mean: 0.0,
            xor_precondition_mean: 0.0,
            mean_state_difference: mean_latent_difference(z0, z1),
            mean_add,
            mean_del,
            mean_pos,
            mean_neg,
        }
    }
}

fn action_means(actions: &[GroundAction]) -> (f64, f64, f64, f64) {
    if actions.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = actions.len() as f64;
    let mean = |f: fn(&GroundAction) -> usize| {
        actions.iter().map(|a| f(a) as f64).sum::<f64>() / n
    };
    (mean(|a| a.add.len()), mean(|a| a.del.len()), mean(|a| a.pos.len()), mean(|a| a.neg.len()))
}

/// Mean over transitions of the number of bits that differ between the
/// paired encodings. Empty input gives 0.
pub fn mean_latent_difference(z0: &Array2<f64>, z1: &Array2<f64>) -> f64 {
    assert_eq!(z0.dim(), z1.dim(), "paired encodings must align");
    let n = z0.nrows();
    if n == 0 {
        return 0.0;
    }
    z0.iter().zip(z1.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64
}

/// One checkpoint's evaluation numbers. The successor error is undefined
/// for models without an action head, and the domain statistics exist only
/// once extraction has produced a grounded domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub neg_elbo_beta1: f64,
    pub state_variance: f64,
    pub effective_bits: usize,
    pub constant_zero_bits: usize,
    pub successor_abs_error: Option<f64>,
    pub pddl: Option<PddlStatistics>,
}

pub const METRICS_HEADER: &str = "domain\tmodel\tf_bits\tbeta1\tbeta3\tepsilon\tneg_elbo_beta1\tstate_variance\teffective_bits\tconstant_zero_bits\tsuccessor_abs_error\txor_effect_mean\txor_precondition_mean\tactions_a1\tactions_a2\tmean_state_difference\tmean_add\tmean_del\tmean_pos\tmean_neg";

impl MetricsReport {
    /// One tab-separated table row under [`METRICS_HEADER`]. Undefined
    /// columns are left empty.
    pub fn row(&self, domain: &str, model: &TrainedModel) -> String {
        let lat = model.lat();
        let mut cols = vec![
            domain.to_string(),
            model.kind().to_string(),
            lat.f_bits.to_string(),
            format!("{}", lat.beta1),
            format!("{}", lat.beta3),
            format!("{}", lat.epsilon),
            format!("{:.6}", self.neg_elbo_beta1),
            format!("{:.6}", self.state_variance),
            self.effective_bits.to_string(),
            self.constant_zero_bits.to_string(),
            self.successor_abs_error.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ];
        match &self.pddl {
            Some(p) => cols.extend([
                format!("{:.4}", p.xor_effect_mean),
                format!("{:.4}", p.xor_precondition_mean),
                p.actions_a1.to_string(),
                p.actions_a2.to_string(),
                format!("{:.4}", p.mean_state_difference),
                format!("{:.4}", p.mean_add),
                format!("{:.4}", p.mean_del),
                format!("{:.4}", p.mean_pos),
                format!("{:.4}", p.mean_neg),
            ]),
            None => cols.extend(std::iter::repeat(String::new()).take(9)),
        }
        cols.join("\t")
    }
}

/// Mean evaluation-mode objective over the given pairs at arbitrary KL
/// weights. Deterministic: eval mode samples nothing.
pub fn eval_objective(
    model: &mut TrainedModel,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
    betas: (f64, f64, f64),
) -> f64 {
    let n = x0.len_of(Axis(0));
    assert!(n > 0, "objective needs at least one pair");
    assert_eq!(n, x1.len_of(Axis(0)), "paired sets must align");
    let mut weighted = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let c0 = x0.slice(s![start..end, .., .., ..]).to_owned();
        let c1 = x1.slice(s![start..end, .., .., ..]).to_owned();
        weighted += model.eval_batch(&c0, &c1, betas).total * (end - start) as f64;
    }
    weighted / n as f64
}

/// Negative evidence bound with every KL weight reset to 1, the
/// model-agnostic comparison number. Training weights of 1 or more can only
/// raise the objective, so this is a tighter bound than the trained one.
/// The additive reconstruction constant is left out throughout, so values
/// compare across models but not across image sizes.
pub fn eval_neg_elbo(model: &mut TrainedModel, x0: &Array4<f64>, x1: &Array4<f64>) -> f64 {
    eval_objective(model, x0, x1, (1.0, 1.0, 1.0))
}

/// Robustness probe: corrupt the inputs with Gaussian pixel noise, encode,
/// sample each bit, and average the per-bit unbiased variance across `k`
/// draws. The encoder runs in eval mode, so the only stochasticity is the
/// input noise and the Bernoulli draws; both come from the seed.
pub fn state_variance(
    model: &mut TrainedModel,
    x0: &Array4<f64>,
    sigma: f64,
    k: usize,
    seed: u64,
) -> f64 {
    assert!(k >= 2, "variance needs at least two draws");
    let n = x0.len_of(Axis(0));
    assert!(n > 0, "variance needs at least one example");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let f = model.lat().f_bits;
    let mut ones = Array2::<f64>::zeros((n, f));
    for _ in 0..k {
        let corrupted = x0.mapv(|v| v + noise.sample(&mut rng));
        let logits = model.encode_logits(&corrupted);
        let probs = logits.mapv(|l| 1.0 / (1.0 + (-l).exp()));
        for (acc, &p) in ones.iter_mut().zip(probs.iter()) {
            if rng.gen_bool(p) {
                *acc += 1.0;
            }
        }
    }
    mean_count_variance(&ones, k)
}

/// Mean over cells of the unbiased sample variance of `k` binary draws,
/// given each cell's count of ones. For success probability p the
/// expectation is exactly p(1-p).
fn mean_count_variance(ones: &Array2<f64>, k: usize) -> f64 {
    let k = k as f64;
    ones.iter().map(|&c| c * (k - c) / (k * (k - 1.0))).sum::<f64>() / ones.len() as f64
}

/// How the latent bits partition over a set of states: bits that take both
/// values, bits stuck at zero, bits stuck at one. The three always sum to
/// the latent width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitCensus {
    pub effective: usize,
    pub constant_zero: usize,
    pub constant_one: usize,
}

/// Census over the determinized encodings of the given states.
pub fn bit_census(model: &mut TrainedModel, states: &Array4<f64>) -> BitCensus {
    let n = states.len_of(Axis(0));
    assert!(n > 0, "census needs at least one state");
    let mut z = Array2::zeros((0, model.lat().f_bits));
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = model.encode_bits(&states.slice(s![start..end, .., .., ..]).to_owned());
        z.append(Axis(0), chunk.view()).expect("widths match");
    }
    bit_census_of(&z)
}

/// Census over already-determinized codes, one row per state.
pub fn bit_census_of(z: &Array2<f64>) -> BitCensus {
    assert!(z.nrows() > 0, "census needs at least one code");
    let mut census = BitCensus { effective: 0, constant_zero: 0, constant_one: 0 };
    for col in z.columns() {
        let any_one = col.iter().any(|&v| v >= 0.5);
        let any_zero = col.iter().any(|&v| v < 0.5);
        match (any_zero, any_one) {
            (true, true) => census.effective += 1,
            (true, false) => census.constant_zero += 1,
            (false, true) => census.constant_one += 1,
            (false, false) => unreachable!("nonempty column takes some value"),
        }
    }
    census
}

/// Mean absolute gap between each transition's directly-encoded successor
/// and the successor predicted from the predecessor through the action
/// model. Zero means the latent dynamics are exact on this set. None for
/// models without an action head.
pub fn successor_error(
    model: &mut TrainedModel,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
) -> Option<f64> {
    let n = x0.len_of(Axis(0));
    assert!(n > 0, "successor error needs at least one pair");
    assert_eq!(n, x1.len_of(Axis(0)), "paired sets must align");
    let mut abs_sum = 0.0;
    let mut cells = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let c0 = x0.slice(s![start..end, .., .., ..]).to_owned();
        let c1 = x1.slice(s![start..end, .., .., ..]).to_owned();
        let (z1, z2) = match model {
            TrainedModel::Sae(_) => return None,
            TrainedModel::Ama2(m) => {
                let labels = m.action_labels(&c0, &c1);
                let z0 = m.sae.encode_bits(&c0);
                (m.sae.encode_bits(&c1), m.apply_bits(&z0, &labels))
            }
            TrainedModel::CubeSpace(m) => {
                let labels = m.action_labels(&c0, &c1);
                let z0 = m.encode_bits(&c0);
                (m.encode_bits(&c1), m.apply_bits(&z0, &labels))
            }
        };
        abs_sum += z1.iter().zip(z2.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        cells += z1.len();
    }
    Some(abs_sum / cells as f64)
}

const PLOT_SIZE: u32 = 320;
const PLOT_MARGIN: u32 = 24;

fn plot_canvas() -> image::RgbImage {
    let mut img =
        image::RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, image::Rgb([255, 255, 255]));
    let lo = PLOT_MARGIN - 1;
    let hi = PLOT_SIZE - PLOT_MARGIN;
    for t in lo..=hi {
        for (x, y) in [(t, lo), (t, hi), (lo, t), (hi, t)] {
            img.put_pixel(x, y, image::Rgb([0, 0, 0]));
        }
    }
    img
}

fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn to_px(v: f64, lo: f64, hi: f64, flip: bool) -> u32 {
    let span = (PLOT_SIZE - 2 * PLOT_MARGIN) as f64;
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let t = if flip { 1.0 - t } else { t };
    PLOT_MARGIN + (t * span).round() as u32
}

/// Scatter of paired values on a shared square scale, with the identity
/// diagonal for reference. Useful for model-vs-model comparisons of the
/// same quantity.
pub fn write_scatter_plot(points: &[(f64, f64)], path: &Path) -> Result<(), MetricsError> {
    let mut img = plot_canvas();
    let (lo, hi) = data_range(points.iter().flat_map(|&(x, y)| [x, y]));
    for t in 0..(PLOT_SIZE - 2 * PLOT_MARGIN) {
        let v = lo + (hi - lo) * t as f64 / (PLOT_SIZE - 2 * PLOT_MARGIN - 1) as f64;
        img.put_pixel(to_px(v, lo, hi, false), to_px(v, lo, hi, true), image::Rgb([180, 180, 180]));
    }
    for &(x, y) in points {
        let (cx, cy) = (to_px(x, lo, hi, false), to_px(y, lo, hi, true));
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                let (px, py) = (cx.saturating_add_signed(dx), cy.saturating_add_signed(dy));
                if px < PLOT_SIZE && py < PLOT_SIZE {
                    img.put_pixel(px, py, image::Rgb([40, 80, 200]));
                }
            }
        }
    }
    save_plot(&img, path)
}

/// Line plot of a series against its index, for training-curve pictures.
pub fn write_line_plot(values: &[f64], path: &Path) -> Result<(), MetricsError> {
    let mut img = plot_canvas();
    if !values.is_empty() {
        let (lo, hi) = data_range(values.iter().copied());
        let n = values.len();
        let xs: Vec<u32> = (0..n)
            .map(|i| to_px(i as f64, 0.0, (n.max(2) - 1) as f64, false))
            .collect();
        let ys: Vec<u32> = values.iter().map(|&v| to_px(v, lo, hi, true)).collect();
        for i in 1..n {
            draw_segment(&mut img, xs[i - 1], ys[i - 1], xs[i], ys[i]);
        }
        if n == 1 {
            img.put_pixel(xs[0], ys[0], image::Rgb([40, 80, 200]));
        }
    }
    save_plot(&img, path)
}

fn draw_segment(img: &mut image::RgbImage, x0: u32, y0: u32, x1: u32, y1: u32) {
    let steps = (x1.abs_diff(x0)).max(y1.abs_diff(y0)).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as u32;
        let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as u32;
        img.put_pixel(x, y, image::Rgb([40, 80, 200]));
    }
}

fn save_plot(img: &image::RgbImage, path: &Path) -> Result<(), MetricsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}
