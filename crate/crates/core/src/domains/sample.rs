//! Transition datasets and planning instances drawn from an environment.
//!
//! A transition dataset is a batch of image pairs (x0, x1) where x1 renders a
//! uniformly chosen neighbor of a uniformly chosen configuration. Images are
//! standardized per pixel with statistics fitted on the training split and
//! stored alongside the data, so they can be undone for visualization. A
//! planning instance is an image pair (init, goal) whose ground-truth optimal
//! plan length is known exactly by construction.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, DomainError, DomainSpec, GroundTruthState, TileAtlas};
use crate::models::train::split_indices;

pub const DATASET_FORMAT: &str = "pixplan-dataset-v1";

/// Pixels whose training variance is at or below this are treated as
/// constant: they keep a unit divisor so standardizing maps them to zero.
const VAR_FLOOR: f64 = 1e-12;

/// Per-pixel standardization statistics, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Array3<f64>,
    /// Standard deviation per pixel, with constant pixels pinned to 1.
    pub std: Array3<f64>,
}

impl Normalizer {
    pub fn fit<'a, I>(images: I) -> Normalizer
    where
        I: IntoIterator<Item = ArrayView3<'a, f64>>,
    {
        let mut iter = images.into_iter();
        let first = iter.next().expect("at least one image");
        let mut sum = first.to_owned();
        let mut sumsq = first.mapv(|v| v * v);
        let mut count = 1usize;
        for img in iter {
            sum.zip_mut_with(&img, |a, &b| *a += b);
            sumsq.zip_mut_with(&img, |a, &b| *a += b * b);
            count += 1;
        }
        let n = count as f64;
        let mean = sum / n;
        let var = sumsq / n - &mean * &mean;
        let std = var.mapv(|v| if v <= VAR_FLOOR { 1.0 } else { v.sqrt() });
        Normalizer { mean, std }
    }

    pub fn apply3(&self, x: &Array3<f64>) -> Array3<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn invert3(&self, x: &Array3<f64>) -> Array3<f64> {
        x * &self.std + &self.mean
    }

    pub fn apply4(&self, x: &Array4<f64>) -> Array4<f64> {
        let mean = self.mean.clone().insert_axis(Axis(0));
        let std = self.std.clone().insert_axis(Axis(0));
        (x - &mean) / &std
    }

    pub fn invert4(&self, x: &Array4<f64>) -> Array4<f64> {
        let mean = self.mean.clone().insert_axis(Axis(0));
        let std = self.std.clone().insert_axis(Axis(0));
        x * &std + &mean
    }
}

/// Contiguous train/val/test block lengths, in dataset order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Split {
    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.val..self.train + self.val + self.test
    }
}

/// A batch of observed transitions plus everything needed to reproduce and
/// undo its preprocessing. Serializes as a single self-describing archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub format: String,
    pub spec: DomainSpec,
    pub atlas: Option<TileAtlas>,
    pub seed: u64,
    /// Standardized predecessor images, (count, channels, height, width).
    pub x0: Array4<f64>,
    /// Standardized successor images, same shape as x0.
    pub x1: Array4<f64>,
    pub configs0: Vec<GroundTruthState>,
    pub configs1: Vec<GroundTruthState>,
    pub normalizer: Normalizer,
    pub split: Split,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuild the environment this dataset was drawn from, reusing its
    /// stored atlas when one was recorded.
    pub fn domain(&self) -> Domain {
        match &self.atlas {
            Some(a) => Domain { spec: self.spec.clone(), atlas: Some(a.clone()) },
            None => Domain::new(self.spec.clone()),
        }
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<(), DomainError> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P) -> Result<TransitionDataset, DomainError> {
        let file = File::open(path)?;
        let ds: TransitionDataset = serde_json::from_reader(BufReader::new(file))?;
        if ds.format != DATASET_FORMAT {
            return Err(DomainError::Format(ds.format));
        }
        Ok(ds)
    }
}

/// Draw `count` transitions: a uniform configuration paired with a uniform
/// neighbor. Images are standardized per pixel on the training split (90/5/5
/// in dataset order, all-train below 3 samples). Fully determined by `seed`.
pub fn sample_transitions(domain: &Domain, count: usize, seed: u64) -> TransitionDataset {
    assert!(count > 0, "empty dataset requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = domain.image_shape();
    let mut x0 = Array4::zeros((count, c, h, w));
    let mut x1 = Array4::zeros((count, c, h, w));
    let mut configs0 = Vec::with_capacity(count);
    let mut configs1 = Vec::with_capacity(count);
    for i in 0..count {
        let s0 = domain.sample_state(&mut rng);
        let ns = domain.neighbors(&s0);
        let s1 = ns[rng.gen_range(0..ns.len())].clone();
        x0.index_axis_mut(Axis(0), i).assign(&domain.render(&s0));
        x1.index_axis_mut(Axis(0), i).assign(&domain.render(&s1));
        configs0.push(s0);
        configs1.push(s1);
    }
    let split = if count >= 3 {
        let (tr, va, te) = split_indices(count);
        Split { train: tr.len(), val: va.len(), test: te.len() }
    } else {
        Split { train: count, val: 0, test: 0 }
    };
    let train_views = (0..split.train)
        .map(|i| x0.index_axis(Axis(0), i))
        .chain((0..split.train).map(|i| x1.index_axis(Axis(0), i)));
    let normalizer = Normalizer::fit(train_views);
    let x0 = normalizer.apply4(&x0);
    let x1 = normalizer.apply4(&x1);
    TransitionDataset {
        format: DATASET_FORMAT.to_string(),
        spec: domain.spec.clone(),
        atlas: domain.atlas.clone(),
        seed,
        x0,
        x1,
        configs0,
        configs1,
        normalizer,
        split,
    }
}

/// An image-pair planning task with known ground truth. Images are raw
/// renders; apply the dataset normalizer before encoding them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanningInstance {
    pub init: GroundTruthState,
    pub goal: GroundTruthState,
    pub x_init: Array3<f64>,
    pub x_goal: Array3<f64>,
    pub optimal_length: usize,
}

/// Draw `count` instances whose optimal plan length is exactly `g`: a
/// breadth-first sweep out from the canonical goal keeps the layer at each
/// depth, and inits are drawn uniformly from the depth-g layer. Moves are
/// symmetric, so backward depth equals forward optimal distance. Errors if
/// the state space has no layer that deep, naming the deepest one it has.
pub fn sample_instances(
    domain: &Domain,
    g: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PlanningInstance>, DomainError> {
    let goal = domain.canonical_goal();
    let frontier = exact_distance_layer(domain, &goal, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_goal = domain.render(&goal);
    Ok((0..count)
        .map(|_| {
            let init = frontier[rng.gen_range(0..frontier.len())].clone();
            PlanningInstance {
                x_init: domain.render(&init),
                x_goal: x_goal.clone(),
                init,
                goal: goal.clone(),
                optimal_length: g,
            }
        })
        .collect())
}

/// States at shortest distance exactly `depth` from `start`, in discovery
/// order.
fn exact_distance_layer(
    domain: &Domain,
    start: &GroundTruthState,
    depth: usize,
) -> Result<Vec<GroundTruthState>, DomainError> {
    let mut seen = HashSet::new();
    seen.insert(start.clone());
    let mut layer = vec![start.clone()];
    for d in 0..depth {
        let mut next = Vec::new();
        for s in &layer {
            for n in domain.neighbors(s) {
                if seen.insert(n.clone()) {
                    next.push(n);
                }
            }
        }
        if next.is_empty() {
            return Err(DomainError::NoStatesAtDepth { requested: depth, max_available: d });
        }
        layer = next;
    }
    Ok(layer)
}

/// Ground-truth shortest move count between two configurations, by plain
/// breadth-first search over the move graph. Intended for the small spaces
/// used in evaluation; cost grows with the full reachable space.
pub fn shortest_distance(
    domain: &Domain,
    from: &GroundTruthState,
    to: &GroundTruthState,
) -> Option<usize> {
    if from == to {
        return Some(0);
    }
    let mut seen = HashSet::new();
    seen.insert(from.clone());
    let mut queue = VecDeque::new();
    queue.push_back((from.clone(), 0usize));
    while let Some((s, d)) = queue.pop_front() {
        for n in domain.neighbors(&s) {
            if n == *to {
                return Some(d + 1);
            }
            if seen.insert(n.clone()) {
                queue.push_back((n, d + 1));
            }
        }
    }
    None
}

/// Add i.i.d. Gaussian pixel noise with the given standard deviation.
pub fn corrupt(images: &Array4<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let noise = Normal::new(0.0, sigma).expect("nonnegative noise level");
    images.mapv(|v| v + noise.sample(rng))
}
