//! Ground-truth validation of decoded plan traces, and trace visualization.
//!
//! A planner's output is a sequence of latent states. Deciding whether the
//! plan is real requires decoding those states to images and checking them
//! against the environment's actual rules, without peeking at the hidden
//! configurations: each frame is parsed back to a configuration by matching
//! image patches against known patterns, then state legality and
//! move legality are checked on the parsed configurations.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::domains::sample::{Normalizer, PlanningInstance};
use crate::domains::{
    disk_color, light_tile, unswirl, Domain, DomainSpec, GroundTruthState, TileAtlas,
    HANOI_CELL_H, HANOI_CELL_W,
};
use crate::models::TrainedModel;

/// Fixed per-cell match threshold for plain LightsOut frames.
pub const LIGHTS_THETA: f64 = 0.01;
/// Relaxed threshold for twisted frames, which carry unswirl resampling
/// residue on top of decoder error.
pub const LIGHTS_THETA_TWISTED: f64 = 0.04;

#[derive(Debug, thiserror::Error)]
pub enum ValidateError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

/// Outcome of judging one planning attempt against ground truth.
///
/// `optimal == Some(true)` implies `valid` implies `found`. `failure_step` is
/// the index of the offending frame; a bad move between frames i and i+1
/// reports i+1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub found: bool,
    pub valid: bool,
    pub optimal: Option<bool>,
    pub failure_step: Option<usize>,
    pub failure_reason: String,
}

/// Per-frame parses and the overall legality of a decoded trace.
#[derive(Debug, Clone)]
pub struct TraceCheck {
    /// Parsed configuration per frame; None where parsing failed.
    pub parses: Vec<Option<GroundTruthState>>,
    /// Match threshold used per frame (fixed for LightsOut, searched for the
    /// patch-matching validators).
    pub thetas: Vec<f64>,
    pub valid: bool,
    pub failure_step: Option<usize>,
    pub failure_reason: String,
}

/// Validate a decoded frame sequence against the environment's rules:
/// every frame must parse to a legal configuration and every consecutive
/// pair must be one legal move apart.
pub fn validate_trace(domain: &Domain, images: &[Array3<f64>]) -> TraceCheck {
    match &domain.spec {
        &DomainSpec::LightsOut { n, cell } => validate_lightsout(images, n, cell, None),
        &DomainSpec::TwistedLightsOut { n, cell, strength, radius_frac } => {
            let radius = radius_frac * (n * cell) as f64;
            validate_lightsout(images, n, cell, Some((strength, radius)))
        }
        &DomainSpec::SlidingTile { rows, cols, .. } => {
            let atlas = domain.atlas.as_ref().expect("sliding tile domain has an atlas");
            validate_tiles(images, atlas, rows, cols)
        }
        &DomainSpec::Hanoi { disks, towers } => validate_hanoi(images, disks, towers),
    }
}

/// LightsOut trace validation at a fixed threshold. `twisted` carries the
/// swirl (strength, radius) to undo first, switching the threshold to the
/// relaxed one.
pub fn validate_lightsout(
    images: &[Array3<f64>],
    n: usize,
    cell: usize,
    twisted: Option<(f64, f64)>,
) -> TraceCheck {
    let theta = if twisted.is_some() { LIGHTS_THETA_TWISTED } else { LIGHTS_THETA };
    let on = light_tile(cell, true);
    let off = light_tile(cell, false);
    let parse = |img: &Array3<f64>| {
        let img = match twisted {
            Some((strength, radius)) => unswirl(img, strength, radius),
            None => img.clone(),
        };
        let mut bits = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let patch = img.slice(s![0, r * cell..(r + 1) * cell, c * cell..(c + 1) * cell]);
                let d_on: f64 =
                    patch.iter().zip(on.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                        / (cell * cell) as f64;
                let d_off: f64 =
                    patch.iter().zip(off.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                        / (cell * cell) as f64;
                match (d_on <= theta, d_off <= theta) {
                    (true, false) => bits.push(true),
                    (false, true) => bits.push(false),
                    (true, true) => return Err(format!("cell ({r},{c}) matches both patterns")),
                    (false, false) => {
                        return Err(format!("cell ({r},{c}) matches neither pattern"))
                    }
                }
            }
        }
        Ok((GroundTruthState::Lights(bits), theta))
    };
    run_trace(images, parse, |a, b| lights_move_ok(a, b, n))
}

fn lights_move_ok(a: &GroundTruthState, b: &GroundTruthState, n: usize) -> Result<(), String> {
    let (GroundTruthState::Lights(a), GroundTruthState::Lights(b)) = (a, b) else {
        unreachable!("lights validator parses lights configs")
    };
    let diff: Vec<usize> = (0..n * n).filter(|&i| a[i] != b[i]).collect();
    for press in 0..n * n {
        let (r, c) = (press / n, press % n);
        let mut mask = vec![press];
        if r > 0 {
            mask.push(press - n);
        }
        if r + 1 < n {
            mask.push(press + n);
        }
        if c > 0 {
            mask.push(press - 1);
        }
        if c + 1 < n {
            mask.push(press + 1);
        }
        mask.sort_unstable();
        if mask == diff {
            return Ok(());
        }
    }
    Err("cell difference is not a single press".to_string())
}

/// Sliding-tile trace validation. Each frame's patches are matched against
/// the atlas under a balanced threshold search; a frame is rejected when
/// ambiguous and unmatched patches coexist or the board is not a
/// permutation. A move must swap exactly two adjacent tiles, one of them
/// the blank.
pub fn validate_tiles(
    images: &[Array3<f64>],
    atlas: &TileAtlas,
    rows: usize,
    cols: usize,
) -> TraceCheck {
    let side = atlas.side;
    let patterns: Vec<Vec<f64>> =
        atlas.tiles.iter().map(|t| t.iter().cloned().collect()).collect();
    let parse = |img: &Array3<f64>| {
        let patches: Vec<Vec<f64>> = (0..rows * cols)
            .map(|p| {
                let (r, c) = (p / cols, p % cols);
                img.slice(s![0, r * side..(r + 1) * side, c * side..(c + 1) * side])
                    .iter()
                    .cloned()
                    .collect()
            })
            .collect();
        let (best, outcome) = match_patches(&patches, &patterns);
        if outcome.ambiguous != 0 && outcome.unmatched != 0 {
            return Err(format!(
                "{} ambiguous and {} unmatched patches at threshold {:.4}",
                outcome.ambiguous, outcome.unmatched, outcome.theta
            ));
        }
        let board: Vec<u8> = best.iter().map(|&t| t as u8).collect();
        let mut seen = vec![false; patterns.len()];
        for &t in &best {
            if seen[t] {
                return Err(format!("tile {t} appears more than once"));
            }
            seen[t] = true;
        }
        Ok((GroundTruthState::Tiles(board), outcome.theta))
    };
    run_trace(images, parse, |a, b| tiles_move_ok(a, b, cols))
}

fn tiles_move_ok(a: &GroundTruthState, b: &GroundTruthState, cols: usize) -> Result<(), String> {
    let (GroundTruthState::Tiles(a), GroundTruthState::Tiles(b)) = (a, b) else {
        unreachable!("tile validator parses tile configs")
    };
    let moved: Vec<usize> = (0..a.len()).filter(|&p| a[p] != b[p]).collect();
    let [i, j] = moved[..] else {
        return Err(format!("{} positions changed, expected 2", moved.len()));
    };
    if a[i] != b[j] || a[j] != b[i] {
        return Err("changed positions are not a swap".to_string());
    }
    if a[i] != 0 && a[j] != 0 {
        return Err("neither moved tile is the blank".to_string());
    }
    let (ri, ci) = (i / cols, i % cols);
    let (rj, cj) = (j / cols, j % cols);
    if ri.abs_diff(rj) + ci.abs_diff(cj) != 1 {
        return Err(format!("positions {i} and {j} are not adjacent"));
    }
    Ok(())
}

/// Towers of Hanoi trace validation via the same patch machinery as the
/// tiles, with fixed patterns: the gray background and one solid color per
/// disk. State legality additionally requires every disk exactly once,
/// bottom-aligned stacks, and strictly shrinking disks upward; a move must
/// relocate exactly one disk that was on top onto a larger disk or an empty
/// tower.
pub fn validate_hanoi(images: &[Array3<f64>], disks: usize, towers: usize) -> TraceCheck {
    let cell_len = 3 * HANOI_CELL_H * HANOI_CELL_W;
    let mut patterns: Vec<Vec<f64>> = vec![vec![0.5; cell_len]];
    for d in 0..disks {
        let color = disk_color(d, disks);
        let mut pat = Vec::with_capacity(cell_len);
        for ch in 0..3 {
            pat.extend(std::iter::repeat(color[ch]).take(HANOI_CELL_H * HANOI_CELL_W));
        }
        patterns.push(pat);
    }
    let parse = |img: &Array3<f64>| {
        let patches: Vec<Vec<f64>> = (0..disks * towers)
            .map(|p| {
                let (r, t) = (p / towers, p % towers);
                img.slice(s![
                    ..,
                    r * HANOI_CELL_H..(r + 1) * HANOI_CELL_H,
                    t * HANOI_CELL_W..(t + 1) * HANOI_CELL_W
                ])
                .iter()
                .cloned()
                .collect()
            })
            .collect();
        let (best, outcome) = match_patches(&patches, &patterns);
        if outcome.ambiguous != 0 && outcome.unmatched != 0 {
            return Err(format!(
                "{} ambiguous and {} unmatched patches at threshold {:.4}",
                outcome.ambiguous, outcome.unmatched, outcome.theta
            ));
        }
        // Pattern 0 is the background; pattern d+1 is disk d.
        let mut on = vec![None; disks];
        for tower in 0..towers {
            let mut above_empty = false;
            let mut below: Option<usize> = None;
            for row in (0..disks).rev() {
                match best[row * towers + tower] {
                    0 => above_empty = true,
                    m => {
                        let disk = m - 1;
                        if above_empty {
                            return Err(format!("disk {disk} floats on tower {tower}"));
                        }
                        if let Some(b) = below {
                            if b <= disk {
                                return Err(format!(
                                    "disk {disk} rests on smaller disk {b} on tower {tower}"
                                ));
                            }
                        }
                        if on[disk].is_some() {
                            return Err(format!("disk {disk} appears more than once"));
                        }
                        on[disk] = Some(tower as u8);
                        below = Some(disk);
                    }
                }
            }
        }
        let mut config = Vec::with_capacity(disks);
        for (disk, tower) in on.into_iter().enumerate() {
            match tower {
                Some(t) => config.push(t),
                None => return Err(format!("disk {disk} is missing")),
            }
        }
        Ok((GroundTruthState::Hanoi(config), outcome.theta))
    };
    run_trace(images, parse, hanoi_move_ok)
}

fn hanoi_move_ok(a: &GroundTruthState, b: &GroundTruthState) -> Result<(), String> {
    let (GroundTruthState::Hanoi(a), GroundTruthState::Hanoi(b)) = (a, b) else {
        unreachable!("hanoi validator parses hanoi configs")
    };
    let moved: Vec<usize> = (0..a.len()).filter(|&d| a[d] != b[d]).collect();
    let [disk] = moved[..] else {
        return Err(format!("{} disks moved, expected 1", moved.len()));
    };
    for smaller in 0..disk {
        if a[smaller] == a[disk] {
            return Err(format!("disk {disk} moved from under disk {smaller}"));
        }
        if a[smaller] == b[disk] {
            return Err(format!("disk {disk} landed on smaller disk {smaller}"));
        }
    }
    Ok(())
}

/// Ambiguous/unmatched accounting at the threshold the balance search
/// settled on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaOutcome {
    pub theta: f64,
    pub ambiguous: usize,
    pub unmatched: usize,
}

/// Best-match assignment plus a balanced threshold: binary-search theta in
/// [0, 0.5] until the ambiguous-patch and unmatched-patch counts differ by
/// at most one (at most 30 halvings). Deterministic for fixed inputs.
fn match_patches(patches: &[Vec<f64>], patterns: &[Vec<f64>]) -> (Vec<usize>, ThetaOutcome) {
    let dists: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| patterns.iter().map(|q| mae(p, q)).collect())
        .collect();
    let counts = |theta: f64| {
        let mut ambiguous = 0usize;
        let mut unmatched = 0usize;
        for row in &dists {
            match row.iter().filter(|&&d| d <= theta).count() {
                0 => unmatched += 1,
                1 => {}
                _ => ambiguous += 1,
            }
        }
        (ambiguous, unmatched)
    };
    let (mut lo, mut hi) = (0.0, 0.5);
    let mut theta = 0.25;
    let (mut ambiguous, mut unmatched) = counts(theta);
    for _ in 0..30 {
        if ambiguous.abs_diff(unmatched) <= 1 {
            break;
        }
        // More unmatched than ambiguous means the threshold is too strict.
        if ambiguous < unmatched {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = 0.5 * (lo + hi);
        (ambiguous, unmatched) = counts(theta);
    }
    let best = dists
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite distances"))
                .expect("at least one pattern")
                .0
        })
        .collect();
    (best, ThetaOutcome { theta, ambiguous, unmatched })
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn run_trace<P, T>(images: &[Array3<f64>], parse: P, move_ok: T) -> TraceCheck
where
    P: Fn(&Array3<f64>) -> Result<(GroundTruthState, f64), String>,
    T: Fn(&GroundTruthState, &GroundTruthState) -> Result<(), String>,
{
    let mut parses = Vec::with_capacity(images.len());
    let mut thetas = Vec::with_capacity(images.len());
    let mut failure: Option<(usize, String)> = None;
    for (i, img) in images.iter().enumerate() {
        match parse(img) {
            Ok((config, theta)) => {
                parses.push(Some(config));
                thetas.push(theta);
            }
            Err(reason) => {
                parses.push(None);
                thetas.push(f64::NAN);
                if failure.is_none() {
                    failure = Some((i, format!("frame {i}: {reason}")));
                }
            }
        }
    }
    if failure.is_none() {
        for i in 1..parses.len() {
            let (prev, next) = (parses[i - 1].as_ref().unwrap(), parses[i].as_ref().unwrap());
            if let Err(reason) = move_ok(prev, next) {
                failure = Some((i, format!("move into frame {i}: {reason}")));
                break;
            }
        }
    }
    match failure {
        Some((step, reason)) => TraceCheck {
            parses,
            thetas,
            valid: false,
            failure_step: Some(step),
            failure_reason: reason,
        },
        None => TraceCheck {
            parses,
            thetas,
            valid: true,
            failure_step: None,
            failure_reason: String::new(),
        },
    }
}

/// Judge one planning attempt. `decoded` is the de-normalized image trace of
/// the plan when the planner found one (`None` when it did not). A plan is
/// valid when every frame parses legally, every move is legal, and the
/// decoded endpoints match the instance's ground-truth init and goal.
/// Optimality compares the plan length against the instance's known optimal
/// length.
pub fn judge(
    domain: &Domain,
    instance: &PlanningInstance,
    decoded: Option<&[Array3<f64>]>,
) -> ValidationVerdict {
    let Some(images) = decoded else {
        return ValidationVerdict {
            found: false,
            valid: false,
            optimal: None,
            failure_step: None,
            failure_reason: "no plan found".to_string(),
        };
    };
    if images.is_empty() {
        return ValidationVerdict {
            found: true,
            valid: false,
            optimal: Some(false),
            failure_step: None,
            failure_reason: "empty trace".to_string(),
        };
    }
    let check = validate_trace(domain, images);
    let (mut valid, mut failure_step, mut failure_reason) =
        (check.valid, check.failure_step, check.failure_reason);
    if valid {
        let first = check.parses.first().unwrap().as_ref().unwrap();
        let last = check.parses.last().unwrap().as_ref().unwrap();
        if first != &instance.init {
            valid = false;
            failure_step = Some(0);
            failure_reason = "decoded initial state does not match the instance".to_string();
        } else if last != &instance.goal {
            valid = false;
            failure_step = Some(images.len() - 1);
            failure_reason = "decoded final state does not match the goal".to_string();
        }
    }
    let plan_len = images.len() - 1;
    ValidationVerdict {
        found: true,
        valid,
        optimal: Some(valid && plan_len == instance.optimal_length),
        failure_step,
        failure_reason,
    }
}

/// Decode a latent state trace to display-ready images: decode, undo the
/// dataset normalization, clip into [0, 1]. Row i of `trace` is the i-th
/// state's bit vector.
pub fn visualize(
    model: &mut TrainedModel,
    trace: &Array2<f64>,
    normalizer: &Normalizer,
) -> Vec<Array3<f64>> {
    if trace.nrows() == 0 {
        return Vec::new();
    }
    let decoded = model.decode_bits(&trace.to_owned());
    let raw = normalizer.invert4(&decoded);
    (0..raw.shape()[0])
        .map(|i| raw.index_axis(Axis(0), i).to_owned().mapv(|v| v.clamp(0.0, 1.0)))
        .collect()
}

fn to_rgb8(img: &Array3<f64>) -> image::RgbImage {
    let (c, h, w) = img.dim();
    assert!(c == 1 || c == 3, "expected grayscale or rgb, got {c} channels");
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (img[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        if c == 1 {
            image::Rgb([px(0), px(0), px(0)])
        } else {
            image::Rgb([px(0), px(1), px(2)])
        }
    })
}

/// Write one PNG per frame as `{stem}-{index:03}.png` under `dir`, creating
/// it if needed. Returns the paths written.
pub fn write_image_sequence(
    images: &[Array3<f64>],
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>, ValidateError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = dir.join(format!("{stem}-{i:03}.png"));
        to_rgb8(img).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Write all frames as one grid image, left to right then top to bottom,
/// with a thin separator between frames.
pub fn write_contact_sheet(images: &[Array3<f64>], path: &Path) -> Result<(), ValidateError> {
    const GAP: usize = 2;
    if images.is_empty() {
        return Ok(());
    }
    let (_, h, w) = images[0].dim();
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (sheet_h, sheet_w) = (rows * h + (rows - 1) * GAP, cols * w + (cols - 1) * GAP);
    let mut sheet = image::RgbImage::from_pixel(
        sheet_w as u32,
        sheet_h as u32,
        image::Rgb([96, 96, 96]),
    );
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let tile = to_rgb8(img);
        for (x, y, px) in tile.enumerate_pixels() {
            sheet.put_pixel(
                (c * (w + GAP)) as u32 + x,
                (r * (h + GAP)) as u32 + y,
                *px,
            );
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    sheet.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::LatentConfig;
    use crate::models::{CubeSpace, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn walk(domain: &Domain, len: usize, rng: &mut ChaCha8Rng) -> Vec<GroundTruthState> {
        let mut states = vec![domain.sample_state(rng)];
        for _ in 0..len {
            let ns = domain.neighbors(states.last().unwrap());
            states.push(ns[rng.gen_range(0..ns.len())].clone());
        }
        states
    }

    fn render_all(domain: &Domain, states: &[GroundTruthState]) -> Vec<Array3<f64>> {
        states.iter().map(|s| domain.render(s)).collect()
    }

    fn test_domains() -> Vec<Domain> {
        vec![
            Domain::new(DomainSpec::LightsOut { n: 3, cell: 5 }),
            Domain::new(DomainSpec::twisted_lights_out(3)),
            Domain::new(DomainSpec::SlidingTile { rows: 3, cols: 3, tile: 5, atlas_seed: 0 }),
            Domain::new(DomainSpec::hanoi(3, 3)),
        ]
    }

    #[test]
    fn ground_truth_walks_validate_in_every_domain() {
        for domain in test_domains() {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..200 {
                let states = walk(&domain, 4, &mut rng);
                let check = validate_trace(&domain, &render_all(&domain, &states));
                assert!(
                    check.valid,
                    "{}: {} (step {:?})",
                    domain.spec.name(),
                    check.failure_reason,
                    check.failure_step
                );
                for (parsed, truth) in check.parses.iter().zip(&states) {
                    assert_eq!(parsed.as_ref(), Some(truth), "{}", domain.spec.name());
                }
            }
        }
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        for domain in test_domains() {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut rejected = 0;
            let trials = 50;
            for _ in 0..trials {
                let mut states = walk(&domain, 4, &mut rng);
                let k = 2;
                // Corrupt the middle configuration until it is genuinely
                // illegal against at least one neighboring frame.
                loop {
                    let mut mutant = states[k].clone();
                    match &mut mutant {
                        GroundTruthState::Lights(bits) => {
                            let i = rng.gen_range(0..bits.len());
                            bits[i] = !bits[i];
                        }
                        GroundTruthState::Tiles(board) => {
                            let i = rng.gen_range(0..board.len());
                            let j = rng.gen_range(0..board.len());
                            board.swap(i, j);
                        }
                        GroundTruthState::Hanoi(on) => {
                            let d = rng.gen_range(0..on.len());
                            on[d] = (on[d] + 1 + rng.gen_range(0..2)) % 3;
                        }
                    }
                    let breaks_rules = !domain.neighbors(&states[k - 1]).contains(&mutant)
                        || !domain.neighbors(&mutant).contains(&states[k + 1]);
                    if mutant != states[k] && breaks_rules {
                        states[k] = mutant;
                        break;
                    }
                }
                let check = validate_trace(&domain, &render_all(&domain, &states));
                if !check.valid {
                    rejected += 1;
                    assert!(check.failure_step.is_some());
                }
            }
            assert_eq!(rejected, trials, "{} let corruptions through", domain.spec.name());
        }
    }

    #[test]
    fn duplicated_tiles_invalidate_the_frame() {
        let domain = Domain::new(DomainSpec::SlidingTile { rows: 2, cols: 2, tile: 5, atlas_seed: 0 });
        let image = domain.render(&GroundTruthState::Tiles(vec![1, 1, 2, 3]));
        let atlas = domain.atlas.as_ref().unwrap();
        let check = validate_tiles(&[image], atlas, 2, 2);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("more than once"), "{}", check.failure_reason);
    }

    #[test]
    fn nonadjacent_swaps_invalidate_the_move() {
        let domain = Domain::new(DomainSpec::SlidingTile { rows: 3, cols: 3, tile: 5, atlas_seed: 0 });
        let a = GroundTruthState::Tiles(vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let b = GroundTruthState::Tiles(vec![8, 1, 2, 3, 4, 5, 6, 7, 0]);
        let atlas = domain.atlas.as_ref().unwrap();
        let check = validate_tiles(&render_all(&domain, &[a, b]), atlas, 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("not adjacent"), "{}", check.failure_reason);
        assert_eq!(check.failure_step, Some(1));
    }

    #[test]
    fn swaps_without_the_blank_invalidate_the_move() {
        let domain = Domain::new(DomainSpec::SlidingTile { rows: 3, cols: 3, tile: 5, atlas_seed: 0 });
        let a = GroundTruthState::Tiles(vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let b = GroundTruthState::Tiles(vec![0, 2, 1, 3, 4, 5, 6, 7, 8]);
        let atlas = domain.atlas.as_ref().unwrap();
        let check = validate_tiles(&render_all(&domain, &[a, b]), atlas, 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("blank"), "{}", check.failure_reason);
    }

    #[test]
    fn simultaneous_presses_invalidate_lights_moves() {
        let domain = Domain::new(DomainSpec::LightsOut { n: 3, cell: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = domain.sample_state(&mut rng);
        // Press opposite corners at once: six cells change, no single press
        // mask has more than five.
        let GroundTruthState::Lights(bits) = &a else { unreachable!() };
        let mut twice = bits.clone();
        for i in [0usize, 1, 3, 8, 7, 5] {
            twice[i] = !twice[i];
        }
        let b = GroundTruthState::Lights(twice);
        let check = validate_lightsout(&render_all(&domain, &[a, b]), 3, 5, None);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("not a single press"), "{}", check.failure_reason);
    }

    fn painted_hanoi(cells: &[(usize, usize, usize)], disks: usize, towers: usize) -> Array3<f64> {
        let mut img = Array3::from_elem((3, disks * HANOI_CELL_H, towers * HANOI_CELL_W), 0.5);
        for &(row, tower, disk) in cells {
            let color = disk_color(disk, disks);
            for (ch, &v) in color.iter().enumerate() {
                img.slice_mut(s![
                    ch,
                    row * HANOI_CELL_H..(row + 1) * HANOI_CELL_H,
                    tower * HANOI_CELL_W..(tower + 1) * HANOI_CELL_W
                ])
                .fill(v);
            }
        }
        img
    }

    #[test]
    fn illegal_hanoi_frames_are_rejected() {
        // Larger disk on top: disk 1 at the bottom row, disk 2 above it.
        let upside_down = painted_hanoi(&[(2, 0, 1), (1, 0, 2), (2, 1, 0)], 3, 3);
        let check = validate_hanoi(&[upside_down], 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("smaller disk"), "{}", check.failure_reason);

        // A disk with empty space below it.
        let floating = painted_hanoi(&[(0, 1, 0), (2, 0, 2), (1, 0, 1)], 3, 3);
        let check = validate_hanoi(&[floating], 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("floats"), "{}", check.failure_reason);

        // A disk missing entirely.
        let missing = painted_hanoi(&[(2, 0, 2), (2, 1, 1)], 3, 3);
        let check = validate_hanoi(&[missing], 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("missing"), "{}", check.failure_reason);

        // The same disk twice.
        let doubled = painted_hanoi(&[(2, 0, 2), (2, 1, 1), (2, 2, 1)], 3, 3);
        let check = validate_hanoi(&[doubled], 3, 3);
        assert!(!check.valid);
    }

    #[test]
    fn moving_a_buried_disk_is_rejected() {
        let domain = Domain::new(DomainSpec::hanoi(3, 3));
        let a = GroundTruthState::Hanoi(vec![0, 0, 0]);
        let b = GroundTruthState::Hanoi(vec![0, 1, 0]);
        let check = validate_hanoi(&render_all(&domain, &[a, b]), 3, 3);
        assert!(!check.valid);
        assert!(check.failure_reason.contains("from under"), "{}", check.failure_reason);
    }

    #[test]
    fn clean_renders_parse_without_threshold_tension() {
        let domain = Domain::new(DomainSpec::sliding_tile(3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = domain.sample_state(&mut rng);
        let img = domain.render(&s);
        let atlas = domain.atlas.as_ref().unwrap();
        let a = validate_tiles(&[img.clone()], atlas, 3, 3);
        let b = validate_tiles(&[img], atlas, 3, 3);
        assert!(a.valid);
        assert_eq!(a.thetas, b.thetas, "threshold search must be deterministic");
        assert!(a.thetas[0] >= 0.0 && a.thetas[0] <= 0.5);
        assert_eq!(a.parses[0].as_ref(), Some(&s));
    }

    #[test]
    fn judge_tracks_found_valid_optimal() {
        let domain = Domain::new(DomainSpec::hanoi(3, 3));
        let instances =
            crate::domains::sample::sample_instances(&domain, 2, 1, 7).unwrap();
        let inst = &instances[0];

        let not_found = judge(&domain, inst, None);
        assert!(!not_found.found && !not_found.valid);
        assert_eq!(not_found.optimal, None);

        // Walk the true shortest path by brute force: neighbors of init at
        // distance 1 from goal.
        let mid = domain
            .neighbors(&inst.init)
            .into_iter()
            .find(|s| domain.neighbors(s).contains(&inst.goal))
            .unwrap();
        let optimal_trace =
            render_all(&domain, &[inst.init.clone(), mid.clone(), inst.goal.clone()]);
        let v = judge(&domain, inst, Some(&optimal_trace));
        assert!(v.found && v.valid);
        assert_eq!(v.optimal, Some(true));

        // A longer valid route: step away and back, then the short path.
        let detour = domain
            .neighbors(&inst.init)
            .into_iter()
            .find(|s| *s != mid)
            .unwrap();
        let long_trace = render_all(
            &domain,
            &[inst.init.clone(), detour, inst.init.clone(), mid, inst.goal.clone()],
        );
        let v = judge(&domain, inst, Some(&long_trace));
        assert!(v.found && v.valid);
        assert_eq!(v.optimal, Some(false));

        // Endpoints must match the instance.
        let mut wrong_start = optimal_trace.clone();
        wrong_start[0] = domain.render(
            &domain
                .neighbors(&inst.init)
                .into_iter()
                .find(|s| *s != inst.goal)
                .unwrap(),
        );
        let v = judge(&domain, inst, Some(&wrong_start));
        assert!(v.found && !v.valid);
    }

    #[test]
    fn judge_rejects_traces_to_the_wrong_goal() {
        let domain = Domain::new(DomainSpec::LightsOut { n: 3, cell: 5 });
        let instances =
            crate::domains::sample::sample_instances(&domain, 1, 1, 3).unwrap();
        let inst = &instances[0];
        // Valid single move that does not reach the instance goal.
        let other = domain
            .neighbors(&inst.init)
            .into_iter()
            .find(|s| *s != inst.goal)
            .unwrap();
        let trace = render_all(&domain, &[inst.init.clone(), other]);
        let v = judge(&domain, inst, Some(&trace));
        assert!(v.found && !v.valid);
        assert!(v.failure_reason.contains("goal"), "{}", v.failure_reason);
        assert_eq!(v.optimal, Some(false));
    }

    #[test]
    fn visualize_decodes_denormalizes_and_clips() {
        let net = NetworkConfig {
            image_shape: (1, 15, 15),
            conv_channels: 4,
            kernel: 3,
            action_hidden: 16,
        };
        let lat = LatentConfig {
            f_bits: 8,
            actions: 4,
            classes: 2,
            epsilon: 0.1,
            sigma_rec: 0.1,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            TrainedModel::CubeSpace(CubeSpace::new(net, lat, false, &mut rng));
        let normalizer = Normalizer {
            mean: Array3::from_elem((1, 15, 15), 0.3),
            std: Array3::from_elem((1, 15, 15), 2.0),
        };
        let empty = visualize(&mut model, &Array2::zeros((0, 8)), &normalizer);
        assert!(empty.is_empty());
        let trace = Array2::from_shape_fn((3, 8), |(i, j)| ((i + j) % 2) as f64);
        let frames = visualize(&mut model, &trace, &normalizer);
        assert_eq!(frames.len(), 3);
        for f in &frames {
            assert_eq!(f.dim(), (1, 15, 15));
            assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn image_files_and_contact_sheet_are_written() {
        let domain = Domain::new(DomainSpec::hanoi(3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states = walk(&domain, 3, &mut rng);
        let frames = render_all(&domain, &states);
        let dir = tempfile::tempdir().unwrap();
        let paths = write_image_sequence(&frames, dir.path(), "step").unwrap();
        assert_eq!(paths.len(), 4);
        for p in &paths {
            assert!(p.exists());
        }
        assert!(paths[0].file_name().unwrap().to_str().unwrap().ends_with("step-000.png"));
        let sheet = dir.path().join("sheet.png");
        write_contact_sheet(&frames, &sheet).unwrap();
        let loaded = image::open(&sheet).unwrap();
        assert_eq!(loaded.width() as usize, 2 * 12 + 2);
        assert_eq!(loaded.height() as usize, 2 * 3 + 2);
    }

    #[test]
    fn decoded_noise_tolerance_matches_the_thresholds() {
        // Perturb clean renders with uniform pixel noise under the threshold
        // and confirm frames still parse; push far past it and they must not.
        let domain = Domain::new(DomainSpec::LightsOut { n: 3, cell: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = domain.sample_state(&mut rng);
        let clean = domain.render(&s);
        let jitter = clean.mapv(|v| (v + 0.005).clamp(0.0, 1.0));
        let check = validate_lightsout(&[jitter], 3, 5, None);
        assert!(check.valid, "{}", check.failure_reason);
        let heavy = clean.mapv(|v| (v + 0.2).clamp(0.0, 1.0));
        let check = validate_lightsout(&[heavy], 3, 5, None);
        assert!(!check.valid);
    }

    #[test]
    fn unswirled_frames_stay_inside_the_relaxed_threshold() {
        let domain = Domain::new(DomainSpec::twisted_lights_out(5));
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let states = walk(&domain, 2, &mut rng);
            let check = validate_trace(&domain, &render_all(&domain, &states));
            assert!(check.valid, "{}", check.failure_reason);
            for (parsed, truth) in check.parses.iter().zip(&states) {
                assert_eq!(parsed.as_ref(), Some(truth));
            }
        }
    }

    #[test]
    fn verdict_chain_never_violates_the_ordering() {
        // found=false forces valid=false; optimal Some(true) requires valid.
        let domain = Domain::new(DomainSpec::hanoi(3, 3));
        let instances =
            crate::domains::sample::sample_instances(&domain, 1, 4, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for inst in &instances {
            for found in [false, true] {
                let trace;
                let decoded = if found {
                    let states = walk(&domain, 2, &mut rng);
                    trace = render_all(&domain, &states);
                    Some(trace.as_slice())
                } else {
                    None
                };
                let v = judge(&domain, inst, decoded);
                if v.optimal == Some(true) {
                    assert!(v.valid);
                }
                if v.valid {
                    assert!(v.found);
                }
            }
        }
    }
}
