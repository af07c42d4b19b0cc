//! Ground-truth puzzle environments rendered as images.
//!
//! Each environment pairs a compact configuration type with a deterministic
//! renderer and a neighbor relation over configurations. Everything downstream
//! (transition datasets, planning instances, plan validation) is built from
//! these three pieces, so the renderer must be injective per environment and
//! the neighbor relation symmetric.

use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod sample;

pub use sample::{
    corrupt, sample_instances, sample_transitions, Normalizer, PlanningInstance, Split,
    TransitionDataset, DATASET_FORMAT,
};

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("no states at distance {requested} from the goal; deepest nonempty layer is {max_available}")]
    NoStatesAtDepth { requested: usize, max_available: usize },
    #[error("bad tile atlas: {0}")]
    BadAtlas(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unrecognized dataset format tag {0:?}")]
    Format(String),
}

/// Environment family plus the geometry needed to render it.
///
/// The variants serialize with a `kind` tag so dataset archives stay
/// self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    /// n x n grid of lights; pressing a cell toggles it and its orthogonal
    /// neighbors. Rendered one `cell` x `cell` patch per light.
    LightsOut { n: usize, cell: usize },
    /// LightsOut with a radial swirl distortion applied to the whole frame.
    /// The swirl rotates each pixel about the image center by an angle
    /// proportional to `strength * (1 - r / radius)` (zero beyond the radius,
    /// see [`SWIRL_GAIN`]), with `radius = radius_frac * side`, sampling
    /// bilinearly through the inverse map. Negating `strength` inverts the
    /// distortion up to resampling blur.
    TwistedLightsOut { n: usize, cell: usize, strength: f64, radius_frac: f64 },
    /// Sliding-tile puzzle on a rows x cols board; the blank swaps with an
    /// orthogonally adjacent tile. Tiles are drawn from an atlas of
    /// `tile` x `tile` glyphs, either procedural or user supplied.
    SlidingTile { rows: usize, cols: usize, tile: usize, atlas_seed: u64 },
    /// Towers of Hanoi with `disks` disks and `towers` towers. Any disk
    /// assignment is a state (stacking order on a tower is forced by size),
    /// so there are towers^disks states. A move takes the top disk of one
    /// tower onto a tower whose top disk is larger, or which is empty.
    Hanoi { disks: usize, towers: usize },
}

impl DomainSpec {
    pub fn lights_out(n: usize) -> DomainSpec {
        DomainSpec::LightsOut { n, cell: 9 }
    }

    pub fn twisted_lights_out(n: usize) -> DomainSpec {
        DomainSpec::TwistedLightsOut { n, cell: 9, strength: 3.0, radius_frac: 0.75 }
    }

    pub fn sliding_tile(rows: usize, cols: usize) -> DomainSpec {
        DomainSpec::SlidingTile { rows, cols, tile: 14, atlas_seed: 0 }
    }

    pub fn hanoi(disks: usize, towers: usize) -> DomainSpec {
        DomainSpec::Hanoi { disks, towers }
    }

    /// Short identifier used in reports and file names.
    pub fn name(&self) -> &'static str {
        match self {
            DomainSpec::LightsOut { .. } => "lights_out",
            DomainSpec::TwistedLightsOut { .. } => "twisted_lights_out",
            DomainSpec::SlidingTile { .. } => "sliding_tile",
            DomainSpec::Hanoi { .. } => "hanoi",
        }
    }

    /// Rendered image shape as (channels, height, width).
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match *self {
            DomainSpec::LightsOut { n, cell }
            | DomainSpec::TwistedLightsOut { n, cell, .. } => (1, n * cell, n * cell),
            DomainSpec::SlidingTile { rows, cols, tile, .. } => (1, rows * tile, cols * tile),
            DomainSpec::Hanoi { disks, towers } => {
                (3, disks * HANOI_CELL_H, towers * HANOI_CELL_W)
            }
        }
    }

    pub fn state_count(&self) -> u128 {
        match *self {
            DomainSpec::LightsOut { n, .. } | DomainSpec::TwistedLightsOut { n, .. } => {
                1u128 << (n * n)
            }
            DomainSpec::SlidingTile { rows, cols, .. } => {
                (1..=(rows * cols) as u128).product()
            }
            DomainSpec::Hanoi { disks, towers } => (towers as u128).pow(disks as u32),
        }
    }
}

/// Compact puzzle configuration, the hidden state behind each rendered image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroundTruthState {
    /// Row-major on/off flags, n*n entries.
    Lights(Vec<bool>),
    /// Row-major board positions; entry p is the tile at position p, 0 is the
    /// blank.
    Tiles(Vec<u8>),
    /// Entry i is the tower holding disk i; disk 0 is the smallest.
    Hanoi(Vec<u8>),
}

/// Square glyph images indexed by tile id; id 0 is the blank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAtlas {
    pub side: usize,
    pub tiles: Vec<Array2<f64>>,
}

impl TileAtlas {
    /// Deterministic atlas of high-contrast binary glyphs. Tile 0 is all
    /// black; every other tile is an independent coin-flip pattern seeded by
    /// (seed, id), which makes collisions vanishingly unlikely.
    pub fn procedural(count: usize, side: usize, seed: u64) -> TileAtlas {
        let mut tiles = Vec::with_capacity(count);
        tiles.push(Array2::zeros((side, side)));
        for id in 1..count {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e3779b97f4a7c15));
            tiles.push(Array2::from_shape_fn((side, side), |_| {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }));
        }
        TileAtlas { side, tiles }
    }

    /// Build an atlas from preloaded glyphs; all must be square and equal
    /// sized, values in [0, 1].
    pub fn from_images(tiles: Vec<Array2<f64>>) -> Result<TileAtlas, DomainError> {
        let side = match tiles.first() {
            Some(t) => t.nrows(),
            None => return Err(DomainError::BadAtlas("no tiles given".into())),
        };
        for (id, t) in tiles.iter().enumerate() {
            if t.nrows() != side || t.ncols() != side {
                return Err(DomainError::BadAtlas(format!(
                    "tile {id} is {}x{}, expected {side}x{side}",
                    t.nrows(),
                    t.ncols()
                )));
            }
        }
        Ok(TileAtlas { side, tiles })
    }

    /// Load glyphs from image files, one tile per file in id order, converted
    /// to grayscale in [0, 1].
    pub fn from_image_files<P: AsRef<Path>>(paths: &[P]) -> Result<TileAtlas, DomainError> {
        let mut tiles = Vec::with_capacity(paths.len());
        for p in paths {
            let img = image::open(p.as_ref())
                .map_err(|e| {
                    DomainError::BadAtlas(format!("{}: {e}", p.as_ref().display()))
                })?
                .to_luma8();
            let (w, h) = img.dimensions();
            tiles.push(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
            }));
        }
        TileAtlas::from_images(tiles)
    }
}

/// Pixel height of one disk slot in a Hanoi render.
pub const HANOI_CELL_H: usize = 1;
/// Pixel width of one disk slot in a Hanoi render.
pub const HANOI_CELL_W: usize = 4;
const HANOI_BACKGROUND: f64 = 0.5;

/// A renderable environment: the spec plus any glyph atlas it needs.
#[derive(Debug, Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    pub atlas: Option<TileAtlas>,
}

impl Domain {
    /// Environment with its default (procedural) atlas where one is needed.
    pub fn new(spec: DomainSpec) -> Domain {
        let atlas = match spec {
            DomainSpec::SlidingTile { rows, cols, tile, atlas_seed } => {
                Some(TileAtlas::procedural(rows * cols, tile, atlas_seed))
            }
            _ => None,
        };
        Domain { spec, atlas }
    }

    /// Sliding-tile environment with a user-supplied atlas. The atlas must
    /// have one glyph per board position and match the spec's tile side.
    pub fn with_atlas(spec: DomainSpec, atlas: TileAtlas) -> Result<Domain, DomainError> {
        match spec {
            DomainSpec::SlidingTile { rows, cols, tile, .. } => {
                if atlas.tiles.len() != rows * cols {
                    return Err(DomainError::BadAtlas(format!(
                        "{} tiles for a {rows}x{cols} board",
                        atlas.tiles.len()
                    )));
                }
                if atlas.side != tile {
                    return Err(DomainError::BadAtlas(format!(
                        "atlas side {} does not match spec tile side {tile}",
                        atlas.side
                    )));
                }
                Ok(Domain { spec, atlas: Some(atlas) })
            }
            _ => Err(DomainError::BadAtlas(format!(
                "{} takes no atlas",
                spec.name()
            ))),
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.spec.image_shape()
    }

    /// Deterministic render of a configuration, values in [0, 1].
    pub fn render(&self, config: &GroundTruthState) -> Array3<f64> {
        match (&self.spec, config) {
            (&DomainSpec::LightsOut { n, cell }, GroundTruthState::Lights(bits)) => {
                render_lights(n, cell, bits)
            }
            (
                &DomainSpec::TwistedLightsOut { n, cell, strength, radius_frac },
                GroundTruthState::Lights(bits),
            ) => {
                let plain = render_lights(n, cell, bits);
                let radius = radius_frac * (n * cell) as f64;
                swirl(&plain, strength, radius)
            }
            (&DomainSpec::SlidingTile { rows, cols, tile, .. }, GroundTruthState::Tiles(board)) => {
                let atlas = self.atlas.as_ref().expect("sliding tile domain has an atlas");
                assert_eq!(board.len(), rows * cols, "board size mismatch");
                let mut img = Array3::zeros((1, rows * tile, cols * tile));
                for (pos, &id) in board.iter().enumerate() {
                    let (r, c) = (pos / cols, pos % cols);
                    let glyph = &atlas.tiles[id as usize];
                    img.slice_mut(s![0, r * tile..(r + 1) * tile, c * tile..(c + 1) * tile])
                        .assign(glyph);
                }
                img
            }
            (&DomainSpec::Hanoi { disks, towers }, GroundTruthState::Hanoi(on)) => {
                render_hanoi(disks, towers, on)
            }
            (spec, config) => panic!("config {config:?} does not fit {}", spec.name()),
        }
    }

    /// All configurations one legal move away. The relation is symmetric in
    /// every environment.
    pub fn neighbors(&self, config: &GroundTruthState) -> Vec<GroundTruthState> {
        match (&self.spec, config) {
            (
                &DomainSpec::LightsOut { n, .. } | &DomainSpec::TwistedLightsOut { n, .. },
                GroundTruthState::Lights(bits),
            ) => {
                assert_eq!(bits.len(), n * n, "grid size mismatch");
                (0..n * n)
                    .map(|press| {
                        let mut next = bits.clone();
                        let (r, c) = (press / n, press % n);
                        toggle(&mut next, n, r, c);
                        if r > 0 {
                            toggle(&mut next, n, r - 1, c);
                        }
                        if r + 1 < n {
                            toggle(&mut next, n, r + 1, c);
                        }
                        if c > 0 {
                            toggle(&mut next, n, r, c - 1);
                        }
                        if c + 1 < n {
                            toggle(&mut next, n, r, c + 1);
                        }
                        GroundTruthState::Lights(next)
                    })
                    .collect()
            }
            (&DomainSpec::SlidingTile { rows, cols, .. }, GroundTruthState::Tiles(board)) => {
                let blank = board.iter().position(|&t| t == 0).expect("board has a blank");
                let (r, c) = (blank / cols, blank % cols);
                let mut out = Vec::new();
                let mut push_swap = |r2: usize, c2: usize| {
                    let mut next = board.clone();
                    next.swap(blank, r2 * cols + c2);
                    out.push(GroundTruthState::Tiles(next));
                };
                if r > 0 {
                    push_swap(r - 1, c);
                }
                if r + 1 < rows {
                    push_swap(r + 1, c);
                }
                if c > 0 {
                    push_swap(r, c - 1);
                }
                if c + 1 < cols {
                    push_swap(r, c + 1);
                }
                out
            }
            (&DomainSpec::Hanoi { disks, towers }, GroundTruthState::Hanoi(on)) => {
                assert_eq!(on.len(), disks, "disk count mismatch");
                // Disk ids are ordered by size, so the top of a tower is the
                // smallest disk on it.
                let top = |tower: u8| on.iter().position(|&t| t == tower);
                let mut out = Vec::new();
                for from in 0..towers as u8 {
                    let Some(moving) = top(from) else { continue };
                    for to in 0..towers as u8 {
                        if to == from {
                            continue;
                        }
                        match top(to) {
                            Some(t) if t < moving => continue,
                            _ => {
                                let mut next = on.clone();
                                next[moving] = to;
                                out.push(GroundTruthState::Hanoi(next));
                            }
                        }
                    }
                }
                out
            }
            (spec, config) => panic!("config {config:?} does not fit {}", spec.name()),
        }
    }

    /// The fixed goal used for instance generation: all lights off, tiles in
    /// id order, or every disk on the last tower.
    pub fn canonical_goal(&self) -> GroundTruthState {
        match self.spec {
            DomainSpec::LightsOut { n, .. } | DomainSpec::TwistedLightsOut { n, .. } => {
                GroundTruthState::Lights(vec![false; n * n])
            }
            DomainSpec::SlidingTile { rows, cols, .. } => {
                GroundTruthState::Tiles((0..(rows * cols) as u8).collect())
            }
            DomainSpec::Hanoi { disks, towers } => {
                GroundTruthState::Hanoi(vec![(towers - 1) as u8; disks])
            }
        }
    }

    /// Uniform draw over all configurations (not just those reachable from
    /// the canonical goal).
    pub fn sample_state(&self, rng: &mut ChaCha8Rng) -> GroundTruthState {
        match self.spec {
            DomainSpec::LightsOut { n, .. } | DomainSpec::TwistedLightsOut { n, .. } => {
                GroundTruthState::Lights((0..n * n).map(|_| rng.gen_bool(0.5)).collect())
            }
            DomainSpec::SlidingTile { rows, cols, .. } => {
                let mut board: Vec<u8> = (0..(rows * cols) as u8).collect();
                board.shuffle(rng);
                GroundTruthState::Tiles(board)
            }
            DomainSpec::Hanoi { disks, towers } => GroundTruthState::Hanoi(
                (0..disks).map(|_| rng.gen_range(0..towers as u8)).collect(),
            ),
        }
    }

    pub fn state_count(&self) -> u128 {
        self.spec.state_count()
    }
}

fn toggle(bits: &mut [bool], n: usize, r: usize, c: usize) {
    bits[r * n + c] = !bits[r * n + c];
}

/// Canonical cell image for a single light: black when off, a centered bright
/// dot when on. Shared with the plan validator, which matches observed cells
/// against these two patterns. The dot is a Gaussian bump truncated to zero
/// at the cell's inscribed circle; smooth content keeps resampling transforms
/// such as the swirl nearly exact, and the zero margin keeps cell borders
/// constant across every state.
pub fn light_tile(cell: usize, on: bool) -> Array2<f64> {
    let mut tile = Array2::zeros((cell, cell));
    if !on {
        return tile;
    }
    let c = cell as f64;
    let half = (c - 1.0) / 2.0;
    let sigma = c / 5.5;
    let floor = (-half * half / (2.0 * sigma * sigma)).exp();
    for y in 0..cell {
        for x in 0..cell {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            tile[[y, x]] = ((g - floor) / (1.0 - floor)).max(0.0);
        }
    }
    tile
}

fn render_lights(n: usize, cell: usize, bits: &[bool]) -> Array3<f64> {
    assert_eq!(bits.len(), n * n, "grid size mismatch");
    let on = light_tile(cell, true);
    let mut img = Array3::zeros((1, n * cell, n * cell));
    for (i, &lit) in bits.iter().enumerate() {
        if lit {
            let (r, c) = (i / n, i % n);
            img.slice_mut(s![0, r * cell..(r + 1) * cell, c * cell..(c + 1) * cell])
                .assign(&on);
        }
    }
    img
}

fn render_hanoi(disks: usize, towers: usize, on: &[u8]) -> Array3<f64> {
    assert_eq!(on.len(), disks, "disk count mismatch");
    let (c, h, w) = (3, disks * HANOI_CELL_H, towers * HANOI_CELL_W);
    let mut img = Array3::from_elem((c, h, w), HANOI_BACKGROUND);
    for tower in 0..towers as u8 {
        // Bottom of the stack is the largest disk on the tower.
        let stacked: Vec<usize> =
            (0..disks).rev().filter(|&d| on[d] == tower).collect();
        for (level, &disk) in stacked.iter().enumerate() {
            let color = disk_color(disk, disks);
            let y = h - (level + 1) * HANOI_CELL_H;
            let x = tower as usize * HANOI_CELL_W;
            for (ch, &value) in color.iter().enumerate() {
                img.slice_mut(s![ch, y..y + HANOI_CELL_H, x..x + HANOI_CELL_W])
                    .fill(value);
            }
        }
    }
    img
}

/// Fully saturated hue wheel color for disk i of `disks`, distinct per disk
/// and distinct from the gray background.
pub fn disk_color(i: usize, disks: usize) -> [f64; 3] {
    let h6 = 6.0 * i as f64 / disks as f64;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as usize % 6 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Fixed damping applied to the swirl angle. The rotation angle is
/// proportional to `strength * (1 - r / radius)`; this constant sets the
/// proportionality so that content inside the image's inscribed circle never
/// rotates out of the frame at the default radius, keeping the transform
/// genuinely invertible on rendered frames. Without it, corner-region pixels
/// leave the square and clamp-sampling destroys them.
pub const SWIRL_GAIN: f64 = 0.12;

/// Rotate each pixel about the image center by an angle proportional to
/// `strength * (1 - r / radius)` (zero beyond the radius, see [`SWIRL_GAIN`]),
/// sampling the source bilinearly through the inverse map.
/// `swirl(swirl(x, s, r), -s, r)` recovers x up to resampling blur.
pub fn swirl(image: &Array3<f64>, strength: f64, radius: f64) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r = (dy * dy + dx * dx).sqrt();
            let angle = if r < radius {
                SWIRL_GAIN * strength * (1.0 - r / radius)
            } else {
                0.0
            };
            let (sin, cos) = angle.sin_cos();
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            for ch in 0..c {
                out[[ch, y, x]] = bilinear(image, ch, sy, sx);
            }
        }
    }
    out
}

/// Inverse of [`swirl`] with the same parameters, up to resampling blur.
pub fn unswirl(image: &Array3<f64>, strength: f64, radius: f64) -> Array3<f64> {
    swirl(image, -strength, radius)
}

fn bilinear(image: &Array3<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = image.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
    let bottom = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}
