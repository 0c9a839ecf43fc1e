//! Grid scenes of colored shapes and their deterministic rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CromeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Square => "squares",
            Shape::Circle => "circles",
            Shape::Triangle => "triangles",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 200, 30],
        }
    }
}

pub const BACKGROUND: [u8; 3] = [240, 240, 240];

pub const CORNER_WORDS: [&str; 4] = ["topleft", "topright", "bottomleft", "bottomright"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

/// Square grid of cells in row-major order; each cell is empty or holds one
/// object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: usize,
    pub cells: Vec<Option<Object>>,
}

impl SceneSpec {
    pub fn new(grid: usize, cells: Vec<Option<Object>>) -> Result<Self> {
        if cells.len() != grid * grid {
            return Err(CromeError::Data(format!(
                "{} cells for a {grid}x{grid} grid",
                cells.len()
            )));
        }
        if cells.iter().all(Option::is_none) {
            return Err(CromeError::Data("scene must hold at least one object".into()));
        }
        Ok(Self { grid, cells })
    }

    /// Random scene with between `min` and `max` objects.
    pub fn random<R: Rng + ?Sized>(grid: usize, min: usize, max: usize, rng: &mut R) -> Self {
        let n_cells = grid * grid;
        let count = rng.random_range(min.max(1)..=max.min(n_cells));
        let mut order: Vec<usize> = (0..n_cells).collect();
        for i in (1..n_cells).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut cells = vec![None; n_cells];
        for &c in &order[..count] {
            cells[c] = Some(Object {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: Color::ALL[rng.random_range(0..4)],
            });
        }
        Self { grid, cells }
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }

    pub fn count_where(&self, pred: impl Fn(&Object) -> bool) -> usize {
        self.objects().filter(|(_, o)| pred(o)).count()
    }

    /// Position word for a cell of a 2x2 grid.
    pub fn corner_word(&self, cell: usize) -> Option<&'static str> {
        (self.grid == 2).then(|| CORNER_WORDS[cell])
    }
}

/// 8-bit RGB raster, row-major `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: Vec<u8>,
}

impl RawImage {
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.levels[i..i + self.channels]
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update((self.channels as u64).to_le_bytes());
        h.update(&self.levels);
        hex::encode(h.finalize())
    }
}

/// Whether pixel `(y, x)` of a `cell`-sized cell is covered by `shape`.
fn covers(shape: Shape, cell: usize, y: usize, x: usize) -> bool {
    let margin = (cell / 8).max(1);
    let lo = margin;
    let hi = cell - margin;
    if y < lo || y >= hi || x < lo || x >= hi {
        return false;
    }
    let c = cell as f64 / 2.0;
    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = c - margin as f64;
            (fy - c).powi(2) + (fx - c).powi(2) <= r * r
        }
        Shape::Triangle => {
            // apex at the top center, base along the bottom margin
            let span = (hi - lo) as f64;
            let half = (fy - lo as f64) / span * (c - margin as f64);
            (fx - c).abs() <= half
        }
    }
}

pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<RawImage> {
    if size < 8 * spec.grid {
        return Err(CromeError::Contract(format!(
            "image size {size} below 8 pixels per grid cell ({} cells per side)",
            spec.grid
        )));
    }
    let cell = size / spec.grid;
    let mut levels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (cy, cx) = (y / cell, x / cell);
            let rgb = if cy < spec.grid && cx < spec.grid {
                match spec.cells[cy * spec.grid + cx] {
                    Some(o) if covers(o.shape, cell, y % cell, x % cell) => o.color.rgb(),
                    _ => BACKGROUND,
                }
            } else {
                BACKGROUND
            };
            levels.extend_from_slice(&rgb);
        }
    }
    Ok(RawImage { height: size, width: size, channels: 3, levels })
}
