//! Scene sampling and its flat-vector serialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.10, 0.10], // red
    [0.10, 0.75, 0.10], // green
    [0.15, 0.25, 0.90], // blue
    [0.90, 0.85, 0.10], // yellow
    [0.85, 0.10, 0.85], // magenta
    [0.10, 0.80, 0.85], // cyan
    [0.90, 0.50, 0.10], // orange
    [0.85, 0.85, 0.85], // white
];

pub const COLOR_NAMES: [&str; 8] =
    ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"];

pub const MAX_SHAPES: usize = 4;
pub const MIN_RADIUS: f32 = 0.08;
pub const MAX_RADIUS: f32 = 0.3;

/// Serialized scene length: 2 background colors + count + 4 shapes × 6.
pub const SCENE_VEC_LEN: usize = 6 + 1 + MAX_SHAPES * 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn code(self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_code(c: usize) -> Result<Self> {
        match c {
            0 => Ok(ShapeKind::Circle),
            1 => Ok(ShapeKind::Square),
            2 => Ok(ShapeKind::Triangle),
            other => Err(Error::format(format!("bad shape kind code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    /// Center in unit-square coordinates.
    pub cx: f32,
    pub cy: f32,
    /// Half-extent: circle radius, square half-side, triangle half-height.
    pub radius: f32,
    /// Depth rank, 0 = nearest; ranks form a permutation of 0..n.
    pub rank: usize,
}

impl Shape {
    /// Point-in-shape test in unit-square coordinates. The triangle is
    /// isoceles, apex up, inscribed in the center±radius box.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= self.radius,
            ShapeKind::Triangle => {
                let down = dy + self.radius; // distance below the apex
                down >= 0.0 && dy <= self.radius && dx.abs() <= 0.5 * down
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bg_top: [f32; 3],
    pub bg_bottom: [f32; 3],
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.shapes.len();
        if n == 0 || n > MAX_SHAPES {
            return Err(Error::domain(format!("scene must have 1..=4 shapes, has {n}")));
        }
        let mut seen = [false; MAX_SHAPES];
        for s in &self.shapes {
            if s.rank >= n || seen[s.rank] {
                return Err(Error::domain("shape ranks must form a permutation"));
            }
            seen[s.rank] = true;
            if s.color >= PALETTE.len() {
                return Err(Error::domain(format!("color index {} out of range", s.color)));
            }
            if !(MIN_RADIUS..=MAX_RADIUS).contains(&s.radius) {
                return Err(Error::domain(format!("radius {} outside [{MIN_RADIUS}, {MAX_RADIUS}]", s.radius)));
            }
            let inside = s.cx - s.radius >= 0.0
                && s.cx + s.radius <= 1.0
                && s.cy - s.radius >= 0.0
                && s.cy + s.radius <= 1.0;
            if !inside {
                return Err(Error::domain("shape exceeds the unit square"));
            }
        }
        Ok(())
    }

    /// Flat (31,) f32 encoding; exact because every field is f32 or a
    /// small integer.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(SCENE_VEC_LEN);
        v.extend_from_slice(&self.bg_top);
        v.extend_from_slice(&self.bg_bottom);
        v.push(self.shapes.len() as f32);
        for s in &self.shapes {
            v.extend_from_slice(&[
                s.kind.code() as f32,
                s.color as f32,
                s.cx,
                s.cy,
                s.radius,
                s.rank as f32,
            ]);
        }
        v.resize(SCENE_VEC_LEN, 0.0);
        v
    }

    pub fn from_vec(v: &[f32]) -> Result<Scene> {
        if v.len() != SCENE_VEC_LEN {
            return Err(Error::format(format!(
                "scene vector length {} != {SCENE_VEC_LEN}",
                v.len()
            )));
        }
        let n = v[6] as usize;
        if n == 0 || n > MAX_SHAPES || v[6] != n as f32 {
            return Err(Error::format(format!("bad scene shape count {}", v[6])));
        }
        let mut shapes = Vec::with_capacity(n);
        for i in 0..n {
            let b = 7 + i * 6;
            shapes.push(Shape {
                kind: ShapeKind::from_code(v[b] as usize)?,
                color: v[b + 1] as usize,
                cx: v[b + 2],
                cy: v[b + 3],
                radius: v[b + 4],
                rank: v[b + 5] as usize,
            });
        }
        let scene = Scene {
            bg_top: [v[0], v[1], v[2]],
            bg_bottom: [v[3], v[4], v[5]],
            shapes,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Deterministic scene sampling. Draw order is fixed and part of the
/// reproducibility contract: shape count, background colors, shape colors
/// (without replacement), per-shape (kind, radius, cx, cy), rank shuffle.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=MAX_SHAPES);
    let mut bg = [0.0f32; 6];
    for c in bg.iter_mut() {
        *c = rng.gen_range(0.1f32..0.3);
    }
    // Distinct colors keep chroma contrast between any two regions.
    let mut pool: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut shapes = Vec::with_capacity(n);
    for &color in pool.iter().take(n) {
        let kind = match rng.gen_range(0..3u32) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let radius = rng.gen_range(MIN_RADIUS..MAX_RADIUS);
        let cx = rng.gen_range(radius..(1.0 - radius));
        let cy = rng.gen_range(radius..(1.0 - radius));
        shapes.push(Shape { kind, color, cx, cy, radius, rank: 0 });
    }
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ranks.swap(i, j);
    }
    for (s, r) in shapes.iter_mut().zip(ranks) {
        s.rank = r;
    }
    Scene {
        bg_top: [bg[0], bg[1], bg[2]],
        bg_bottom: [bg[3], bg[4], bg[5]],
        shapes,
    }
}
