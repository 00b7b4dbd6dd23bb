//! Binary sprite renderer with five generative factors.

use std::f64::consts::TAU;

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 32;
/// Largest sprite half-extent as a fraction of the resolution.
const MAX_EXTENT: f64 = 0.2;
const EDGE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Ellipse,
    /// Stands in for the heart of the original sprite set.
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Shape> {
        Shape::ALL.get(i).copied().ok_or_else(|| Error::Data(format!("shape index {i} out of range")))
    }
}

/// Continuous factors lie in `[0, 1]`; rotation is a fraction of a full turn
/// and `pos_y = 1` is the top of the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteFactors {
    pub shape: Shape,
    pub size: f64,
    pub rotation: f64,
    pub pos_x: f64,
    pub pos_y: f64,
}

pub const FACTOR_SCHEMA: [&str; 7] =
    ["shape_square", "shape_ellipse", "shape_triangle", "size", "rotation", "pos_x", "pos_y"];

impl SpriteFactors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("size", self.size), ("rotation", self.rotation), ("pos_x", self.pos_x), ("pos_y", self.pos_y)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("sprite {name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Shape one-hot followed by the four continuous factors.
    pub fn encode(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        out[self.shape.index()] = 1.0;
        out[3] = self.size;
        out[4] = self.rotation;
        out[5] = self.pos_x;
        out[6] = self.pos_y;
        out
    }
}

/// Pixel-space center of a sprite. The margin keeps the largest sprite inside
/// the frame.
pub fn sprite_center(f: &SpriteFactors, resolution: usize) -> (f64, f64) {
    let r = resolution as f64;
    let h = MAX_EXTENT * r;
    (h + f.pos_x * (r - 2.0 * h), h + (1.0 - f.pos_y) * (r - 2.0 * h))
}

/// Width of the band sprite centers can occupy along each axis.
pub fn travel(resolution: usize) -> f64 {
    resolution as f64 * (1.0 - 2.0 * MAX_EXTENT)
}

/// Row-major `resolution²` image of 0/1 pixels.
pub fn render_sprite(f: &SpriteFactors, resolution: usize) -> Result<Vec<f64>> {
    if resolution < 16 {
        return Err(Error::Contract(format!("sprite resolution {resolution} below 16")));
    }
    f.validate()?;
    let mut img = vec![0.0; resolution * resolution];
    let s = f.size * MAX_EXTENT * resolution as f64;
    if s <= 0.0 {
        return Ok(img);
    }
    let (cx, cy) = sprite_center(f, resolution);
    let (sin, cos) = (TAU * f.rotation).sin_cos();
    for py in 0..resolution {
        for px in 0..resolution {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside(f.shape, u, v, s) {
                img[py * resolution + px] = 1.0;
            }
        }
    }
    Ok(img)
}

fn inside(shape: Shape, u: f64, v: f64, s: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 0.75 * s + EDGE_EPS && v.abs() <= 0.75 * s + EDGE_EPS,
        Shape::Ellipse => (u / s).powi(2) + (v / (0.5 * s)).powi(2) <= 1.0 + EDGE_EPS,
        Shape::Triangle => {
            // Equilateral, circumradius s, apex toward −v (up on screen).
            let half = 0.5 * s;
            let edge = |nx: f64, ny: f64| nx * u + ny * v <= half + EDGE_EPS;
            let c = 3f64.sqrt() / 2.0;
            edge(0.0, 1.0) && edge(c, -0.5) && edge(-c, -0.5)
        }
    }
}
