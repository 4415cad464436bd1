//! Synthetic moving-shape videos with exact flow and masks.
//!
//! Pixels are signed, in `[-1, 1]`; named colors sit on the corners and edge
//! midpoints of that cube.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Mask;
use crate::rng::{normal, SeedStream};
use crate::scalar::Scalar;

pub const COLORS: [(&str, [f64; 3]); 11] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [-1.0, -1.0, -1.0]),
    ("gray", [0.0, 0.0, 0.0]),
    ("orange", [1.0, 0.0, -1.0]),
    ("purple", [0.0, -1.0, 1.0]),
];

pub fn color(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: String,
    /// Side length (square) or diameter (circle) in pixels.
    pub size: usize,
    /// Top-left corner `(x, y)` in frame 0.
    pub origin: (i64, i64),
    /// Pixels per frame `(dx, dy)`.
    pub velocity: (i64, i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub shapes: Vec<ShapeSpec>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: String,
    /// Standard deviation of a static seeded texture added to the background.
    #[serde(default)]
    pub noise: f64,
}

impl SyntheticScene {
    /// Two identical red squares moving apart; the instance-editing scene.
    pub fn two_squares(frames: usize, size: usize) -> Self {
        let s = (size / 4).max(2);
        let row = (size as i64 - s as i64) / 2;
        Self {
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Square,
                    color: "red".into(),
                    size: s,
                    origin: (1, row - 1),
                    velocity: (1, 0),
                },
                ShapeSpec {
                    kind: ShapeKind::Square,
                    color: "red".into(),
                    size: s,
                    origin: (size as i64 - s as i64 - 2, row + 1),
                    velocity: (0, 1),
                },
            ],
            frames,
            height: size,
            width: size,
            background: "gray".into(),
            noise: 0.0,
        }
    }

    /// A red square and a blue circle; the clustering scene.
    pub fn square_and_circle(frames: usize, size: usize) -> Self {
        let mut scene = Self::two_squares(frames, size);
        scene.shapes[1].kind = ShapeKind::Circle;
        scene.shapes[1].color = "blue".into();
        scene.shapes[1].size = (size / 3).max(3);
        scene.shapes[1].origin.0 = size as i64 - scene.shapes[1].size as i64 - 2;
        scene
    }
}

pub struct SynthVideo<T> {
    /// `(frames, h, w, 3)`.
    pub frames: Array4<T>,
    /// Per consecutive pair, `(h, w, 2)` displacements `(dx, dy)` of frame
    /// `i` pixels into frame `i + 1`.
    pub flow: Vec<Array3<T>>,
    /// `masks[frame][shape]`, visible pixels only, so disjoint.
    pub masks: Vec<Vec<Mask>>,
}

fn covers(shape: &ShapeSpec, left: i64, top: i64, x: usize, y: usize) -> bool {
    let (x, y) = (x as i64, y as i64);
    let s = shape.size as i64;
    match shape.kind {
        ShapeKind::Square => x >= left && x < left + s && y >= top && y < top + s,
        ShapeKind::Circle => {
            let r = shape.size as f64 / 2.0;
            let dx = x as f64 + 0.5 - (left as f64 + r);
            let dy = y as f64 + 0.5 - (top as f64 + r);
            dx * dx + dy * dy <= r * r
        }
    }
}

/// Velocity shrunk toward zero, per axis, until the shape keeps a 1 px margin
/// in every frame.
fn clipped_velocity(shape: &ShapeSpec, frames: usize, extent: (usize, usize)) -> (i64, i64) {
    let span = frames.saturating_sub(1) as i64;
    let fit = |o: i64, v: i64, len: usize| {
        let hi = len as i64 - 1 - shape.size as i64;
        let mut v = v;
        while v != 0 && !(1..=hi).contains(&(o + v * span)) {
            v -= v.signum();
        }
        v
    };
    (fit(shape.origin.0, shape.velocity.0, extent.1), fit(shape.origin.1, shape.velocity.1, extent.0))
}

pub fn synth_video<T: Scalar>(scene: &SyntheticScene, seed: u64) -> Result<SynthVideo<T>> {
    let (h, w, n) = (scene.height, scene.width, scene.frames);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidScene("frames and size must be positive".into()));
    }
    let bg = color(&scene.background)
        .ok_or_else(|| Error::InvalidScene(format!("unknown color {:?}", scene.background)))?;
    let mut colors = Vec::new();
    let mut velocities = Vec::new();
    for (i, s) in scene.shapes.iter().enumerate() {
        let c = color(&s.color).ok_or_else(|| Error::InvalidScene(format!("unknown color {:?}", s.color)))?;
        let hi_x = w as i64 - 1 - s.size as i64;
        let hi_y = h as i64 - 1 - s.size as i64;
        if s.size == 0 || !(1..=hi_x).contains(&s.origin.0) || !(1..=hi_y).contains(&s.origin.1) {
            return Err(Error::InvalidScene(format!("shape {i} out of bounds")));
        }
        colors.push(c);
        velocities.push(clipped_velocity(s, n, (h, w)));
    }
    let mut rng = SeedStream::new(seed).substream("scene");
    let texture = Array3::from_shape_fn((h, w, 3), |_| scene.noise * normal::<f64>(&mut rng));
    let mut frames = Array4::zeros((n, h, w, 3));
    let mut owner = vec![Array2::<Option<usize>>::from_elem((h, w), None); n];
    for (f, own) in owner.iter_mut().enumerate() {
        for (i, s) in scene.shapes.iter().enumerate() {
            let (vx, vy) = velocities[i];
            let left = s.origin.0 + vx * f as i64;
            let top = s.origin.1 + vy * f as i64;
            for y in 0..h {
                for x in 0..w {
                    if covers(s, left, top, x, y) {
                        own[[y, x]] = Some(i);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = match own[[y, x]] {
                        Some(i) => colors[i][c],
                        None => (bg[c] + texture[[y, x, c]]).clamp(-1.0, 1.0),
                    };
                    frames[[f, y, x, c]] = T::of(v);
                }
            }
        }
    }
    let masks = owner
        .iter()
        .map(|own| {
            (0..scene.shapes.len())
                .map(|i| own.mapv(|o| o == Some(i)))
                .collect()
        })
        .collect();
    let flow = owner[..n.saturating_sub(1)]
        .iter()
        .map(|own| {
            let mut fl = Array3::zeros((h, w, 2));
            for ((y, x), o) in own.indexed_iter() {
                if let Some(i) = o {
                    fl[[y, x, 0]] = T::of(velocities[*i].0 as f64);
                    fl[[y, x, 1]] = T::of(velocities[*i].1 as f64);
                }
            }
            fl
        })
        .collect();
    Ok(SynthVideo { frames, flow, masks })
}
