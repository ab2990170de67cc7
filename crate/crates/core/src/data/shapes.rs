//! Procedural shape scenes: one target shape of a known class over a noisy
//! background, optionally cluttered with distractor shapes of other classes.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::mask::BinaryMask;

pub const MIN_SCENE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    HBar,
    VBar,
    Diamond,
    LShape,
    TShape,
    UShape,
    DotGrid,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::HBar,
        ShapeClass::VBar,
        ShapeClass::Diamond,
        ShapeClass::LShape,
        ShapeClass::TShape,
        ShapeClass::UShape,
        ShapeClass::DotGrid,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::HBar => "h-bar",
            ShapeClass::VBar => "v-bar",
            ShapeClass::Diamond => "diamond",
            ShapeClass::LShape => "L-shape",
            ShapeClass::TShape => "T-shape",
            ShapeClass::UShape => "U-shape",
            ShapeClass::DotGrid => "dot-grid",
        }
    }

    /// Base color of the class; each rendered instance jitters around it.
    pub fn base_color(self) -> [f64; 3] {
        match self {
            ShapeClass::Circle => [0.90, 0.12, 0.12],
            ShapeClass::Square => [0.12, 0.80, 0.15],
            ShapeClass::Triangle => [0.15, 0.25, 0.95],
            ShapeClass::Cross => [0.95, 0.90, 0.12],
            ShapeClass::Ring => [0.90, 0.12, 0.90],
            ShapeClass::HBar => [0.12, 0.90, 0.90],
            ShapeClass::VBar => [1.00, 0.55, 0.08],
            ShapeClass::Diamond => [0.55, 0.15, 0.75],
            ShapeClass::LShape => [0.95, 0.95, 0.95],
            ShapeClass::TShape => [0.10, 0.50, 0.50],
            ShapeClass::UShape => [1.00, 0.62, 0.78],
            ShapeClass::DotGrid => [0.60, 0.60, 0.05],
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Placement of one shape in pixel coordinates.
///
/// `half_extent` is the half side of the shape's bounding square; pixel
/// `(x, y)` belongs to the shape when its center `(x + 0.5, y + 0.5)` does.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeGeometry {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    pub half_extent: f64,
    pub color: [f64; 3],
}

impl ShapeGeometry {
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        let s = self.half_extent;
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (ax, ay) = (dx.abs(), dy.abs());
        let in_box = ax <= s && ay <= s;
        match self.class {
            ShapeClass::Circle => dx * dx + dy * dy <= s * s,
            ShapeClass::Square => in_box,
            ShapeClass::Triangle => dy <= s && ax <= (dy + s) / 2.0,
            ShapeClass::Cross => {
                let t = 0.35 * s;
                in_box && (ay <= t || ax <= t)
            }
            ShapeClass::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= s * s && r2 >= 0.25 * s * s
            }
            ShapeClass::HBar => ax <= s && ay <= 0.4 * s,
            ShapeClass::VBar => ay <= s && ax <= 0.4 * s,
            ShapeClass::Diamond => ax + ay <= s,
            ShapeClass::LShape => in_box && (dx <= -0.2 * s || dy >= 0.2 * s),
            ShapeClass::TShape => in_box && (dy <= -0.3 * s || ax <= 0.35 * s),
            ShapeClass::UShape => in_box && (ax >= 0.3 * s || dy >= 0.3 * s),
            ShapeClass::DotGrid => {
                let r = 0.42 * s;
                let (ox, oy) = (ax - 0.55 * s, ay - 0.55 * s);
                ox * ox + oy * oy <= r * r
            }
        }
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        self.contains_point(x as f64 + 0.5, y as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneOptions {
    pub distractors: bool,
    /// Half-amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            distractors: true,
            noise: 0.04,
        }
    }
}

/// A rendered scene together with the parameters that produced it.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `[H × W × 3]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub mask: BinaryMask,
    pub target: ShapeGeometry,
    pub distractors: Vec<ShapeGeometry>,
}

const TARGET_SCALE: (f64, f64) = (0.25, 0.35);
const DISTRACTOR_SCALE: (f64, f64) = (0.12, 0.22);
const COLOR_JITTER: f64 = 0.06;

fn jittered(rng: &mut impl Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0))
}

/// Renders the scene for `(class, seed, size)`; see [`render_scene`].
pub fn render_scene_with(class: ShapeClass, seed: u64, size: (usize, usize), opts: SceneOptions) -> Result<Scene> {
    let (h, w) = size;
    if h < MIN_SCENE_SIZE || w < MIN_SCENE_SIZE {
        return Err(Error::SizeTooSmall(h, w));
    }
    let mut rng = rng_for(seed, "scene", &[class.id() as u64, h as u64, w as u64]);
    let side = h.min(w) as f64;

    let s = side * rng.gen_range(TARGET_SCALE.0..TARGET_SCALE.1);
    let target = ShapeGeometry {
        class,
        cx: rng.gen_range(s..w as f64 - s),
        cy: rng.gen_range(s..h as f64 - s),
        half_extent: s,
        color: jittered(&mut rng, class.base_color()),
    };

    let background: f64 = rng.gen_range(0.05..0.25);
    let n_distractors = if opts.distractors { rng.gen_range(0..=3) } else { 0 };
    let distractors: Vec<ShapeGeometry> = (0..n_distractors)
        .map(|_| {
            let other = loop {
                let c = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
                if c != class {
                    break c;
                }
            };
            let s = side * rng.gen_range(DISTRACTOR_SCALE.0..DISTRACTOR_SCALE.1);
            ShapeGeometry {
                class: other,
                cx: rng.gen_range(0.5 * s..w as f64 - 0.5 * s),
                cy: rng.gen_range(0.5 * s..h as f64 - 0.5 * s),
                half_extent: s,
                color: jittered(&mut rng, other.base_color()),
            }
        })
        .collect();

    let mut pixels = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut color = [background; 3];
            for d in &distractors {
                if d.contains_pixel(x, y) {
                    color = d.color;
                }
            }
            let on_target = target.contains_pixel(x, y);
            if on_target {
                color = target.color;
            }
            mask.push(on_target);
            for c in color {
                let noise = if opts.noise > 0.0 { rng.gen_range(-opts.noise..opts.noise) } else { 0.0 };
                pixels.push((c + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Scene {
        image: Tensor::from_vec(&[h, w, 3], pixels)?,
        mask: BinaryMask::from_bools(h, w, mask),
        target,
        distractors,
    })
}

/// Renders one target shape of `class` with randomized position, scale and
/// color, 0–3 distractors of other classes beneath it, and low-amplitude
/// background noise. The mask covers exactly the target's pixels.
/// Deterministic in `(class, seed, size)`.
pub fn render_scene(class: ShapeClass, seed: u64, size: (usize, usize)) -> Result<(Tensor<f64>, BinaryMask)> {
    let scene = render_scene_with(class, seed, size, SceneOptions::default())?;
    Ok((scene.image, scene.mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let (a, ma) = render_scene(ShapeClass::Ring, 42, (64, 64)).unwrap();
        let (b, mb) = render_scene(ShapeClass::Ring, 42, (64, 64)).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ma, mb);
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(matches!(
            render_scene(ShapeClass::Circle, 0, (31, 64)).unwrap_err(),
            Error::SizeTooSmall(31, 64)
        ));
    }

    #[test]
    fn foreground_fraction_in_range_over_sweep() {
        for seed in 0..1000u64 {
            let class = ShapeClass::ALL[(seed % 12) as usize];
            let (_, mask) = render_scene(class, seed, (64, 64)).unwrap();
            let frac = mask.count() as f64 / mask.len() as f64;
            assert!((0.02..=0.5).contains(&frac), "{class} seed {seed}: {frac}");
        }
    }

    #[test]
    fn square_mask_is_the_analytic_rectangle() {
        let opts = SceneOptions {
            distractors: false,
            ..SceneOptions::default()
        };
        for seed in 0..50 {
            let scene = render_scene_with(ShapeClass::Square, seed, (64, 48), opts).unwrap();
            let g = &scene.target;
            let s = g.half_extent;
            // Pixel centers x + 0.5 inside [cx − s, cx + s].
            let x0 = (g.cx - s - 0.5).ceil() as usize;
            let x1 = (g.cx + s - 0.5).floor() as usize;
            let y0 = (g.cy - s - 0.5).ceil() as usize;
            let y1 = (g.cy + s - 0.5).floor() as usize;
            for y in 0..64 {
                for x in 0..48 {
                    let expected = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
                    assert_eq!(scene.mask.get(y, x), expected, "seed {seed} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn image_values_in_unit_interval() {
        let (img, _) = render_scene(ShapeClass::LShape, 9, (40, 56)).unwrap();
        assert_eq!(img.shape(), &[40, 56, 3]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
