use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Foreground fraction every random scene must fall in.
pub const FG_RANGE: (f64, f64) = (0.02, 0.6);

const PLACEMENT_TRIES: usize = 64;
const SCENE_TRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// 1 to 4 shapes at seeded positions.
    Random,
    /// A single disk inscribed in the canvas.
    FullCanvasDisk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub layout: Layout,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            layout: Layout::Random,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene size {}×{} below the 32×32 minimum",
                self.height, self.width
            )));
        }
        if !(1 <= self.min_objects && self.min_objects <= self.max_objects && self.max_objects <= 4) {
            return Err(Error::Config(format!(
                "object count range {}..={} must lie in 1..=4",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Bounding box `[top, left, height, width]` in pixels.
    pub bbox: [f64; 4],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub background_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// `1×H×W` in `{0, 1}`.
    pub mask: Tensor,
    pub descriptor: SceneDescriptor,
}

impl SceneObject {
    /// Whether the pixel centre `(y, x)` lies inside the shape.
    fn contains(&self, y: f64, x: f64) -> bool {
        let [top, left, h, w] = self.bbox;
        let (u, v) = ((x - left) / w, (y - top) / h);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disk => {
                let (du, dv) = (u - 0.5, v - 0.5);
                du * du + dv * dv <= 0.25
            }
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }

    fn overlaps(&self, other: &SceneObject) -> bool {
        let [t1, l1, h1, w1] = self.bbox;
        let [t2, l2, h2, w2] = other.bbox;
        t1 < t2 + h2 && t2 < t1 + h1 && l1 < l2 + w2 && l2 < l1 + w1
    }
}

/// Fully saturated colour of hue `h ∈ [0, 1)` at brightness `v`.
fn saturated(h: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Grey low-frequency field plus a faint oriented stripe texture.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    let tint: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let period: f64 = rng.gen_range(3.0..6.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let low: f64 = waves
                .iter()
                .map(|&(ky, kx, ph, amp)| amp * (std::f64::consts::TAU * (ky * fy + kx * fx) + ph).sin())
                .sum();
            let stripe = 0.03 * (std::f64::consts::TAU * (ca * x as f64 + sa * y as f64) / period).sin();
            for (c, t) in tint.iter().enumerate() {
                out[c * h * w + y * w + x] = (0.5 + low + stripe + t).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn random_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Vec<SceneObject>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let side = h.min(w);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Triangle,
        };
        let color = saturated(rng.gen_range(0.0..1.0), rng.gen_range(0.8..1.0));
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let bh = rng.gen_range(0.18..0.45) * side;
            let bw = if kind == ShapeKind::Disk {
                bh
            } else {
                rng.gen_range(0.18..0.45) * side
            };
            let top = rng.gen_range(0.0..=(h - bh));
            let left = rng.gen_range(0.0..=(w - bw));
            let o = SceneObject {
                kind,
                bbox: [top, left, bh, bw],
                color,
            };
            (!objects.iter().any(|p| p.overlaps(&o))).then_some(o)
        })?;
        objects.push(placed);
    }
    Some(objects)
}

fn render(spec: &SceneSpec, objects: &[SceneObject], bg: Vec<f64>) -> Result<(Tensor, Tensor)> {
    let (h, w) = (spec.height, spec.width);
    let mut image = bg;
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(o) = objects.iter().rev().find(|o| o.contains(cy, cx)) {
                mask[y * w + x] = 1.0;
                for c in 0..3 {
                    image[c * h * w + y * w + x] = o.color[c];
                }
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], image)?, Tensor::new(&[1, h, w], mask)?))
}

/// Generate one scene; a pure function of `(seed, spec)`.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background_seed: u64 = rng.gen();
    let bg = background(&mut ChaCha8Rng::seed_from_u64(background_seed), spec.height, spec.width);
    if spec.layout == Layout::FullCanvasDisk {
        let object = SceneObject {
            kind: ShapeKind::Disk,
            bbox: [0.0, 0.0, spec.height as f64, spec.width as f64],
            color: saturated(rng.gen_range(0.0..1.0), 1.0),
        };
        let (image, mask) = render(spec, std::slice::from_ref(&object), bg)?;
        return Ok(SyntheticScene {
            image,
            mask,
            descriptor: SceneDescriptor {
                seed,
                objects: vec![object],
                background_seed,
            },
        });
    }
    for _ in 0..SCENE_TRIES {
        let Some(objects) = random_objects(&mut rng, spec) else {
            continue;
        };
        let (image, mask) = render(spec, &objects, bg.clone())?;
        let fg = mask.mean();
        if (FG_RANGE.0..=FG_RANGE.1).contains(&fg) {
            return Ok(SyntheticScene {
                image,
                mask,
                descriptor: SceneDescriptor {
                    seed,
                    objects,
                    background_seed,
                },
            });
        }
    }
    Err(Error::Config(format!(
        "could not place {}..={} objects on a {}×{} canvas (seed {seed})",
        spec.min_objects, spec.max_objects, spec.height, spec.width
    )))
}
