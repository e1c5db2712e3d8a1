use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::raster::{BinaryMask, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Cross,
        ShapeKind::Diamond,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Radius of the circle enclosing a shape of nominal radius `r`, rounded up.
    pub fn extent(self, r: u32) -> u32 {
        match self {
            ShapeKind::Square => (3 * r).div_ceil(2) + 1,
            _ => r,
        }
    }

    /// Point-in-shape test on a 1/8-pixel fixed-point grid relative to the centre.
    fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // half-pixel margin so radius r covers exactly (2r+1)^2 pixels
            ShapeKind::Square => dx.abs() <= r + 4 && dy.abs() <= r + 4,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Triangle => dy <= r && 2 * dx.abs() <= dy + r,
            ShapeKind::Cross => {
                (3 * dx.abs() <= r && dy.abs() <= r) || (3 * dy.abs() <= r && dx.abs() <= r)
            }
            ShapeKind::Star => star_contains(dx, dy, r),
        }
    }
}

// Unit five-pointed star, vertices scaled by 1024 (outer radius 1, inner 0.45),
// starting at the top and alternating outer/inner.
const STAR_VERTS: [(i64, i64); 10] = [
    (0, -1024),
    (271, -373),
    (974, -316),
    (439, 143),
    (602, 828),
    (0, 461),
    (-602, 828),
    (-439, 143),
    (-974, -316),
    (-271, -373),
];

fn star_contains(dx: i64, dy: i64, r: i64) -> bool {
    // Even-odd crossing test in integer arithmetic with the point scaled by 1024.
    let (px, py) = (dx * 1024, dy * 1024);
    let mut inside = false;
    for i in 0..STAR_VERTS.len() {
        let (ax, ay) = (STAR_VERTS[i].0 * r, STAR_VERTS[i].1 * r);
        let j = (i + 1) % STAR_VERTS.len();
        let (bx, by) = (STAR_VERTS[j].0 * r, STAR_VERTS[j].1 * r);
        if (ay > py) != (by > py) {
            // x-coordinate of the edge at py compared without division
            let lhs = (px - ax) * (by - ay);
            let rhs = (bx - ax) * (py - ay);
            if (by > ay && lhs < rhs) || (by < ay && lhs > rhs) {
                inside = !inside;
            }
        }
    }
    inside
}

/// One shape placed on the canvas. The centre is the centre of pixel `(cx, cy)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub cx: i32,
    pub cy: i32,
    pub radius: u32,
    pub intensity: u8,
}

impl ShapeInstance {
    /// Pixels whose 4x4 sub-sample coverage is at least one half.
    pub fn rasterize(&self, canvas: usize) -> BinaryMask {
        let r = i64::from(self.radius) * 8;
        BinaryMask::from_fn(canvas, canvas, |x, y| {
            let bx = (x as i64 - i64::from(self.cx)) * 8;
            let by = (y as i64 - i64::from(self.cy)) * 8;
            let mut hits = 0;
            for sy in [-3, -1, 1, 3] {
                for sx in [-3, -1, 1, 3] {
                    hits += i32::from(self.kind.contains(bx + sx, by + sy, r));
                }
            }
            hits >= 8
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub shapes: Vec<ShapeInstance>,
    pub background: u8,
    pub seed: u64,
}

pub const MAX_INSTANCES: usize = 3;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::Validation("empty canvas".into()));
        }
        if !(1..=MAX_INSTANCES).contains(&self.shapes.len()) {
            return Err(Error::Validation(format!(
                "scene has {} instances, expected 1..={MAX_INSTANCES}",
                self.shapes.len()
            )));
        }
        let n = self.canvas as i64;
        for (i, s) in self.shapes.iter().enumerate() {
            let r = i64::from(s.radius);
            let (cx, cy) = (i64::from(s.cx), i64::from(s.cy));
            if s.radius == 0 || cx - r < 0 || cy - r < 0 || cx + r >= n || cy + r >= n {
                return Err(Error::Validation(format!(
                    "shape {i} not fully inside the canvas"
                )));
            }
        }
        for (i, a) in self.shapes.iter().enumerate() {
            for b in &self.shapes[i + 1..] {
                let d2 = i64::from(a.cx - b.cx).pow(2) + i64::from(a.cy - b.cy).pow(2);
                let rs = i64::from(a.radius + b.radius);
                // distance >= 0.8 * (ra + rb)
                if 25 * d2 < 16 * rs * rs {
                    return Err(Error::Validation(
                        "shapes overlap beyond the allowed bound".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn caption(&self) -> Vec<ShapeKind> {
        self.shapes.iter().map(|s| s.kind).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedScene {
    pub image: GrayImage,
    pub caption: Vec<ShapeKind>,
    pub instance_masks: Vec<BinaryMask>,
}

/// Paints shapes in order; each instance mask holds the pixels it finally owns.
pub fn generate_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let n = spec.canvas;
    let mut image = GrayImage::new(n, n, spec.background);
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    for (i, shape) in spec.shapes.iter().enumerate() {
        let m = shape.rasterize(n);
        for (p, &b) in m.bits.iter().enumerate() {
            if b {
                image.pixels[p] = shape.intensity;
                owner[p] = Some(i);
            }
        }
    }
    let instance_masks = (0..spec.shapes.len())
        .map(|i| BinaryMask {
            width: n,
            height: n,
            bits: owner.iter().map(|o| *o == Some(i)).collect(),
        })
        .collect();
    Ok(RenderedScene {
        image,
        caption: spec.caption(),
        instance_masks,
    })
}

/// Parameters of the random scene stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneDistribution {
    pub canvas: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: u32,
    pub max_radius: u32,
    pub intensity_min: u8,
    pub intensity_max: u8,
    pub background: u8,
    /// Extra clearance in pixels between circumscribed circles.
    pub min_gap: u32,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            canvas: 32,
            min_instances: 1,
            max_instances: 2,
            min_radius: 5,
            max_radius: 8,
            intensity_min: 255,
            intensity_max: 255,
            background: 0,
            min_gap: 2,
        }
    }
}

impl SceneDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.min_instances == 0
            || self.min_instances > self.max_instances
            || self.max_instances > MAX_INSTANCES
        {
            return Err(Error::Config("instance range must lie in 1..=3".into()));
        }
        if self.min_radius == 0 || self.min_radius > self.max_radius {
            return Err(Error::Config("radius range is empty".into()));
        }
        if 2 * self.max_radius as usize + 1 > self.canvas {
            return Err(Error::Config("shapes do not fit on the canvas".into()));
        }
        if self.intensity_min > self.intensity_max {
            return Err(Error::Config("intensity range is empty".into()));
        }
        Ok(())
    }

    /// Integer-only sampling: identical sequences on every platform.
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canvas = self.canvas as i32;
        'retry: loop {
            let count = rng.random_range(self.min_instances..=self.max_instances);
            let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(count);
            for _ in 0..count {
                let mut placed = false;
                for _ in 0..64 {
                    let radius = rng.random_range(self.min_radius..=self.max_radius);
                    let r = radius as i32;
                    let cx = rng.random_range(r..canvas - r);
                    let cy = rng.random_range(r..canvas - r);
                    let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
                    let intensity = rng.random_range(self.intensity_min..=self.intensity_max);
                    let clear = shapes.iter().all(|s| {
                        let d2 = i64::from(s.cx - cx).pow(2) + i64::from(s.cy - cy).pow(2);
                        let need =
                            i64::from(s.kind.extent(s.radius) + kind.extent(radius) + self.min_gap);
                        d2 >= need * need
                    });
                    if clear {
                        shapes.push(ShapeInstance {
                            kind,
                            cx,
                            cy,
                            radius,
                            intensity,
                        });
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    continue 'retry;
                }
            }
            return SceneSpec {
                canvas: self.canvas,
                shapes,
                background: self.background,
                seed,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: ShapeKind, radius: u32) -> SceneSpec {
        SceneSpec {
            canvas: 32,
            shapes: vec![ShapeInstance {
                kind,
                cx: 16,
                cy: 15,
                radius,
                intensity: 255,
            }],
            background: 0,
            seed: 0,
        }
    }

    #[test]
    fn one_circle_has_one_mask_and_caption() {
        let r = generate_scene(&single(ShapeKind::Circle, 6)).unwrap();
        assert_eq!(r.caption, vec![ShapeKind::Circle]);
        assert_eq!(r.instance_masks.len(), 1);
        assert_eq!(r, generate_scene(&single(ShapeKind::Circle, 6)).unwrap());
    }

    #[test]
    fn circle_area_close_to_analytic() {
        for radius in 6..=12 {
            let area = generate_scene(&single(ShapeKind::Circle, radius))
                .unwrap()
                .instance_masks[0]
                .count();
            let exact = std::f64::consts::PI * f64::from(radius).powi(2);
            assert!(
                ((area as f64) - exact).abs() / exact < 0.05,
                "r={radius}: {area} vs {exact}"
            );
        }
    }

    #[test]
    fn square_is_axis_aligned_block() {
        let m = &generate_scene(&single(ShapeKind::Square, 4))
            .unwrap()
            .instance_masks[0];
        assert_eq!(m.count(), 81);
        assert!(m.get(12, 11) && m.get(20, 19) && !m.get(21, 15));
    }

    #[test]
    fn every_kind_renders_distinct_nonempty_masks() {
        let masks: Vec<_> = ShapeKind::ALL
            .iter()
            .map(|&k| generate_scene(&single(k, 8)).unwrap().instance_masks[0].clone())
            .collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.count() > 40, "{:?}", ShapeKind::ALL[i]);
            for b in &masks[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = single(ShapeKind::Circle, 6);
        s.shapes[0].cx = 3;
        assert!(matches!(generate_scene(&s), Err(Error::Validation(_))));
        let mut s = single(ShapeKind::Circle, 6);
        s.shapes.push(ShapeInstance {
            cx: 18,
            ..s.shapes[0]
        });
        assert!(generate_scene(&s).is_err());
        let mut s = single(ShapeKind::Circle, 3);
        s.shapes = vec![s.shapes[0]; 4];
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn sampled_scenes_are_valid_and_reproducible() {
        let dist = SceneDistribution {
            max_instances: 3,
            min_radius: 4,
            max_radius: 6,
            ..Default::default()
        };
        for seed in 0..200 {
            let s = dist.sample(seed);
            s.validate().unwrap();
            assert_eq!(s, dist.sample(seed));
        }
    }
}
