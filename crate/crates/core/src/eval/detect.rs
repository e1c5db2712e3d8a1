use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::scenes::{BinaryMask, GrayImage, ShapeInstance, ShapeKind};

/// Minimum template score for a detection to count as a recognised shape.
pub const DETECTION_THRESHOLD: f64 = 0.6;
/// Grey level separating foreground from background.
pub const FOREGROUND_LEVEL: u8 = 128;
/// Components smaller than this are treated as speckle.
pub const MIN_COMPONENT_PIXELS: usize = 10;

const TEMPLATE_RADII: std::ops::RangeInclusive<u32> = 2..=13;
const OFFSET_SEARCH: i32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub kind: ShapeKind,
    /// Pixel-centre coordinates `(x, y)`.
    pub centroid: (f64, f64),
    #[serde(skip)]
    pub mask: BinaryMask,
    /// Intersection over union with the best-fitting template.
    pub score: f64,
    /// Radius of the best-fitting template.
    pub radius: u32,
}

struct Template {
    kind: ShapeKind,
    radius: u32,
    /// Pixels relative to the shape centre.
    offsets: Vec<(i32, i32)>,
}

fn templates() -> &'static [Template] {
    static CACHE: OnceLock<Vec<Template>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let mut out = Vec::new();
        for kind in ShapeKind::ALL {
            for radius in TEMPLATE_RADII {
                let c = kind.extent(radius) as i32 + 2;
                let canvas = (2 * c + 1) as usize;
                let inst = ShapeInstance {
                    kind,
                    cx: c,
                    cy: c,
                    radius,
                    intensity: 255,
                };
                let m = inst.rasterize(canvas);
                let mut offsets = Vec::new();
                for y in 0..canvas {
                    for x in 0..canvas {
                        if m.get(x, y) {
                            offsets.push((x as i32 - c, y as i32 - c));
                        }
                    }
                }
                out.push(Template {
                    kind,
                    radius,
                    offsets,
                });
            }
        }
        out
    })
}

/// 8-connected components of a binary mask, in scan order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = BinaryMask::empty(w, h);
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.bits[p] = true;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn bounding_centre(mask: &BinaryMask) -> (i32, i32) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    (((x0 + x1) / 2) as i32, ((y0 + y1) / 2) as i32)
}

/// Best `(kind, radius, score)` for one component.
fn classify(comp: &BinaryMask) -> (ShapeKind, u32, f64) {
    let area = comp.count();
    let (bx, by) = bounding_centre(comp);
    let (w, h) = (comp.width as i32, comp.height as i32);
    let mut best = (ShapeKind::Circle, 0, 0.0);
    for t in templates() {
        let n = t.offsets.len();
        // IoU is at most min/max of the two areas.
        if (n.min(area) as f64) / (n.max(area) as f64) <= best.2 {
            continue;
        }
        for oy in -OFFSET_SEARCH..=OFFSET_SEARCH {
            for ox in -OFFSET_SEARCH..=OFFSET_SEARCH {
                let (cx, cy) = (bx + ox, by + oy);
                let mut inter = 0;
                for &(dx, dy) in &t.offsets {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && x < w && y < h && comp.bits[(y * w + x) as usize] {
                        inter += 1;
                    }
                }
                let score = inter as f64 / (n + area - inter) as f64;
                if score > best.2 {
                    best = (t.kind, t.radius, score);
                }
            }
        }
    }
    best
}

/// Threshold, split into components, and match each against the shape templates.
///
/// Detections are sorted by descending score; ties keep scan order.
pub fn detect_shapes(image: &GrayImage) -> Vec<Detection> {
    let fg = image.threshold(FOREGROUND_LEVEL);
    let mut found: Vec<Detection> = connected_components(&fg)
        .into_iter()
        .filter(|c| c.count() >= MIN_COMPONENT_PIXELS)
        .map(|mask| {
            let (kind, radius, score) = classify(&mask);
            let centroid = mask.centroid().expect("non-empty component");
            Detection {
                kind,
                centroid,
                mask,
                score,
                radius,
            }
        })
        .collect();
    found.sort_by(|a, b| b.score.total_cmp(&a.score));
    found
}

/// Both kinds present as distinct confident detections, at least half a
/// shape diameter apart.
pub fn dual_object_success(detections: &[Detection], first: ShapeKind, second: ShapeKind) -> bool {
    let ok: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score >= DETECTION_THRESHOLD)
        .collect();
    ok.iter().enumerate().any(|(i, a)| {
        a.kind == first
            && ok.iter().enumerate().any(|(j, b)| {
                if i == j || b.kind != second {
                    return false;
                }
                let d = ((a.centroid.0 - b.centroid.0).powi(2)
                    + (a.centroid.1 - b.centroid.1).powi(2))
                .sqrt();
                d >= f64::from(a.radius.max(b.radius))
            })
    })
}
