//! Procedural corpus of textured scenes with box- and disc-shaped structures.
//! Each item carries two co-registered renderings of the same scene that
//! differ by an inserted/removed subset of structures, plus the binary mask
//! of exactly those structures.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeding;

/// One co-registered scene pair before geometric perturbation.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    /// Reference rendering, [3, H, W] in [0, 1].
    pub image_a: Array3<f64>,
    /// Partner rendering with structures inserted/removed, same frame as A.
    pub image_b0: Array3<f64>,
    /// True where the two renderings differ by construction.
    pub change_mask: Array2<bool>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Shape {
    Rect {
        x0: i64,
        y0: i64,
        w: i64,
        h: i64,
        color: [f64; 3],
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        color: [f64; 3],
    },
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h, .. } => {
                let (x, y) = (x as i64, y as i64);
                x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
            }
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn color(&self) -> [f64; 3] {
        match *self {
            Shape::Rect { color, .. } | Shape::Ellipse { color, .. } => color,
        }
    }

    fn paint(&self, img: &mut Array3<f64>) {
        let (_, h, w) = img.dim();
        let color = self.color();
        for y in 0..h {
            for x in 0..w {
                if self.covers(x, y) {
                    for c in 0..3 {
                        img[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }

    fn stamp(&self, mask: &mut Array2<bool>) {
        let (h, w) = mask.dim();
        for y in 0..h {
            for x in 0..w {
                if self.covers(x, y) {
                    mask[(y, x)] = true;
                }
            }
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(size: usize, cell: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = (size as f64 / cell).ceil() as usize + 2;
    let lattice = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
    Array2::from_shape_fn((size, size), |(y, x)| {
        let gx = x as f64 / cell;
        let gy = y as f64 / cell;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smoothstep(gx - ix as f64), smoothstep(gy - iy as f64));
        let top = lattice[(iy, ix)] * (1.0 - fx) + lattice[(iy, ix + 1)] * fx;
        let bot = lattice[(iy + 1, ix)] * (1.0 - fx) + lattice[(iy + 1, ix + 1)] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut base = Array2::<f64>::zeros((size, size));
    let mut total = 0.0;
    for (octave, amp) in [(4.0, 1.0), (8.0, 0.5), (16.0, 0.25)] {
        let cell = (size as f64 / octave).max(2.0);
        base = base + value_noise(size, cell, rng) * amp;
        total += amp;
    }
    base /= total;

    let mut img = Array3::zeros((3, size, size));
    for c in 0..3 {
        let tint = value_noise(size, (size as f64 / 8.0).max(2.0), rng);
        for y in 0..size {
            for x in 0..size {
                let v = 0.30 + 0.45 * base[(y, x)] + 0.12 * (tint[(y, x)] - 0.5);
                img[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Dark or bright, away from the mid-range background band.
    let (lo, hi) = if rng.random_bool(0.5) {
        (0.04, 0.26)
    } else {
        (0.72, 0.98)
    };
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn random_shape(size: usize, rng: &mut ChaCha8Rng) -> Shape {
    let s = size as f64;
    let cx = rng.random_range(0.15 * s..0.85 * s);
    let cy = rng.random_range(0.15 * s..0.85 * s);
    let rx = rng.random_range(s / 16.0..s / 6.0).max(2.0);
    let ry = rng.random_range(s / 16.0..s / 6.0).max(2.0);
    let color = random_color(rng);
    if rng.random_bool(0.5) {
        Shape::Rect {
            x0: (cx - rx).round() as i64,
            y0: (cy - ry).round() as i64,
            w: (2.0 * rx).round().max(2.0) as i64,
            h: (2.0 * ry).round().max(2.0) as i64,
            color,
        }
    } else {
        Shape::Ellipse { cx, cy, rx, ry, color }
    }
}

/// Renders one scene pair: `shared` structures appear in both frames,
/// `only_a` only in the reference, `only_b` only in the partner. The change
/// mask is the union of the one-sided structures.
pub(crate) fn render_item(
    size: usize,
    shared: &[Shape],
    only_a: &[Shape],
    only_b: &[Shape],
    rng: &mut ChaCha8Rng,
) -> CorpusItem {
    let bg = background(size, rng);
    let mut image_a = bg.clone();
    let mut image_b0 = bg;
    for s in shared {
        s.paint(&mut image_a);
        s.paint(&mut image_b0);
    }
    let mut change_mask = Array2::from_elem((size, size), false);
    for s in only_a {
        s.paint(&mut image_a);
        s.stamp(&mut change_mask);
    }
    for s in only_b {
        s.paint(&mut image_b0);
        s.stamp(&mut change_mask);
    }
    CorpusItem {
        image_a,
        image_b0,
        change_mask,
    }
}

/// Renders `n` deterministic scene pairs of side `size` (≥ 32).
pub fn make_toy_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    if size < 32 {
        return Err(Error::validation(format!(
            "toy corpus size must be at least 32, got {size}"
        )));
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeding::rng(seed, &format!("toy/{i}"));
        let n_shared = rng.random_range(2..=5);
        let n_changed = rng.random_range(1..=3);
        let shared: Vec<Shape> = (0..n_shared).map(|_| random_shape(size, &mut rng)).collect();
        let mut only_a = Vec::new();
        let mut only_b = Vec::new();
        for _ in 0..n_changed {
            let shape = random_shape(size, &mut rng);
            if rng.random_bool(0.5) {
                only_b.push(shape);
            } else {
                only_a.push(shape);
            }
        }
        items.push(render_item(size, &shared, &only_a, &only_b, &mut rng));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let a = make_toy_corpus(3, 32, 99).unwrap();
        let b = make_toy_corpus(3, 32, 99).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image_a, y.image_a);
            assert_eq!(x.image_b0, y.image_b0);
            assert_eq!(x.change_mask, y.change_mask);
        }
        let c = make_toy_corpus(3, 32, 100).unwrap();
        assert_ne!(a[0].image_a, c[0].image_a);
    }

    #[test]
    fn no_changed_structures_means_empty_mask() {
        let mut rng = crate::seeding::rng(5, "test");
        let shared = [random_shape(48, &mut rng), random_shape(48, &mut rng)];
        let item = render_item(48, &shared, &[], &[], &mut rng);
        assert!(!item.change_mask.iter().any(|&m| m));
        assert_eq!(item.image_a, item.image_b0);
    }

    #[test]
    fn inserted_square_marks_exactly_its_pixels() {
        let mut rng = crate::seeding::rng(6, "test");
        let rect = Shape::Rect {
            x0: 12,
            y0: 20,
            w: 10,
            h: 10,
            color: [0.9, 0.1, 0.1],
        };
        let item = render_item(64, &[], &[], &[rect], &mut rng);
        let count = item.change_mask.iter().filter(|&&m| m).count();
        assert_eq!(count, 100);
        assert!(item.change_mask[(20, 12)]);
        assert!(item.change_mask[(29, 21)]);
        assert!(!item.change_mask[(30, 21)]);
        assert_eq!(item.image_b0[[0, 25, 15]], 0.9);
        assert_eq!(item.image_a[[0, 25, 15]], item.image_a[[0, 25, 15]].clamp(0.0, 1.0));
    }

    #[test]
    fn rendered_values_stay_in_unit_range() {
        for item in make_toy_corpus(4, 32, 11).unwrap() {
            assert!(item.image_a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(item.image_b0.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(item.change_mask.iter().any(|&m| m));
        }
    }

    #[test]
    fn undersized_corpus_is_rejected() {
        assert!(make_toy_corpus(1, 31, 0).is_err());
    }
}
