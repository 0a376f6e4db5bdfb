use rand::Rng as _;

use super::IMAGE_SIZE;
use crate::rng::Rng;

/// Names of the glyph classes, in label order.
pub const GLYPH_CATALOGUE: &[&str] = &[
    "horizontal_bar",
    "vertical_bar",
    "plus",
    "ring",
    "diagonal",
    "anti_diagonal",
    "x_cross",
    "corner",
    "tee",
    "two_dots",
];

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    fn set(&mut self, r: isize, c: isize, v: f64) {
        let n = IMAGE_SIZE as isize;
        if (0..n).contains(&r) && (0..n).contains(&c) {
            let p = &mut self.px[(r * n + c) as usize];
            *p = p.max(v);
        }
    }

    fn hline(&mut self, r: isize, c0: isize, c1: isize, w: isize, v: f64) {
        for dr in 0..w {
            for c in c0..=c1 {
                self.set(r + dr, c, v);
            }
        }
    }

    fn vline(&mut self, c: isize, r0: isize, r1: isize, w: isize, v: f64) {
        for dc in 0..w {
            for r in r0..=r1 {
                self.set(r, c + dc, v);
            }
        }
    }

    fn diag(&mut self, r0: isize, c0: isize, len: isize, dir: isize, w: isize, v: f64) {
        for k in 0..len {
            for d in 0..w {
                self.set(r0 + k, c0 + dir * k + d, v);
            }
        }
    }
}

/// Render glyph `class` with per-sample jitter: a shift of up to one pixel
/// on each axis, stroke width 1 or 2, stroke intensity in [0.75, 1] and a
/// faint non-negative background texture.
pub fn render_glyph(class: usize, rng: &mut Rng) -> Vec<f64> {
    let dy = rng.random_range(-1i32..=1) as isize;
    let dx = rng.random_range(-1i32..=1) as isize;
    let w = rng.random_range(1i32..=2) as isize;
    let v: f64 = rng.random_range(0.75..=1.0);
    let mut cv = Canvas::new();
    let (lo, hi, mid) = (2 + dy, 9 + dy, 5 + dy);
    let (clo, chi, cmid) = (2 + dx, 9 + dx, 5 + dx);
    match class {
        0 => cv.hline(mid, clo, chi, w, v),
        1 => cv.vline(cmid, lo, hi, w, v),
        2 => {
            cv.hline(mid, clo, chi, w, v);
            cv.vline(cmid, lo, hi, w, v);
        }
        3 => {
            cv.hline(lo, clo + 1, chi - 1, w, v);
            cv.hline(hi - w + 1, clo + 1, chi - 1, w, v);
            cv.vline(clo, lo + 1, hi - 1, w, v);
            cv.vline(chi - w + 1, lo + 1, hi - 1, w, v);
        }
        4 => cv.diag(lo, clo, 8, 1, w, v),
        5 => cv.diag(lo, chi, 8, -1, w, v),
        6 => {
            cv.diag(lo, clo, 8, 1, w, v);
            cv.diag(lo, chi, 8, -1, w, v);
        }
        7 => {
            cv.vline(clo, lo, hi, w, v);
            cv.hline(hi - w + 1, clo, chi, w, v);
        }
        8 => {
            cv.hline(lo, clo, chi, w, v);
            cv.vline(cmid, lo, hi, w, v);
        }
        9 => {
            for (r, c) in [(lo + 1, clo + 1), (hi - 2, chi - 2)] {
                for a in 0..2 {
                    for b in 0..2 {
                        cv.set(r + a, c + b, v);
                    }
                }
            }
        }
        _ => unreachable!("class checked against the catalogue"),
    }
    for p in &mut cv.px {
        let tex: f64 = rng.random_range(0.0..0.08);
        *p = (*p + tex).min(1.0);
    }
    cv.px
}
