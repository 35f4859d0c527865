//! Procedural class-conditional image generators: stroke-rendered digits
//! (grayscale) and colored geometric shapes (RGB). Both are deterministic
//! per seed and resolution-independent.

use std::str::FromStr;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Digits,
    Shapes,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digits" => Ok(SynthKind::Digits),
            "shapes" => Ok(SynthKind::Shapes),
            other => Err(Error::invalid(format!(
                "unknown synthetic dataset kind '{other}' (digits, shapes)"
            ))),
        }
    }
}

/// Seven-segment endpoints in a unit box, (x, y) with y pointing down.
const SEGMENTS: [((f32, f32), (f32, f32)); 7] = [
    ((0.22, 0.14), (0.78, 0.14)), // top
    ((0.22, 0.14), (0.22, 0.50)), // top-left
    ((0.78, 0.14), (0.78, 0.50)), // top-right
    ((0.22, 0.50), (0.78, 0.50)), // middle
    ((0.22, 0.50), (0.22, 0.86)), // bottom-left
    ((0.78, 0.50), (0.78, 0.86)), // bottom-right
    ((0.22, 0.86), (0.78, 0.86)), // bottom
];

/// Which segments light up for each digit.
const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 4, 5, 6],    // 0
    &[2, 5],                // 1
    &[0, 2, 3, 4, 6],       // 2
    &[0, 2, 3, 5, 6],       // 3
    &[1, 2, 3, 5],          // 4
    &[0, 1, 3, 5, 6],       // 5
    &[0, 1, 3, 4, 5, 6],    // 6
    &[0, 2, 5],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - t * vx, py - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Render one digit glyph with randomized pose into an h*w buffer. Pose,
/// per-segment geometry jitter, stroke weight, contrast, and a low-frequency
/// background wash all vary per image so classes overlap the way handwriting
/// does instead of collapsing onto ten fixed templates.
fn render_digit(digit: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let angle = rng.uniform_in(-0.16, 0.16);
    let (sin, cos) = angle.sin_cos();
    let sx = rng.uniform_in(0.80, 1.20);
    let sy = rng.uniform_in(0.80, 1.20);
    let tx = rng.uniform_in(-0.08, 0.08);
    let ty = rng.uniform_in(-0.08, 0.08);
    let thickness = rng.uniform_in(0.045, 0.085);
    let intensity = rng.uniform_in(0.72, 1.0);
    let soft = 0.03f32;

    let place = |p: (f32, f32)| -> (f32, f32) {
        let (x, y) = (sx * (p.0 - 0.5), sy * (p.1 - 0.5));
        (
            cos * x - sin * y + 0.5 + tx,
            sin * x + cos * y + 0.5 + ty,
        )
    };
    // Every segment is drawn: the digit's own at full brightness, the rest
    // as faint ghosts (ink bleed), so neighboring classes stay close the
    // way handwritten digits do. Each stroke gets its own endpoint wobble,
    // weight, and brightness.
    struct Stroke {
        a: (f32, f32),
        b: (f32, f32),
        thickness: f32,
        level: f32,
    }
    let strokes: Vec<Stroke> = (0..SEGMENTS.len())
        .map(|s| {
            let jitter = |(x, y): (f32, f32), rng: &mut Rng| {
                (
                    x + rng.uniform_in(-0.045, 0.045),
                    y + rng.uniform_in(-0.045, 0.045),
                )
            };
            let lit = DIGIT_SEGMENTS[digit].contains(&s);
            let level = if lit {
                intensity * rng.uniform_in(0.80, 1.0)
            } else {
                intensity * rng.uniform_in(0.0, 0.30)
            };
            Stroke {
                a: place(jitter(SEGMENTS[s].0, rng)),
                b: place(jitter(SEGMENTS[s].1, rng)),
                thickness: thickness * rng.uniform_in(0.8, 1.2),
                level,
            }
        })
        .collect();

    // Smooth background wash: a random oblique sinusoid under the glyph.
    let wash_amp = rng.uniform_in(0.0, 0.18);
    let wash_fu = rng.uniform_in(0.8, 2.2);
    let wash_fv = rng.uniform_in(0.8, 2.2);
    let wash_phase = rng.uniform_in(0.0, std::f32::consts::TAU);

    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = ((j as f32 + 0.5) / w as f32, (i as f32 + 0.5) / h as f32);
            let ink = strokes
                .iter()
                .map(|s| {
                    let d = dist_to_segment((u, v), s.a, s.b);
                    s.level * ((s.thickness - d) / soft + 0.5).clamp(0.0, 1.0)
                })
                .fold(0.0f32, f32::max);
            let wash = wash_amp
                * (0.5 + 0.5 * (std::f32::consts::TAU * (wash_fu * u + wash_fv * v) + wash_phase).sin());
            let noise = rng.uniform() * 0.03;
            out.push((wash + noise).max(ink).clamp(0.0, 1.0));
        }
    }
    out
}

/// Shape membership test for the geometric classes, in unit coordinates
/// relative to a center and radius. Order: circle, square, triangle,
/// cross, ring, diamond, horizontal bars, vertical bars.
fn in_shape(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    let bar = |t: f32| -> bool {
        // Three bars across the span [-r, r): stripes of width r/3 with
        // equal gaps, starting at the low edge.
        let k = ((t + r) / (r / 3.0)).floor() as i32;
        k % 2 == 0
    };
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => {
            // Upward triangle: vertices at angles 90, 210, 330 degrees.
            let verts = [(0.0f32, -r), (-0.866 * r, 0.5 * r), (0.866 * r, 0.5 * r)];
            let sign = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| {
                (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
            };
            let d0 = sign(verts[0], verts[1]);
            let d1 = sign(verts[1], verts[2]);
            let d2 = sign(verts[2], verts[0]);
            (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
        }
        3 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        4 => {
            let q = (dx * dx + dy * dy).sqrt();
            q <= r && q >= 0.55 * r
        }
        5 => dx.abs() + dy.abs() <= r,
        6 => dx.abs() <= r && dy.abs() <= r && bar(dy),
        7 => dx.abs() <= r && dy.abs() <= r && bar(dx),
        _ => false,
    }
}

/// Render one colored shape with randomized pose onto a noisy gradient
/// background, h*w*3 interleaved.
fn render_shape(class: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let bg_top = [rng.uniform_in(0.0, 0.4), rng.uniform_in(0.0, 0.4), rng.uniform_in(0.0, 0.4)];
    let bg_bot = [rng.uniform_in(0.0, 0.4), rng.uniform_in(0.0, 0.4), rng.uniform_in(0.0, 0.4)];
    let fg = [
        rng.uniform_in(0.6, 1.0),
        rng.uniform_in(0.6, 1.0),
        rng.uniform_in(0.6, 1.0),
    ];
    let cx = rng.uniform_in(0.32, 0.68);
    let cy = rng.uniform_in(0.32, 0.68);
    let r = rng.uniform_in(0.16, 0.27);

    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        let v = (i as f32 + 0.5) / h as f32;
        for j in 0..w {
            let u = (j as f32 + 0.5) / w as f32;
            let inside = in_shape(class, u - cx, v - cy, r);
            for ch in 0..3 {
                let base = if inside {
                    fg[ch]
                } else {
                    bg_top[ch] + (bg_bot[ch] - bg_top[ch]) * v
                };
                let noise = (rng.uniform() - 0.5) * 0.06;
                out.push((base + noise).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Procedurally rendered dataset with balanced labels (image i has label
/// i mod m). Each image draws from its own seed-derived stream, so image
/// i is identical no matter how many images are requested.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let (want_c, max_m, min_side, name) = match kind {
        SynthKind::Digits => (1, 10, 16, "synthetic-digits"),
        SynthKind::Shapes => (3, 8, 24, "synthetic-shapes"),
    };
    if c != want_c {
        return Err(Error::invalid(format!(
            "{name} renders {want_c}-channel images, got c={c}"
        )));
    }
    if m < 2 || m > max_m {
        return Err(Error::invalid(format!(
            "{name} supports 2..={max_m} classes, got m={m}"
        )));
    }
    if h < min_side || w < min_side {
        return Err(Error::invalid(format!(
            "{name} needs at least {min_side}x{min_side} pixels, got {h}x{w}"
        )));
    }

    let base = Rng::new(seed);
    let mut pixels = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % m;
        let mut rng = base.derive(&[kind as u64, i as u64]);
        let img = match kind {
            SynthKind::Digits => render_digit(label, h, w, &mut rng),
            SynthKind::Shapes => render_shape(label, h, w, &mut rng),
        };
        pixels.extend_from_slice(&img);
        labels.push(label);
    }
    Dataset::new(name, split, [h, w, c], pixels, labels, m)
}
