//! Procedural corpora with known leaf masks for smoke runs and benchmarks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::{bilinear_resize, BinaryMask, Image, ValueRange};

/// Smooth value noise in `[0, 1]`: a coarse and a fine random grid, upsampled.
fn value_noise(side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut acc = vec![0f32; side * side];
    for (cells, weight) in [(4usize, 0.6f32), (12, 0.4)] {
        let cells = cells.min(side);
        let grid: Vec<f32> = (0..cells * cells).map(|_| rng.random::<f32>()).collect();
        for (a, v) in acc.iter_mut().zip(bilinear_resize(&grid, cells, cells, side, side)) {
            *a += weight * v;
        }
    }
    acc
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Earth, stone and mulch colors; `tint` shifts the palette per domain.
fn background_colors(rng: &mut ChaCha8Rng, tint: [f32; 3]) -> ([f32; 3], [f32; 3]) {
    let base = [
        rng.random_range(0.25..0.6f32),
        rng.random_range(0.2..0.45f32),
        rng.random_range(0.1..0.35f32),
    ];
    let a = [base[0] + tint[0], base[1] + tint[1], base[2] + tint[2]];
    let b = [a[0] * 0.5, a[1] * 0.5, a[2] * 0.55];
    (a.map(clamp01), b.map(clamp01))
}

/// Background-only texture: plain noise in earthy colors.
pub fn texture(side: usize, rng: &mut ChaCha8Rng) -> Image {
    tinted_texture(side, [0.0; 3], rng)
}

fn tinted_texture(side: usize, tint: [f32; 3], rng: &mut ChaCha8Rng) -> Image {
    let noise = value_noise(side, rng);
    let (a, b) = background_colors(rng, tint);
    let grain: Vec<f32> = (0..side * side).map(|_| rng.random_range(-0.04..0.04f32)).collect();
    Image::from_fn(side, side, ValueRange::Unit, |y, x, c| {
        let i = y * side + x;
        clamp01(mix(b, a, noise[i])[c] + grain[i])
    })
    .expect("texture stays in range")
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
}

impl Ellipse {
    /// Signed radius ratio: `< 1` inside.
    fn radius(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    fn random(side: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = side as f32;
        let rx = rng.random_range(0.24..0.36f32) * s;
        let ry = rng.random_range(0.14..0.22f32) * s;
        let margin = rx + 1.0;
        Self {
            cy: rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 0.01)),
            cx: rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 0.01)),
            ry,
            rx,
            angle: rng.random_range(0.0..std::f32::consts::PI),
        }
    }
}

/// A sample image and its ground-truth leaf mask.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub image: Image,
    pub mask: BinaryMask,
}

fn paint_leaf(bg: &Image, e: Ellipse, spots: &[(f32, f32, f32)], rng: &mut ChaCha8Rng) -> Labeled {
    let side = bg.height();
    let green = [
        rng.random_range(0.15..0.3f32),
        rng.random_range(0.5..0.75f32),
        rng.random_range(0.1..0.25f32),
    ];
    let dark = [green[0] * 0.6, green[1] * 0.7, green[2] * 0.6];
    let spot_color = [0.75f32, 0.62, 0.2];
    let vein_freq = rng.random_range(0.5..0.8f32);
    let mask = BinaryMask::from_fn(side, side, |y, x| e.radius(y as f32 + 0.5, x as f32 + 0.5) < 1.0);
    let image = Image::from_fn(side, side, ValueRange::Unit, |y, x, c| {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        if !mask.get(y, x) {
            return bg.get(y, x, c);
        }
        let (s, co) = e.angle.sin_cos();
        let along = (fx - e.cx) * co + (fy - e.cy) * s;
        let across = -(fx - e.cx) * s + (fy - e.cy) * co;
        let vein = ((across.abs() - along * 0.3) * vein_freq).sin().abs();
        let shade = 1.0 - 0.35 * e.radius(fy, fx);
        let mut px = mix(dark, green, vein * shade);
        if across.abs() < 0.8 {
            px = dark;
        }
        for &(sy, sx, r) in spots {
            if (fy - sy).powi(2) + (fx - sx).powi(2) < r * r {
                px = spot_color;
            }
        }
        clamp01(px[c])
    })
    .expect("leaf stays in range");
    Labeled { image, mask }
}

/// Textured ellipse leaf fully inside the frame, on a texture background.
pub fn full_leaf(side: usize, rng: &mut ChaCha8Rng) -> Labeled {
    let bg = texture(side, rng);
    let e = Ellipse::random(side, rng);
    paint_leaf(&bg, e, &[], rng)
}

/// Corpus of `n` full leaves.
pub fn full_leaves(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<Labeled> {
    (0..n).map(|_| full_leaf(side, rng)).collect()
}

pub fn textures(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (0..n).map(|_| texture(side, rng)).collect()
}

/// Two translation domains: plain disks (`X`) and spotted disks (`Y`).
///
/// Backgrounds vary per image, and each domain has its own color cast so an
/// unmasked translator is tempted to repaint the background as well.
pub fn disk_domains(n: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<Labeled>, Vec<Labeled>) {
    let x = (0..n).map(|_| disk(side, false, rng)).collect();
    let y = (0..n).map(|_| disk(side, true, rng)).collect();
    (x, y)
}

pub fn disk(side: usize, spotted: bool, rng: &mut ChaCha8Rng) -> Labeled {
    let tint = if spotted { [0.15, -0.05, -0.05] } else { [-0.1, 0.0, 0.15] };
    let bg = tinted_texture(side, tint, rng);
    let s = side as f32;
    let r = rng.random_range(0.25..0.33f32) * s;
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let e = Ellipse {
        cy,
        cx,
        ry: r,
        rx: r,
        angle: 0.0,
    };
    let spots: Vec<(f32, f32, f32)> = if spotted {
        (0..rng.random_range(4..8))
            .map(|_| {
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                let d = rng.random_range(0.0..0.7f32) * r;
                (cy + d * a.sin(), cx + d * a.cos(), rng.random_range(0.07..0.12f32) * s)
            })
            .collect()
    } else {
        Vec::new()
    };
    paint_leaf(&bg, e, &spots, rng)
}
