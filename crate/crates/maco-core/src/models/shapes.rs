//! Procedurally generated shape-classification dataset: ten geometric
//! classes rendered with randomized color, placement, scale, rotation and a
//! textured background. Serves as a hermetic, desk-scale stand-in for a
//! natural image corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SHAPE_CLASS_NAMES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "star",
    "stripe-grid",
    "checker",
    "blob",
    "crescent",
];

#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub generator_seed: u64,
    pub size: usize,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the 20% evaluation split. The phase shift by i/5 makes the
    /// selection cycle through all ten classes (a plain stride of 5 would
    /// only ever pick two of them, since labels repeat every 10).
    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| (i + i / 5) % 5 == 4).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| (i + i / 5) % 5 != 4).collect()
    }
}

/// Render `n` images (n ≥ 10) of `size`×`size` pixels, labels cycling
/// through the ten classes so counts stay balanced within one.
pub fn generate_shapes_dataset(n: usize, seed: u64, size: usize) -> Result<ShapesDataset> {
    if n < 10 {
        return Err(Error::invalid_input(format!(
            "need at least 10 samples to cover the classes, got {n}"
        )));
    }
    if size < 8 {
        return Err(Error::invalid_input("image size must be at least 8"));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for index in 0..n {
        let label = index % 10;
        images.push(render_sample(seed, index as u64, label, size));
        labels.push(label);
    }
    Ok(ShapesDataset {
        images,
        labels,
        generator_seed: seed,
        size,
    })
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0xd129_0d3e_47e6_7f4d)
        .wrapping_add(index.wrapping_mul(0xa076_1d64_78bd_642f))
        .wrapping_add(0xe703_7ed1_a0b4_28db);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct SampleParams {
    bg_a: [f64; 3],
    bg_b: [f64; 3],
    bg_angle: f64,
    noise_amp: f64,
    fg: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    blob_offsets: [(f64, f64, f64); 4],
}

fn draw_params(rng: &mut ChaCha8Rng, size: usize) -> SampleParams {
    let s = size as f64;
    let bg_a = random_color(rng);
    let bg_b = random_color(rng);
    let bg_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise_amp = 0.04;
    // Foreground must stand out from both background colors.
    let fg = loop {
        let c = random_color(rng);
        if color_distance(c, bg_a) >= 0.55 && color_distance(c, bg_b) >= 0.55 {
            break c;
        }
    };
    let cx = s / 2.0 + rng.gen_range(-0.2..0.2) * s;
    let cy = s / 2.0 + rng.gen_range(-0.2..0.2) * s;
    let radius = 0.33 * s * (1.0 + rng.gen_range(-0.25..0.25));
    let rotation = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut blob_offsets = [(0.0, 0.0, 0.0); 4];
    for slot in blob_offsets.iter_mut() {
        *slot = (
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.4..0.7),
        );
    }
    SampleParams {
        bg_a,
        bg_b,
        bg_angle,
        noise_amp,
        fg,
        cx,
        cy,
        radius,
        rotation,
        blob_offsets,
    }
}

/// Point-in-shape test in shape coordinates (rotated, centered, unit radius).
fn inside(label: usize, u: f64, v: f64, p: &SampleParams) -> bool {
    let r2 = u * u + v * v;
    match label {
        // disk
        0 => r2 <= 1.0,
        // square
        1 => u.abs() <= 0.82 && v.abs() <= 0.82,
        // triangle (equilateral, circumradius 1, one vertex up)
        2 => {
            let verts: [(f64, f64); 3] = [
                (0.0, -1.0),
                (0.866, 0.5),
                (-0.866, 0.5),
            ];
            let mut sign = 0.0;
            for i in 0..3 {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % 3];
                let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                if i == 0 {
                    sign = cross;
                } else if cross * sign < 0.0 {
                    return false;
                }
            }
            true
        }
        // ring
        3 => (0.55..=1.0).contains(&r2.sqrt()),
        // cross
        4 => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
        // five-pointed star: radius threshold follows a triangle wave in angle
        5 => {
            let r = r2.sqrt();
            let ang = v.atan2(u);
            let a = (ang * 5.0 / std::f64::consts::TAU).rem_euclid(1.0);
            let t = 1.0 - (a - 0.5).abs() * 2.0; // 1 between points, 0 at points
            let limit = 1.0 - 0.58 * t;
            r <= limit
        }
        // stripe-grid: parallel bars inside the bounding square
        6 => {
            if u.abs() > 0.95 || v.abs() > 0.95 {
                return false;
            }
            (((u + 0.95) / 0.38).floor() as i64) % 2 == 0
        }
        // checker inside the bounding square
        7 => {
            if u.abs() > 0.95 || v.abs() > 0.95 {
                return false;
            }
            let iu = ((u + 0.95) / 0.475).floor() as i64;
            let iv = ((v + 0.95) / 0.475).floor() as i64;
            (iu + iv) % 2 == 0
        }
        // blob: union of randomized disks
        8 => p.blob_offsets.iter().any(|&(ox, oy, rr)| {
            let du = u - ox;
            let dv = v - oy;
            du * du + dv * dv <= rr * rr
        }),
        // crescent: disk minus an offset disk
        9 => {
            let du = u - 0.45;
            r2 <= 1.0 && du * du + v * v > 0.72 * 0.72
        }
        _ => unreachable!("label out of range"),
    }
}

fn render_sample(seed: u64, index: u64, label: usize, size: usize) -> Image {
    let mut rng = sample_rng(seed, index);
    let p = draw_params(&mut rng, size);
    let s = size as f64;
    let (ga, gb) = (p.bg_angle.cos(), p.bg_angle.sin());
    let (rc, rs) = (p.rotation.cos(), p.rotation.sin());
    let mut img = Image::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampled coverage for soft edges.
            let mut cover = 0.0;
            for sub in 0..4 {
                let fx = x as f64 + 0.25 + 0.5 * (sub % 2) as f64;
                let fy = y as f64 + 0.25 + 0.5 * (sub / 2) as f64;
                let dx = fx - p.cx;
                let dy = fy - p.cy;
                let u = (rc * dx + rs * dy) / p.radius;
                let v = (-rs * dx + rc * dy) / p.radius;
                if inside(label, u, v, &p) {
                    cover += 0.25;
                }
            }
            // Background: linear two-color gradient plus white noise.
            let t = 0.5 + 0.3 * ((x as f64 / s - 0.5) * ga + (y as f64 / s - 0.5) * gb);
            let noise = rng.gen_range(-p.noise_amp..p.noise_amp);
            for ch in 0..3 {
                let bg = p.bg_a[ch] * (1.0 - t) + p.bg_b[ch] * t + noise;
                let val = bg * (1.0 - cover) + p.fg[ch] * cover;
                img[[ch, y, x]] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_samples_cover_every_class_once() {
        let ds = generate_shapes_dataset(10, 3, 32).unwrap();
        let mut counts = [0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn class_balance_within_one() {
        let ds = generate_shapes_dataset(47, 5, 16).unwrap();
        let mut counts = [0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        let hi = counts.iter().max().unwrap();
        let lo = counts.iter().min().unwrap();
        assert!(hi - lo <= 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes_dataset(20, 9, 32).unwrap();
        let b = generate_shapes_dataset(20, 9, 32).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn pixel_values_in_unit_range() {
        let ds = generate_shapes_dataset(30, 11, 32).unwrap();
        for img in &ds.images {
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn too_few_samples_is_error() {
        assert!(generate_shapes_dataset(9, 0, 32).is_err());
    }

    #[test]
    fn holdout_split_is_balanced() {
        let ds = generate_shapes_dataset(100, 2, 16).unwrap();
        let holdout = ds.holdout_indices();
        assert_eq!(holdout.len(), 20);
        let mut counts = [0usize; 10];
        for &i in &holdout {
            counts[ds.labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
    }
}
