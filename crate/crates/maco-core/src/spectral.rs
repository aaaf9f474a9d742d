//! Half-plane 2-D Fourier transforms of real images, polar decomposition,
//! Hermitian-symmetric reconstruction, and dataset magnitude templates.
//!
//! A real `H × W` signal is represented by the `H × (⌊W/2⌋+1)` left half of
//! its DFT. Reconstruction completes the missing columns by conjugate
//! symmetry, so the inverse transform is real by construction: on the four
//! self-conjugate bins (DC, and the Nyquist row/column for even sizes) the
//! stored value is projected to its real part, and on the redundant rows of
//! the first and Nyquist columns the conjugate of the partner row is used
//! instead of the stored value.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::borrow::Borrow;
use std::cell::RefCell;
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{bilinear_resize, image_shape, Image};

/// Polar half-plane spectrum of a real `[C, H, W]` image.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// `[C, H, Wh]`, elementwise ≥ 0.
    pub magnitude: Array3<f64>,
    /// `[C, H, Wh]`, wrapped to [−π, π).
    pub phase: Array3<f64>,
    pub height: usize,
    pub width: usize,
}

/// Dataset-averaged magnitude spectrum held fixed during phase optimization.
///
/// Magnitudes are quantized to `f32` at construction so that the binary
/// container round-trips bit-exactly.
#[derive(Debug, Clone)]
pub struct MagnitudeTemplate {
    /// `[C, H, Wh]`, elementwise ≥ 0, `f32`-representable values.
    pub magnitude: Array3<f64>,
    pub height: usize,
    pub width: usize,
    pub source_count: u64,
    pub source_label: String,
}

/// Half-plane width for a full width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// True when bin (u, v) must be real for a real signal.
pub fn is_self_conjugate(u: usize, v: usize, h: usize, w: usize) -> bool {
    let u_self = u == 0 || (h % 2 == 0 && u == h / 2);
    let v_self = v == 0 || (w % 2 == 0 && v == w / 2);
    u_self && v_self
}

/// True for half-plane columns whose conjugate partner column is not stored.
fn is_interior_column(v: usize, w: usize) -> bool {
    v != 0 && !(w % 2 == 0 && v == w / 2)
}

/// How many full-plane bins the stored bin (·, v) accounts for.
pub fn bin_multiplicity(v: usize, w: usize) -> f64 {
    if is_interior_column(v, w) {
        2.0
    } else {
        1.0
    }
}

/// True on the rows of the v=0 / Nyquist columns whose value is derived from
/// the conjugate partner row rather than taken from storage.
pub fn is_redundant_bin(u: usize, v: usize, h: usize, w: usize) -> bool {
    !is_interior_column(v, w) && u > h / 2
}

/// Normalized radial frequency of bin (u, v); Nyquist maps to 0.5 per axis.
pub fn radial_frequency(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fu = u.min(h - u) as f64 / h as f64;
    let fv = v as f64 / w as f64;
    (fu * fu + fv * fv).sqrt()
}

/// Wrap an angle to [−π, π).
pub fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut x = (p + PI) % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x - PI
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2-D DFT of a full complex plane. Forward uses e^{−iθ}; the
/// inverse is unnormalized (caller divides by H·W).
fn fft2_in_place(buf: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = buf.dim();
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = if inverse {
            planner.plan_fft_inverse(w)
        } else {
            planner.plan_fft_forward(w)
        };
        let col_fft = if inverse {
            planner.plan_fft_inverse(h)
        } else {
            planner.plan_fft_forward(h)
        };
        let slice = buf.as_slice_mut().expect("contiguous spectrum buffer");
        for row in slice.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::default(); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = slice[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                slice[i * w + j] = col[i];
            }
        }
    });
}

/// Unnormalized forward DFT of one real channel.
fn dft2_forward(channel: &Array2<f64>) -> Array2<Complex<f64>> {
    let (h, w) = channel.dim();
    let mut buf = Array2::from_shape_fn((h, w), |(i, j)| Complex::new(channel[[i, j]], 0.0));
    fft2_in_place(&mut buf, false);
    buf
}

/// Assemble the full Hermitian-symmetric plane from a stored half plane.
fn hermitian_complete(half: &Array2<Complex<f64>>, h: usize, w: usize) -> Array2<Complex<f64>> {
    let wh = half.dim().1;
    let mut full = Array2::from_elem((h, w), Complex::new(0.0, 0.0));
    for u in 0..h {
        for v in 0..wh {
            let z = half[[u, v]];
            let z = if is_self_conjugate(u, v, h, w) {
                Complex::new(z.re, 0.0)
            } else if is_redundant_bin(u, v, h, w) {
                half[[h - u, v]].conj()
            } else {
                z
            };
            full[[u, v]] = z;
        }
    }
    // Missing right-hand columns by conjugate symmetry.
    for u in 0..h {
        for vw in wh..w {
            let pu = (h - u) % h;
            let pv = w - vw;
            full[[u, vw]] = full[[pu, pv]].conj();
        }
    }
    full
}

/// Inverse transform of a stored half plane to a real channel.
pub(crate) fn irfft2_channel(half: &Array2<Complex<f64>>, h: usize, w: usize) -> Array2<f64> {
    let mut full = hermitian_complete(half, h, w);
    fft2_in_place(&mut full, true);
    let norm = 1.0 / (h * w) as f64;
    Array2::from_shape_fn((h, w), |(i, j)| full[[i, j]].re * norm)
}

/// Adjoint of [`irfft2_channel`] with respect to the stored half plane.
///
/// Given ∂L/∂output, returns per stored bin the complex pair
/// (∂L/∂Re, ∂L/∂Im). Self-conjugate bins carry no imaginary derivative and
/// redundant rows carry none at all; bins whose conjugate partner column is
/// not stored are doubled.
pub(crate) fn irfft2_adjoint_channel(
    grad_out: &Array2<f64>,
    h: usize,
    w: usize,
) -> Array2<Complex<f64>> {
    let wh = half_width(w);
    let mut g = Array2::from_shape_fn((h, w), |(i, j)| Complex::new(grad_out[[i, j]], 0.0));
    fft2_in_place(&mut g, false);
    let norm = 1.0 / (h * w) as f64;
    Array2::from_shape_fn((h, wh), |(u, v)| {
        if is_redundant_bin(u, v, h, w) {
            Complex::new(0.0, 0.0)
        } else if is_self_conjugate(u, v, h, w) {
            Complex::new(g[[u, v]].re * norm, 0.0)
        } else {
            // Every free stored bin fixes exactly one conjugate partner in
            // the full plane (the mirrored column, or the mirrored row of
            // the v=0 / Nyquist columns), hence the factor 2.
            let m = 2.0 * norm;
            Complex::new(g[[u, v]].re * m, g[[u, v]].im * m)
        }
    })
}

/// Polar decomposition of a real image over the half plane.
pub fn decompose(image: &Image) -> Result<Spectrum> {
    let (c, h, w) = image_shape(image);
    if h < 2 || w < 2 {
        return Err(Error::invalid_input(format!(
            "image must be at least 2×2, got {h}×{w}"
        )));
    }
    if !crate::image::all_finite(image) {
        return Err(Error::invalid_input("image contains non-finite values"));
    }
    let wh = half_width(w);
    let mut magnitude = Array3::zeros((c, h, wh));
    let mut phase = Array3::zeros((c, h, wh));
    for ch in 0..c {
        let plane = image.index_axis(ndarray::Axis(0), ch).to_owned();
        let full = dft2_forward(&plane);
        for u in 0..h {
            for v in 0..wh {
                let z = full[[u, v]];
                magnitude[[ch, u, v]] = z.norm();
                phase[[ch, u, v]] = wrap_phase(z.arg());
            }
        }
    }
    Ok(Spectrum {
        magnitude,
        phase,
        height: h,
        width: w,
    })
}

/// Rebuild the stored half plane as complex values r·e^{iφ}, applying the
/// self-conjugate projection r·cos(φ).
pub(crate) fn polar_to_half(
    magnitude: &Array3<f64>,
    phase: &Array3<f64>,
    channel: usize,
    h: usize,
    w: usize,
) -> Array2<Complex<f64>> {
    let wh = magnitude.dim().2;
    Array2::from_shape_fn((h, wh), |(u, v)| {
        let r = magnitude[[channel, u, v]];
        let p = phase[[channel, u, v]];
        if is_self_conjugate(u, v, h, w) {
            Complex::new(r * p.cos(), 0.0)
        } else {
            Complex::from_polar(r, p)
        }
    })
}

/// Inverse of [`decompose`]: reconstruct the real image from magnitude and
/// phase half planes.
pub fn recompose(
    magnitude: &Array3<f64>,
    phase: &Array3<f64>,
    height: usize,
    width: usize,
) -> Result<Image> {
    if magnitude.dim() != phase.dim() {
        return Err(Error::invalid_input(format!(
            "magnitude shape {:?} != phase shape {:?}",
            magnitude.dim(),
            phase.dim()
        )));
    }
    let (c, h, wh) = magnitude.dim();
    if h != height || wh != half_width(width) {
        return Err(Error::invalid_input(format!(
            "spectrum shape {:?} inconsistent with {height}×{width}",
            magnitude.dim()
        )));
    }
    let mut out = Image::zeros((c, height, width));
    for ch in 0..c {
        let half = polar_to_half(magnitude, phase, ch, height, width);
        let plane = irfft2_channel(&half, height, width);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    Ok(out)
}

impl Spectrum {
    pub fn recompose(&self) -> Result<Image> {
        recompose(&self.magnitude, &self.phase, self.height, self.width)
    }
}

/// Gradient of a scalar loss with respect to the phase parameters, given the
/// loss gradient at the reconstructed image.
///
/// The chain is dφ ← dz ← dx with dz the adjoint of the Hermitian inverse
/// transform; on self-conjugate bins the projection r·cos(φ) contributes
/// −r·sin(φ)·dRe only.
pub fn phase_gradient_from_image_grad(
    magnitude: &Array3<f64>,
    phase: &Array3<f64>,
    grad_image: &Image,
    height: usize,
    width: usize,
) -> Array3<f64> {
    let (c, h, wh) = magnitude.dim();
    debug_assert_eq!(grad_image.dim(), (c, height, width));
    let mut grad_phase = Array3::zeros((c, h, wh));
    for ch in 0..c {
        let plane = grad_image.index_axis(ndarray::Axis(0), ch).to_owned();
        let gz = irfft2_adjoint_channel(&plane, height, width);
        for u in 0..h {
            for v in 0..wh {
                let r = magnitude[[ch, u, v]];
                let p = phase[[ch, u, v]];
                let g = gz[[u, v]];
                grad_phase[[ch, u, v]] = if is_self_conjugate(u, v, height, width) {
                    -r * p.sin() * g.re
                } else {
                    r * (g.im * p.cos() - g.re * p.sin())
                };
            }
        }
    }
    grad_phase
}

fn magnitude_of_resized(image: &Image, h: usize, w: usize) -> Result<Array3<f64>> {
    let resized = if image_shape(image).1 == h && image_shape(image).2 == w {
        image.clone()
    } else {
        bilinear_resize(image, h, w)
    };
    Ok(decompose(&resized)?.magnitude)
}

/// Elementwise mean of |F(x)| over a set of images, each bilinearly resized
/// to `target_size` first. Values are quantized to `f32` so the container
/// round-trip is exact.
pub fn compute_magnitude_template<I>(
    images: I,
    target_size: (usize, usize),
    source_label: impl Into<String>,
) -> Result<MagnitudeTemplate>
where
    I: IntoIterator,
    I::Item: Borrow<Image>,
{
    let (h, w) = target_size;
    let mut acc: Option<Array3<f64>> = None;
    let mut count = 0u64;
    for img in images {
        let m = magnitude_of_resized(img.borrow(), h, w)?;
        match acc.as_mut() {
            Some(a) => *a += &m,
            None => acc = Some(m),
        }
        count += 1;
    }
    let sum = acc.ok_or(Error::EmptyDataset)?;
    let mean = sum.mapv(|v| (v / count as f64) as f32 as f64);
    Ok(MagnitudeTemplate {
        magnitude: mean,
        height: h,
        width: w,
        source_count: count,
        source_label: source_label.into(),
    })
}

const TEMPLATE_MAGIC: &[u8; 8] = b"MACOMAG1";
const TEMPLATE_VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 16;

/// Write a template to its binary container.
///
/// Layout (little-endian): magic "MACOMAG1", u32 version, u32 channels,
/// u32 height, u32 width_half, u64 source_count, u32 label length, label
/// bytes, then channels·height·width_half f32 values in C-row-major order.
pub fn save_template(t: &MagnitudeTemplate, path: &Path) -> Result<()> {
    if t.width % 2 != 0 {
        return Err(Error::invalid_input(
            "template container stores the half-plane width; odd image widths are not representable",
        ));
    }
    let (c, h, wh) = t.magnitude.dim();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TEMPLATE_MAGIC);
    buf.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(wh as u32).to_le_bytes());
    buf.extend_from_slice(&t.source_count.to_le_bytes());
    let label = t.source_label.as_bytes();
    buf.extend_from_slice(&(label.len() as u32).to_le_bytes());
    buf.extend_from_slice(label);
    for &v in t.magnitude.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a template container written by [`save_template`].
pub fn load_template(path: &Path) -> Result<MagnitudeTemplate> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = crate::binio::Cursor::new(&data);
    let magic = cur.take(8, "magic")?;
    if magic != TEMPLATE_MAGIC {
        return Err(Error::format(0, "bad magic bytes (expected MACOMAG1)"));
    }
    let version = cur.u32("version")?;
    if version != TEMPLATE_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let header_at = cur.offset as u64;
    let c = cur.u32("channels")?;
    let h = cur.u32("height")?;
    let wh = cur.u32("width_half")?;
    if c == 0 || h == 0 || wh == 0 || c > MAX_DIM || h > MAX_DIM || wh > MAX_DIM {
        return Err(Error::format(
            header_at,
            format!("dimension overflow: channels={c} height={h} width_half={wh}"),
        ));
    }
    let source_count = cur.u64("source_count")?;
    let label_len = cur.u32("label length")? as usize;
    let label_bytes = cur.take(label_len, "label")?;
    let source_label = String::from_utf8(label_bytes.to_vec())
        .map_err(|_| Error::format(cur.offset as u64 - label_len as u64, "label is not UTF-8"))?;
    let n = c as usize * h as usize * wh as usize;
    let payload_at = cur.offset as u64;
    let payload = cur.take(n * 4, "magnitude payload")?;
    if cur.offset != data.len() {
        return Err(Error::format(
            cur.offset as u64,
            format!("{} trailing bytes after payload", data.len() - cur.offset),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::format(
                payload_at + (i as u64) * 4,
                "magnitude value is negative or non-finite",
            ));
        }
        values.push(v);
    }
    let magnitude = Array3::from_shape_vec((c as usize, h as usize, wh as usize), values)
        .expect("shape matches length");
    Ok(MagnitudeTemplate {
        magnitude,
        height: h as usize,
        width: 2 * (wh as usize - 1),
        source_count,
        source_label,
    })
}

impl MagnitudeTemplate {
    pub fn channels(&self) -> usize {
        self.magnitude.dim().0
    }

    /// Channel-averaged magnitude map, the input to spectrum diagnostics.
    pub fn mean_magnitude_plane(&self) -> Array2<f64> {
        let (c, h, wh) = self.magnitude.dim();
        let mut plane = Array2::zeros((h, wh));
        for ch in 0..c {
            plane += &self.magnitude.index_axis(ndarray::Axis(0), ch);
        }
        plane / c as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((c, h, w), |_| rng.gen::<f64>())
    }

    #[test]
    fn constant_image_dc_only() {
        let c = 0.37;
        let img = Image::from_elem((2, 8, 6), c);
        let s = decompose(&img).unwrap();
        for ch in 0..2 {
            for u in 0..8 {
                for v in 0..half_width(6) {
                    let m = s.magnitude[[ch, u, v]];
                    if u == 0 && v == 0 {
                        assert!((m - c * 8.0 * 6.0).abs() < 1e-9);
                    } else {
                        assert!(m.abs() < 1e-9, "bin ({u},{v}) magnitude {m}");
                    }
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_unit_spectrum() {
        let mut img = Image::zeros((1, 8, 8));
        img[[0, 0, 0]] = 1.0;
        let s = decompose(&img).unwrap();
        for u in 0..8 {
            for v in 0..half_width(8) {
                assert!((s.magnitude[[0, u, v]] - 1.0).abs() < 1e-12);
                assert!(s.phase[[0, u, v]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_random_images() {
        for seed in 0..5 {
            let img = random_image(3, 8, 8, seed);
            let s = decompose(&img).unwrap();
            let back = s.recompose().unwrap();
            let max_err = img
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-6, "round-trip error {max_err}");
        }
    }

    #[test]
    fn round_trip_odd_sizes() {
        for &(h, w) in &[(7, 7), (7, 8), (8, 7), (5, 9)] {
            let img = random_image(2, h, w, (h * 100 + w) as u64);
            let back = decompose(&img).unwrap().recompose().unwrap();
            let max_err = img
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-9, "{h}×{w} round-trip error {max_err}");
        }
    }

    #[test]
    fn zero_magnitude_gives_zero_image() {
        let mag = Array3::zeros((1, 6, half_width(6)));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phase = Array3::from_shape_fn((1, 6, half_width(6)), |_| {
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        let img = recompose(&mag, &phase, 6, 6).unwrap();
        assert!(img.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn recompose_real_for_arbitrary_phase() {
        // Oracle: run the full complex inverse on the Hermitian-completed
        // plane and check the imaginary residue directly.
        let h = 8;
        let w = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mag = Array3::from_shape_fn((1, h, half_width(w)), |_| rng.gen_range(0.0..3.0));
        let phase = Array3::from_shape_fn((1, h, half_width(w)), |_| {
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        let half = polar_to_half(&mag, &phase, 0, h, w);
        let mut full = hermitian_complete(&half, h, w);
        fft2_in_place(&mut full, true);
        let max_imag = full
            .iter()
            .map(|z| z.im.abs() / (h * w) as f64)
            .fold(0.0f64, f64::max);
        assert!(max_imag < 1e-9, "imaginary residue {max_imag}");
    }

    #[test]
    fn magnitude_scales_linearly() {
        let img = random_image(1, 8, 8, 3);
        let s1 = decompose(&img).unwrap();
        let s2 = decompose(&img.mapv(|v| v * 2.5)).unwrap();
        for (a, b) in s1.magnitude.iter().zip(s2.magnitude.iter()) {
            let expected = a * 2.5;
            assert!((b - expected).abs() <= 1e-9 * expected.abs().max(1e-300));
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mag = Array3::zeros((1, 6, half_width(6)));
        let phase = Array3::zeros((1, 6, half_width(8)));
        assert!(recompose(&mag, &phase, 6, 6).is_err());
    }

    #[test]
    fn non_finite_input_is_error() {
        let mut img = Image::zeros((1, 4, 4));
        img[[0, 1, 1]] = f64::NAN;
        assert!(decompose(&img).is_err());
    }

    #[test]
    fn template_of_single_image_is_its_magnitude() {
        let img = random_image(3, 8, 8, 7);
        let t = compute_magnitude_template([img.clone()], (8, 8), "one").unwrap();
        let m = decompose(&img).unwrap().magnitude;
        for (a, b) in t.magnitude.iter().zip(m.iter()) {
            // Quantized through f32 at construction.
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(t.source_count, 1);
    }

    #[test]
    fn template_of_two_images_is_elementwise_mean() {
        let x1 = random_image(3, 8, 8, 21);
        let x2 = random_image(3, 8, 8, 22);
        let t = compute_magnitude_template([x1.clone(), x2.clone()], (8, 8), "two").unwrap();
        let m1 = decompose(&x1).unwrap().magnitude;
        let m2 = decompose(&x2).unwrap().magnitude;
        for ((a, b), tv) in m1.iter().zip(m2.iter()).zip(t.magnitude.iter()) {
            let mean = ((a + b) / 2.0) as f32 as f64;
            assert_eq!(*tv, mean);
        }
        assert_eq!(t.source_count, 2);
    }

    #[test]
    fn template_mean_matches_brute_force_up_to_four() {
        for n in 1..=4usize {
            let images: Vec<Image> = (0..n).map(|i| random_image(2, 6, 6, 40 + i as u64)).collect();
            let t = compute_magnitude_template(images.iter().cloned(), (6, 6), "bf").unwrap();
            let mags: Vec<_> = images.iter().map(|x| decompose(x).unwrap().magnitude).collect();
            let mut expected = Array3::<f64>::zeros(mags[0].dim());
            for m in &mags {
                expected += m;
            }
            let expected = expected.mapv(|v| (v / n as f64) as f32 as f64);
            assert_eq!(t.magnitude, expected, "n = {n}");
        }
    }

    #[test]
    fn template_mean_is_order_invariant() {
        let images: Vec<Image> = (0..3).map(|i| random_image(1, 6, 6, 60 + i)).collect();
        let fwd = compute_magnitude_template(images.iter().cloned(), (6, 6), "a").unwrap();
        let rev =
            compute_magnitude_template(images.iter().rev().cloned(), (6, 6), "a").unwrap();
        let max_diff = fwd
            .magnitude
            .iter()
            .zip(rev.magnitude.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9);
    }

    #[test]
    fn empty_template_is_error() {
        let none: Vec<Image> = vec![];
        assert!(matches!(
            compute_magnitude_template(none, (8, 8), "none"),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn template_container_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mag");
        let imgs: Vec<Image> = (0..3).map(|i| random_image(3, 8, 8, 70 + i)).collect();
        let t = compute_magnitude_template(imgs, (8, 8), "round trip label").unwrap();
        save_template(&t, &path).unwrap();
        let back = load_template(&path).unwrap();
        assert_eq!(t.magnitude, back.magnitude);
        assert_eq!(t.source_count, back.source_count);
        assert_eq!(t.source_label, back.source_label);
        assert_eq!(t.height, back.height);
        assert_eq!(t.width, back.width);
    }

    #[test]
    fn template_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mag");
        fs::write(&path, b"NOTMAGIC rest of file").unwrap();
        match load_template(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn template_truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.mag");
        let img = random_image(1, 6, 6, 80);
        let t = compute_magnitude_template([img], (6, 6), "t").unwrap();
        save_template(&t, &path).unwrap();
        let data = fs::read(&path).unwrap();
        fs::write(&path, &data[..data.len() - 7]).unwrap();
        match load_template(&path) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("truncated"), "message: {message}")
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn template_dimension_overflow_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dims.mag");
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(TEMPLATE_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&(1u32 << 20).to_le_bytes()); // absurd height
        buf.extend_from_slice(&5u32.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &buf).unwrap();
        assert!(matches!(load_template(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn phase_gradient_matches_finite_differences() {
        // L(x) = Σ c_p x_p for random c: dL/dφ should match central
        // differences through the reconstruction.
        let h = 6;
        let w = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mag = Array3::from_shape_fn((1, h, half_width(w)), |_| rng.gen_range(0.1..2.0));
        let mut phase = Array3::from_shape_fn((1, h, half_width(w)), |_| {
            rng.gen_range(-3.0f64..3.0)
        });
        let coeffs = Array3::from_shape_fn((1, h, w), |_| rng.gen_range(-1.0f64..1.0));
        let loss = |ph: &Array3<f64>| -> f64 {
            let img = recompose(&mag, ph, h, w).unwrap();
            (&img * &coeffs).sum()
        };
        let analytic = phase_gradient_from_image_grad(&mag, &phase, &coeffs, h, w);
        let eps = 1e-5;
        for u in 0..h {
            for v in 0..half_width(w) {
                let orig = phase[[0, u, v]];
                phase[[0, u, v]] = orig + eps;
                let up = loss(&phase);
                phase[[0, u, v]] = orig - eps;
                let dn = loss(&phase);
                phase[[0, u, v]] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let an = analytic[[0, u, v]];
                assert!(
                    (fd - an).abs() < 1e-6 * fd.abs().max(1.0),
                    "bin ({u},{v}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn single_bin_phase_gradient_is_minus_r_sin() {
        // 1×1 image: x = r·cos(φ), so dx/dφ = −r·sin(φ).
        let mag = Array3::from_elem((1, 1, 1), 1.7);
        let phase = Array3::from_elem((1, 1, 1), 0.9);
        let grad_img = Image::from_elem((1, 1, 1), 1.0);
        let g = phase_gradient_from_image_grad(&mag, &phase, &grad_img, 1, 1);
        let expected = -1.7 * 0.9f64.sin();
        assert!((g[[0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn channel_independence() {
        let img = random_image(3, 8, 8, 5);
        let s = decompose(&img).unwrap();
        let single = decompose(&img.index_axis(Axis(0), 1).to_owned().insert_axis(Axis(0))).unwrap();
        let diff = s
            .magnitude
            .index_axis(Axis(0), 1)
            .iter()
            .zip(single.magnitude.index_axis(Axis(0), 0).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12);
    }
}
