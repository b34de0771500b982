//! SIFT descriptors at fixed geometry, dense per-pixel descriptor grids,
//! a single-octave difference-of-Gaussians detector, and subpixel
//! descriptor sampling.
//!
//! Descriptor layout: 4x4 spatial cells, 8 orientation bins per cell, index
//! `(cell_row * 4 + cell_col) * 8 + orientation_bin`.
//!
//! Binning arithmetic, for a patch of side `size` centred at `(x, y)` with
//! orientation `theta`:
//! - every image pixel `(px, py)` whose rotated offset `(rx, ry)` satisfies
//!   `|rx| < size/2` and `|ry| < size/2` contributes; for an integer centre
//!   and `size = 15` that is exactly the 15x15 pixel block
//! - gradients are central differences with indices clamped to the image;
//!   pixels outside the image contribute nothing
//! - contribution = magnitude * exp(-(rx^2 + ry^2) / (2 sigma^2)),
//!   `sigma = size / 2`
//! - continuous bin coordinates: `bx = (rx + size/2) / (size/4) - 0.5`
//!   (likewise `by`), `bo = ((angle - theta) mod 2pi) / (pi/4)`; bin `o` is
//!   centred on angle `o * pi/4`
//! - trilinear split to `floor` and `floor + 1` on each axis (orientation
//!   wraps, spatial bins outside `0..4` are dropped)
//! - L2-normalize, then clamp at 0.2 and renormalize, iterated to its fixed
//!   point (solved exactly below), so every entry is at most 0.2 and the norm
//!   is 1 whenever at least 25 entries are nonzero

use std::f64::consts::{PI, SQRT_2, TAU};

use rayon::prelude::*;

use crate::imgcore::{to_grayscale, BilinearCell, ImageBuffer, ScalarField};
use crate::{Error, Result};

pub const DESCRIPTOR_LEN: usize = 128;
pub const DEFAULT_PATCH_SIZE: f64 = 15.0;
pub const DEFAULT_CONTRAST_THRESHOLD: f64 = 0.03;
pub const DEFAULT_MAX_KEYPOINTS: usize = 500;
pub const DETECTOR_BASE_SIGMA: f64 = 1.6;
const CLAMP: f64 = 0.2;
const SPATIAL_BINS: usize = 4;
const ORIENTATION_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor(pub [f64; DESCRIPTOR_LEN]);

impl Descriptor {
    pub const ZERO: Descriptor = Descriptor([0.0; DESCRIPTOR_LEN]);

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// Gradient magnitude and angle in `[0, 2pi)` at one pixel.
#[inline]
fn pixel_polar(data: &[f64], width: usize, height: usize, px: usize, py: usize) -> (f64, f64) {
    let at = |y: usize, x: usize| data[y * width + x];
    let gx = 0.5 * (at(py, (px + 1).min(width - 1)) - at(py, px.saturating_sub(1)));
    let gy = 0.5 * (at((py + 1).min(height - 1), px) - at(py.saturating_sub(1), px));
    let mag = (gx * gx + gy * gy).sqrt();
    let mut ang = gy.atan2(gx);
    if ang < 0.0 {
        ang += TAU;
    }
    (mag, ang)
}

/// Accumulates the raw (unnormalized) histogram. `polar(px, py)` supplies
/// the gradient so dense and single-point paths share every operation.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    hist: &mut [f64; DESCRIPTOR_LEN],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    size: f64,
    orientation: f64,
    polar: impl Fn(usize, usize) -> (f64, f64),
) {
    let half = 0.5 * size;
    let bin_width = size / SPATIAL_BINS as f64;
    let sigma = 0.5 * size;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let (sin_t, cos_t) = orientation.sin_cos();
    let reach = (half * SQRT_2).ceil() as isize + 1;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let orientation_step = TAU / ORIENTATION_BINS as f64;

    for py in (cy - reach)..=(cy + reach) {
        if py < 0 || py >= height as isize {
            continue;
        }
        for px in (cx - reach)..=(cx + reach) {
            if px < 0 || px >= width as isize {
                continue;
            }
            let (dx, dy) = (px as f64 - x, py as f64 - y);
            let rx = cos_t * dx + sin_t * dy;
            let ry = -sin_t * dx + cos_t * dy;
            if rx.abs() >= half || ry.abs() >= half {
                continue;
            }
            let (mag, ang) = polar(px as usize, py as usize);
            if mag == 0.0 {
                continue;
            }
            let weight = mag * (-(rx * rx + ry * ry) * inv_two_sigma_sq).exp();

            let bx = (rx + half) / bin_width - 0.5;
            let by = (ry + half) / bin_width - 0.5;
            let mut rel = ang - orientation;
            rel = rel.rem_euclid(TAU);
            let bo = rel / orientation_step;

            let (x0, y0, o0) = (bx.floor(), by.floor(), bo.floor());
            let (fx, fy, fo) = (bx - x0, by - y0, bo - o0);
            let o0 = (o0 as isize).rem_euclid(ORIENTATION_BINS as isize) as usize;
            let o1 = (o0 + 1) % ORIENTATION_BINS;
            for (xi, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                if !(0..SPATIAL_BINS as isize).contains(&xi) {
                    continue;
                }
                for (yi, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                    if !(0..SPATIAL_BINS as isize).contains(&yi) {
                        continue;
                    }
                    let base = (yi as usize * SPATIAL_BINS + xi as usize) * ORIENTATION_BINS;
                    let w = weight * wx * wy;
                    hist[base + o0] += w * (1.0 - fo);
                    hist[base + o1] += w * fo;
                }
            }
        }
    }
}

/// L2-normalize, then solve the fixed point of "clamp at 0.2, renormalize".
///
/// The fixed point clamps the `k` largest entries to 0.2 and scales the rest
/// by `s` with `k * 0.04 + s^2 * rest_sq = 1`, taking the smallest `k` for
/// which no scaled entry exceeds 0.2. With fewer than 25 nonzero entries
/// every nonzero entry ends at 0.2. The zero vector maps to itself.
pub fn normalize_descriptor(hist: &mut [f64; DESCRIPTOR_LEN]) {
    let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        *hist = [0.0; DESCRIPTOR_LEN];
        return;
    }
    hist.iter_mut().for_each(|x| *x /= norm);

    let mut order: Vec<usize> = (0..DESCRIPTOR_LEN).collect();
    order.sort_by(|&a, &b| hist[b].total_cmp(&hist[a]).then(a.cmp(&b)));
    let mut rest_sq: f64 = hist.iter().map(|x| x * x).sum();
    let mut clamped = 0;
    let mut scale = 0.0;
    while clamped < DESCRIPTOR_LEN {
        let budget = 1.0 - clamped as f64 * CLAMP * CLAMP;
        let top = hist[order[clamped]];
        if top == 0.0 || budget <= 0.0 {
            break;
        }
        let s = (budget / rest_sq).sqrt();
        if top * s <= CLAMP {
            scale = s;
            break;
        }
        rest_sq -= top * top;
        clamped += 1;
    }
    for (rank, &k) in order.iter().enumerate() {
        hist[k] = if rank < clamped {
            if hist[k] > 0.0 {
                CLAMP
            } else {
                0.0
            }
        } else {
            hist[k] * scale
        };
    }
}

fn check_geometry(size: f64) -> Result<()> {
    if !(size >= 3.0 && size.is_finite()) {
        return Err(Error::Config(format!("descriptor size must be >= 3, got {size}")));
    }
    Ok(())
}

/// Descriptor of the `size x size` patch centred at subpixel `(x, y)`.
pub fn compute_descriptor(img: &ImageBuffer, x: f64, y: f64, size: f64, orientation: f64) -> Result<Descriptor> {
    check_geometry(size)?;
    let gray = to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
        return Err(Error::Config(format!(
            "descriptor centre ({x}, {y}) lies outside the {w}x{h} image"
        )));
    }
    let data = gray.data();
    let mut hist = [0.0; DESCRIPTOR_LEN];
    accumulate(&mut hist, w, h, x, y, size, orientation, |px, py| {
        pixel_polar(data, w, h, px, py)
    });
    normalize_descriptor(&mut hist);
    Ok(Descriptor(hist))
}

/// One descriptor per pixel, stored row-major as `H x W x 128`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DescriptorGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * DESCRIPTOR_LEN {
            return Err(Error::Config(format!(
                "descriptor grid of {} values cannot be {width}x{height}x{DESCRIPTOR_LEN}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("descriptor grid holds non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The 128 values at pixel `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let k = (row * self.width + col) * DESCRIPTOR_LEN;
        &self.data[k..k + DESCRIPTOR_LEN]
    }

    pub fn descriptor(&self, row: usize, col: usize) -> Descriptor {
        let mut d = [0.0; DESCRIPTOR_LEN];
        d.copy_from_slice(self.at(row, col));
        Descriptor(d)
    }
}

/// `grid[i][j] == compute_descriptor(img, j, i, size, 0)` for every pixel.
pub fn compute_dense_grid(img: &ImageBuffer, size: f64) -> Result<DescriptorGrid> {
    check_geometry(size)?;
    let gray = to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    let data = gray.data();
    let polar: Vec<(f64, f64)> = (0..w * h).map(|k| pixel_polar(data, w, h, k % w, k / w)).collect();

    let mut out = vec![0.0; w * h * DESCRIPTOR_LEN];
    out.par_chunks_mut(w * DESCRIPTOR_LEN).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.chunks_exact_mut(DESCRIPTOR_LEN).enumerate() {
            let mut hist = [0.0; DESCRIPTOR_LEN];
            accumulate(&mut hist, w, h, j as f64, i as f64, size, 0.0, |px, py| polar[py * w + px]);
            normalize_descriptor(&mut hist);
            slot.copy_from_slice(&hist);
        }
    });
    DescriptorGrid::new(w, h, out)
}

/// Bilinearly interpolated descriptor with per-element partials.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSample {
    pub descriptor: Descriptor,
    pub d_du: [f64; DESCRIPTOR_LEN],
    pub d_dv: [f64; DESCRIPTOR_LEN],
    pub in_bounds: bool,
}

pub fn sample_descriptor(grid: &DescriptorGrid, u: f64, v: f64) -> DescriptorSample {
    let mut out = DescriptorSample {
        descriptor: Descriptor::ZERO,
        d_du: [0.0; DESCRIPTOR_LEN],
        d_dv: [0.0; DESCRIPTOR_LEN],
        in_bounds: false,
    };
    if let Some(cell) = BilinearCell::locate(grid.width, grid.height, u, v) {
        out.in_bounds = true;
        for l in 0..DESCRIPTOR_LEN {
            let (value, du, dv) = cell.interpolate(&grid.data, grid.width, DESCRIPTOR_LEN, l);
            out.descriptor.0[l] = value;
            out.d_du[l] = du;
            out.d_dv[l] = dv;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub orientation: f64,
    /// Absolute DoG response.
    pub response: f64,
}

/// Keypoints in descending response order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Row-major pixel indices of the keypoint locations, deduplicated.
    pub fn pixel_indices(&self, width: usize, height: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .keypoints
            .iter()
            .map(|k| {
                let col = (k.x.round().max(0.0) as usize).min(width - 1);
                let row = (k.y.round().max(0.0) as usize).min(height - 1);
                row * width + col
            })
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// The three DoG levels used by the detector. Gaussian levels are
/// `1.6 * k^(l-1)`, `l = 0..4`, `k = 2^(1/3)`; level `l` of the result is
/// `G[l+1] - G[l]` and the middle level is centred on the base scale.
pub fn dog_stack(img: &ImageBuffer) -> Result<[ScalarField; 3]> {
    let gray = to_grayscale(img).as_field();
    let k = 2f64.powf(1.0 / 3.0);
    let gauss = (0..4)
        .map(|l| crate::imgcore::blur_field(&gray, DETECTOR_BASE_SIGMA * k.powi(l - 1)))
        .collect::<Result<Vec<_>>>()?;
    let diff = |a: &ScalarField, b: &ScalarField| {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect();
        ScalarField::new(a.width(), a.height(), data)
    };
    Ok([diff(&gauss[0], &gauss[1])?, diff(&gauss[1], &gauss[2])?, diff(&gauss[2], &gauss[3])?])
}

/// DoG extrema on the middle level of [`dog_stack`] with
/// `|response| >= contrast_threshold`, a 3x3x3 extremum test (ties inside
/// the level go to the pixel first in `(y, x)` order), greedy suppression of
/// anything within 1.5 px of a stronger keypoint, and the strongest
/// `max_count` kept. Size is fixed to 15 and orientation to 0.
pub fn detect_keypoints(img: &ImageBuffer, max_count: usize, contrast_threshold: f64) -> Result<KeypointSet> {
    if max_count == 0 {
        return Err(Error::Config("max_count must be at least 1".into()));
    }
    let dogs = dog_stack(img)?;
    let (w, h) = (dogs[1].width(), dogs[1].height());
    let mut found = Vec::new();
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let v = dogs[1].get(i, j);
            if v.abs() < contrast_threshold || v == 0.0 {
                continue;
            }
            let sign = v.signum();
            let mut extremum = true;
            'scan: for (l, level) in dogs.iter().enumerate() {
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        if l == 1 && di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = ((i as isize + di) as usize, (j as isize + dj) as usize);
                        let n = sign * level.get(ni, nj);
                        let s = sign * v;
                        let beaten = if l == 1 {
                            n > s || (n == s && (ni, nj) < (i, j))
                        } else {
                            n > s
                        };
                        if beaten {
                            extremum = false;
                            break 'scan;
                        }
                    }
                }
            }
            if extremum {
                found.push(Keypoint {
                    x: j as f64,
                    y: i as f64,
                    size: DEFAULT_PATCH_SIZE,
                    orientation: 0.0,
                    response: v.abs(),
                });
            }
        }
    }
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    let mut kept: Vec<Keypoint> = Vec::new();
    for kp in found {
        if kept.len() == max_count {
            break;
        }
        if kept.iter().all(|k| (k.x - kp.x).hypot(k.y - kp.y) > 1.5) {
            kept.push(kp);
        }
    }
    Ok(KeypointSet { keypoints: kept })
}

/// Orientation-bin centre angle.
pub fn orientation_bin_angle(bin: usize) -> f64 {
    bin as f64 * PI / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.random::<f64>()).collect();
        ImageBuffer::new(w, h, 1, data).unwrap()
    }

    fn blob_image(w: usize, h: usize, centers: &[(f64, f64)], sigma: f64) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |i, j| {
            centers
                .iter()
                .map(|&(cx, cy)| {
                    let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
        .unwrap()
    }

    /// Independent descriptor: explicit tent weights over every bin instead
    /// of floor-based splitting, own gradient code, then the same fixed-point
    /// normalization.
    fn brute_force_descriptor(img: &ImageBuffer, x: f64, y: f64, size: f64) -> [f64; DESCRIPTOR_LEN] {
        let (w, h) = (img.width(), img.height());
        let px_val = |r: isize, c: isize| {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            img.get(r, c, 0)
        };
        let tent = |d: f64| (1.0 - d.abs()).max(0.0);
        let mut hist = [0.0; DESCRIPTOR_LEN];
        let half = size / 2.0;
        for r in 0..h as isize {
            for c in 0..w as isize {
                let (dx, dy) = (c as f64 - x, r as f64 - y);
                if dx.abs() >= half || dy.abs() >= half {
                    continue;
                }
                let gx = (px_val(r, c + 1) - px_val(r, c - 1)) / 2.0;
                let gy = (px_val(r + 1, c) - px_val(r - 1, c)) / 2.0;
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let ang = gy.atan2(gx).rem_euclid(TAU);
                let g = (-(dx * dx + dy * dy) / (2.0 * half * half)).exp();
                let bx = (dx + half) / (size / 4.0) - 0.5;
                let by = (dy + half) / (size / 4.0) - 0.5;
                let bo = ang / (PI / 4.0);
                for cy in 0..4 {
                    for cx in 0..4 {
                        for o in 0..8 {
                            let d_o = (bo - o as f64).rem_euclid(8.0);
                            let wo = tent(d_o.min(8.0 - d_o));
                            hist[(cy * 4 + cx) * 8 + o] +=
                                mag * g * tent(bx - cx as f64) * tent(by - cy as f64) * wo;
                        }
                    }
                }
            }
        }
        normalize_descriptor(&mut hist);
        hist
    }

    #[test]
    fn uniform_patch_gives_zero_descriptor() {
        let img = ImageBuffer::constant(20, 20, 0.4).unwrap();
        assert!(compute_descriptor(&img, 10.0, 10.0, 15.0, 0.0).unwrap().is_zero());
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        assert!(grid.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn offset_invariance() {
        let base = noise_image(24, 24, 3);
        let scaled = ImageBuffer::from_fn(24, 24, |i, j| 0.5 * base.get(i, j, 0)).unwrap();
        let shifted = ImageBuffer::from_fn(24, 24, |i, j| 0.5 * base.get(i, j, 0) + 0.3).unwrap();
        for &(x, y) in &[(12.0, 12.0), (3.0, 20.0), (7.5, 9.25)] {
            let a = compute_descriptor(&scaled, x, y, 15.0, 0.0).unwrap();
            let b = compute_descriptor(&shifted, x, y, 15.0, 0.0).unwrap();
            for (p, q) in a.0.iter().zip(b.0.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_edge_mass_sits_in_zero_angle_bin() {
        let img = ImageBuffer::from_fn(31, 31, |_, j| if j >= 16 { 1.0 } else { 0.0 }).unwrap();
        let d = compute_descriptor(&img, 15.0, 15.0, 15.0, 0.0).unwrap();
        // brute-force census of the patch gradients: all point along +x
        for r in 8..=22usize {
            for c in 8..=22usize {
                let gx = (img.get(r, (c + 1).min(30), 0) - img.get(r, c - 1, 0)) / 2.0;
                let gy = (img.get((r + 1).min(30), c, 0) - img.get(r - 1, c, 0)) / 2.0;
                assert_eq!(gy, 0.0);
                assert!(gx >= 0.0);
            }
        }
        assert!(!d.is_zero());
        for (k, v) in d.0.iter().enumerate() {
            if *v != 0.0 {
                assert!(k % 8 == 0 || k % 8 == 7, "mass in orientation bin {}", k % 8);
            }
        }
        let oracle = brute_force_descriptor(&img, 15.0, 15.0, 15.0);
        for (a, b) in d.0.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn binning_matches_tent_weight_oracle() {
        let img = noise_image(30, 26, 11);
        for &(x, y) in &[(15.0, 13.0), (2.0, 2.0), (29.0, 0.0), (10.0, 20.0)] {
            let d = compute_descriptor(&img, x, y, 15.0, 0.0).unwrap();
            let oracle = brute_force_descriptor(&img, x, y, 15.0);
            for (a, b) in d.0.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} at ({x},{y})");
            }
        }
    }

    #[test]
    fn dense_grid_equals_point_calls_bit_for_bit() {
        let img = noise_image(17, 13, 5);
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        for i in 0..13 {
            for j in 0..17 {
                let d = compute_descriptor(&img, j as f64, i as f64, 15.0, 0.0).unwrap();
                assert_eq!(grid.at(i, j), &d.0[..]);
            }
        }
    }

    #[test]
    fn noise_grid_norm_census() {
        let img = noise_image(64, 64, 1);
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        assert_eq!(grid.data().len(), 64 * 64 * 128);
        assert!(grid.data().iter().all(|x| x.is_finite()));
        let unit = (0..64 * 64)
            .filter(|k| {
                let n = grid.descriptor(k / 64, k % 64).norm();
                (n - 1.0).abs() < 1e-9
            })
            .count();
        assert!(unit as f64 >= 0.99 * 4096.0, "{unit} unit-norm descriptors");
        for v in grid.data() {
            assert!(*v >= 0.0 && *v <= 0.2 + 1e-12);
        }
    }

    #[test]
    fn normalization_fixed_point() {
        let mut sparse = [0.0; DESCRIPTOR_LEN];
        sparse[3] = 5.0;
        sparse[9] = 1.0;
        normalize_descriptor(&mut sparse);
        assert_eq!(sparse[3], 0.2);
        assert_eq!(sparse[9], 0.2);
        let mut dense = [0.0; DESCRIPTOR_LEN];
        for (k, x) in dense.iter_mut().enumerate() {
            *x = 1.0 + (k % 7) as f64;
        }
        dense[0] = 500.0;
        normalize_descriptor(&mut dense);
        let n: f64 = dense.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(dense[0], 0.2);
        assert!(dense.iter().all(|&x| x <= 0.2));
        // applying it again changes nothing
        let mut again = dense;
        normalize_descriptor(&mut again);
        for (a, b) in again.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_preconditions() {
        let img = noise_image(8, 8, 2);
        assert!(compute_descriptor(&img, 8.5, 2.0, 15.0, 0.0).is_err());
        assert!(compute_descriptor(&img, 2.0, 2.0, 2.0, 0.0).is_err());
        assert!(compute_dense_grid(&img, 1.0).is_err());
    }

    #[test]
    fn sample_descriptor_lattice_and_midpoint() {
        let img = noise_image(9, 7, 8);
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        let s = sample_descriptor(&grid, 4.0, 3.0);
        assert!(s.in_bounds);
        assert_eq!(&s.descriptor.0[..], grid.at(3, 4));
        let m = sample_descriptor(&grid, 4.5, 3.0);
        for l in 0..DESCRIPTOR_LEN {
            let avg = 0.5 * (grid.at(3, 4)[l] + grid.at(3, 5)[l]);
            assert!((m.descriptor.0[l] - avg).abs() < 1e-15);
        }
        let out = sample_descriptor(&grid, -0.5, 3.0);
        assert!(!out.in_bounds);
        assert!(out.descriptor.is_zero());
    }

    #[test]
    fn sample_descriptor_matches_elementwise_oracle() {
        let img = noise_image(9, 7, 9);
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        let (u, v) = (2.37, 4.81);
        let s = sample_descriptor(&grid, u, v);
        let (a, b) = (0.37, 0.81);
        for l in 0..DESCRIPTOR_LEN {
            let c = |r: usize, q: usize| grid.at(r, q)[l];
            let oracle = (1.0 - a) * (1.0 - b) * c(4, 2) + a * (1.0 - b) * c(4, 3) + (1.0 - a) * b * c(5, 2) + a * b * c(5, 3);
            assert!((s.descriptor.0[l] - oracle).abs() < 1e-12);
            let du = (1.0 - b) * (c(4, 3) - c(4, 2)) + b * (c(5, 3) - c(5, 2));
            assert!((s.d_du[l] - du).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = ImageBuffer::constant(32, 32, 0.6).unwrap();
        assert!(detect_keypoints(&img, 10, 0.01).unwrap().is_empty());
        assert!(detect_keypoints(&img, 0, 0.01).is_err());
    }

    #[test]
    fn single_blob_gives_one_keypoint_at_dog_argmax() {
        let img = blob_image(33, 33, &[(16.0, 16.0)], 2.0);
        let kps = detect_keypoints(&img, 10, DEFAULT_CONTRAST_THRESHOLD).unwrap();
        assert_eq!(kps.len(), 1, "{kps:?}");
        let dogs = dog_stack(&img).unwrap();
        let mid = &dogs[1];
        let (mut best, mut arg) = (0.0, (0, 0));
        for i in 0..33 {
            for j in 0..33 {
                if mid.get(i, j).abs() > best {
                    best = mid.get(i, j).abs();
                    arg = (i, j);
                }
            }
        }
        let k = kps.keypoints[0];
        assert_eq!((k.y as usize, k.x as usize), arg);
        assert!((k.x - 16.0).hypot(k.y - 16.0) <= 1.5);
        assert_eq!(k.size, 15.0);
        assert_eq!(k.orientation, 0.0);
    }

    #[test]
    fn twin_blobs_tie_break_by_row_then_column() {
        let img = blob_image(48, 32, &[(12.0, 16.0), (35.0, 16.0)], 2.0);
        let kps = detect_keypoints(&img, 10, DEFAULT_CONTRAST_THRESHOLD).unwrap();
        assert_eq!(kps.len(), 2, "{kps:?}");
        let (a, b) = (kps.keypoints[0], kps.keypoints[1]);
        assert!((a.response - b.response).abs() < 1e-9);
        assert!(a.x < b.x);
        let again = detect_keypoints(&img, 10, DEFAULT_CONTRAST_THRESHOLD).unwrap();
        assert_eq!(kps, again);
    }

    #[test]
    fn keypoint_set_invariants_on_noise() {
        let img = crate::imgcore::gaussian_blur(&noise_image(48, 48, 4), 1.0).unwrap();
        let kps = detect_keypoints(&img, 40, 0.005).unwrap();
        assert!(!kps.is_empty());
        assert!(kps.len() <= 40);
        for pair in kps.keypoints.windows(2) {
            assert!(pair[0].response >= pair[1].response);
        }
        for (n, a) in kps.keypoints.iter().enumerate() {
            assert!(a.x >= 0.0 && a.x < 48.0 && a.y >= 0.0 && a.y < 48.0);
            for b in &kps.keypoints[n + 1..] {
                assert!((a.x - b.x).hypot(a.y - b.y) > 1.0);
            }
        }
    }
}
