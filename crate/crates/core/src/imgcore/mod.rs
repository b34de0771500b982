//! Image containers and the shared numeric substrate: grayscale conversion,
//! forward-difference gradients, separable Gaussian blur, and bilinear
//! sampling with exact partial derivatives.
//!
//! Pixel `(row i, col j)` sits at continuous coordinate `(u = j, v = i)`.

mod io;

pub use io::{read_pfm, read_pnm, write_pfm, write_pgm, write_ppm};

use crate::{Error, Result};

/// Row-major intensities in `[0, 1]`, 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Config(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(k) = data
            .iter()
            .position(|x| !x.is_finite() || *x < 0.0 || *x > 1.0)
        {
            return Err(Error::Config(format!(
                "image value {} at index {k} is outside [0, 1]",
                data[k]
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image filled with `value`.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, 1, vec![value; width * height])
    }

    /// Build a grayscale image from `f(row, col)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Channel `c` as a scalar field.
    pub fn channel(&self, c: usize) -> ScalarField {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ScalarField {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn as_field(&self) -> ScalarField {
        self.channel(0)
    }
}

/// Real-valued row-major 2-D array. Holds quantities that are not
/// intensities: gradients, DoG responses, depth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Config(format!(
                "field of {} values cannot be {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Interpret as a one-channel image, clamping into `[0, 1]`.
    pub fn to_image_clamped(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .map(|x| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 })
                .collect(),
        }
    }
}

/// Result of sampling at a subpixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleResult {
    pub value: f64,
    pub d_du: f64,
    pub d_dv: f64,
    pub in_bounds: bool,
}

impl SampleResult {
    pub const OUTSIDE: SampleResult = SampleResult {
        value: 0.0,
        d_du: 0.0,
        d_dv: 0.0,
        in_bounds: false,
    };
}

/// The bilinear cell containing a subpixel point: corner indices and the
/// fractional offsets `a` (along u) and `b` (along v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearCell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub a: f64,
    pub b: f64,
}

impl BilinearCell {
    /// `None` unless `0 <= u <= width-1` and `0 <= v <= height-1`. The last
    /// row/column is handled by the cell to its left/top with offset 1, so
    /// samples on the far border stay in bounds.
    #[inline]
    pub fn locate(width: usize, height: usize, u: f64, v: f64) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        if !(u >= 0.0 && u <= w - 1.0 && v >= 0.0 && v <= h - 1.0) {
            return None;
        }
        let (x0, x1) = corner_pair(u, width);
        let (y0, y1) = corner_pair(v, height);
        Some(Self {
            x0,
            y0,
            x1,
            y1,
            a: u - x0 as f64,
            b: v - y0 as f64,
        })
    }

    /// Four-corner interpolation of a row-major plane with element stride
    /// `stride` and offset `offset`, returning value and partials.
    #[inline]
    pub fn interpolate(&self, plane: &[f64], width: usize, stride: usize, offset: usize) -> (f64, f64, f64) {
        let at = |y: usize, x: usize| plane[(y * width + x) * stride + offset];
        let i00 = at(self.y0, self.x0);
        let i10 = at(self.y0, self.x1);
        let i01 = at(self.y1, self.x0);
        let i11 = at(self.y1, self.x1);
        let (a, b) = (self.a, self.b);
        let value = (1.0 - a) * (1.0 - b) * i00 + a * (1.0 - b) * i10 + (1.0 - a) * b * i01 + a * b * i11;
        let d_du = (1.0 - b) * (i10 - i00) + b * (i11 - i01);
        let d_dv = (1.0 - a) * (i01 - i00) + a * (i11 - i10);
        (value, d_du, d_dv)
    }
}

#[inline]
fn corner_pair(coord: f64, extent: usize) -> (usize, usize) {
    if extent < 2 {
        return (0, 0);
    }
    let lo = (coord.floor() as usize).min(extent - 2);
    (lo, lo + 1)
}

/// Bilinear sample of channel 0.
pub fn bilinear_sample(img: &ImageBuffer, u: f64, v: f64) -> SampleResult {
    bilinear_sample_channel(img, 0, u, v)
}

pub fn bilinear_sample_channel(img: &ImageBuffer, channel: usize, u: f64, v: f64) -> SampleResult {
    match BilinearCell::locate(img.width, img.height, u, v) {
        Some(cell) => {
            let (value, d_du, d_dv) = cell.interpolate(&img.data, img.width, img.channels, channel);
            SampleResult {
                value,
                d_du,
                d_dv,
                in_bounds: true,
            }
        }
        None => SampleResult::OUTSIDE,
    }
}

/// Luma with weights 0.299/0.587/0.114; one-channel input is returned as is.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Forward differences; the last column of `gx` and last row of `gy` are 0.
pub fn image_gradient(img: &ImageBuffer) -> Result<(ScalarField, ScalarField)> {
    if img.channels != 1 {
        return Err(Error::Config(format!(
            "image_gradient expects one channel, got {}",
            img.channels
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut gx = ScalarField::zeros(w, h);
    let mut gy = ScalarField::zeros(w, h);
    for i in 0..h {
        for j in 0..w {
            let here = img.data[i * w + j];
            if j + 1 < w {
                gx.data[i * w + j] = img.data[i * w + j + 1] - here;
            }
            if i + 1 < h {
                gy.data[i * w + j] = img.data[(i + 1) * w + j] - here;
            }
        }
    }
    Ok((gx, gy))
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur with replicated borders.
pub fn blur_field(field: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (field.width, field.height);
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    for i in 0..h {
        let row = &field.data[i * w..(i + 1) * w];
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in taps.iter().zip(-r..=r) {
                acc += t * row[clamp(j as isize + k, w)];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in taps.iter().zip(-r..=r) {
                acc += t * tmp[clamp(i as isize + k, h) * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    ScalarField::new(w, h, out)
}

/// Blur every channel; the result stays in `[0, 1]`.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    let mut data = vec![0.0; img.data.len()];
    for c in 0..img.channels {
        let blurred = blur_field(&img.channel(c), sigma)?;
        for (k, v) in blurred.data.iter().enumerate() {
            data[k * img.channels + c] = v.clamp(0.0, 1.0);
        }
    }
    ImageBuffer::new(img.width, img.height, img.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: &[f64]) -> ImageBuffer {
        ImageBuffer::new(w, h, 1, data.to_vec()).unwrap()
    }

    fn smooth_image(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |i, j| {
            0.5 + 0.3 * (j as f64 * 0.21).sin() * (i as f64 * 0.17).cos()
        })
        .unwrap()
    }

    #[test]
    fn rejects_invalid_buffers() {
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn bilinear_midpoint() {
        let im = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let s = bilinear_sample(&im, 0.5, 0.0);
        assert!(s.in_bounds);
        assert_eq!(s.value, 0.5);
        assert_eq!(s.d_du, 1.0);
        assert_eq!(s.d_dv, 0.0);
    }

    #[test]
    fn bilinear_matches_four_corner_oracle() {
        let im = img(2, 2, &[0.2, 0.8, 0.4, 0.6]);
        let (a, b) = (0.25, 0.75);
        let oracle = (1.0 - a) * (1.0 - b) * 0.2 + a * (1.0 - b) * 0.8 + (1.0 - a) * b * 0.4 + a * b * 0.6;
        let s = bilinear_sample(&im, a, b);
        assert!((oracle - 0.425).abs() < 1e-15);
        assert!((s.value - oracle).abs() < 1e-15);
    }

    #[test]
    fn integer_samples_reproduce_pixels_and_forward_differences() {
        let im = smooth_image(7, 5);
        for i in 0..5 {
            for j in 0..7 {
                let s = bilinear_sample(&im, j as f64, i as f64);
                assert_eq!(s.value, im.get(i, j, 0));
                if j + 1 < 7 && i + 1 < 5 {
                    assert_eq!(s.d_du, im.get(i, j + 1, 0) - im.get(i, j, 0));
                    assert_eq!(s.d_dv, im.get(i + 1, j, 0) - im.get(i, j, 0));
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_is_flagged_and_zero() {
        let im = smooth_image(4, 4);
        for (u, v) in [(-0.01, 1.0), (3.01, 1.0), (1.0, -1e-9), (1.0, 3.5), (f64::NAN, 0.0)] {
            assert_eq!(bilinear_sample(&im, u, v), SampleResult::OUTSIDE);
        }
        assert!(bilinear_sample(&im, 3.0, 3.0).in_bounds);
        assert_eq!(bilinear_sample(&im, 3.0, 3.0).value, im.get(3, 3, 0));
    }

    #[test]
    fn sampling_is_continuous() {
        let im = smooth_image(6, 6);
        for &(u, v) in &[(2.0, 2.3), (1.0, 4.0), (3.5, 1.0)] {
            let lo = bilinear_sample(&im, u - 1e-9, v).value;
            let hi = bilinear_sample(&im, u + 1e-9, v).value;
            assert!((lo - hi).abs() < 1e-6);
        }
    }

    #[test]
    fn partials_match_central_differences_inside_cells() {
        let im = smooth_image(8, 8);
        let h = 1e-5;
        for &(u, v) in &[(1.3, 2.6), (4.71, 0.42), (6.2, 6.8)] {
            let s = bilinear_sample(&im, u, v);
            let fu = (bilinear_sample(&im, u + h, v).value - bilinear_sample(&im, u - h, v).value) / (2.0 * h);
            let fv = (bilinear_sample(&im, u, v + h).value - bilinear_sample(&im, u, v - h).value) / (2.0 * h);
            assert!((s.d_du - fu).abs() <= 1e-6 * fu.abs().max(1e-3), "{} vs {}", s.d_du, fu);
            assert!((s.d_dv - fv).abs() <= 1e-6 * fv.abs().max(1e-3), "{} vs {}", s.d_dv, fv);
        }
    }

    #[test]
    fn grayscale_weights() {
        let rgb = ImageBuffer::new(3, 1, 3, vec![0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 0.2, 0.4, 0.6]).unwrap();
        let g = to_grayscale(&rgb);
        assert_eq!(g.channels(), 1);
        assert!((g.get(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((g.get(0, 1, 0) - 0.299).abs() < 1e-12);
        // 0.2*0.299 + 0.4*0.587 + 0.6*0.114
        assert!((g.get(0, 2, 0) - 0.363).abs() < 1e-12);
        let gray = img(2, 1, &[0.1, 0.9]);
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn gradients_of_simple_images() {
        let (gx, gy) = image_gradient(&ImageBuffer::constant(5, 4, 0.3).unwrap()).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));

        let w = 6;
        let ramp = ImageBuffer::from_fn(w, 3, |_, j| j as f64 / (w - 1) as f64).unwrap();
        let (gx, gy) = image_gradient(&ramp).unwrap();
        for i in 0..3 {
            for j in 0..w {
                let expect = if j + 1 < w { 1.0 / (w - 1) as f64 } else { 0.0 };
                assert!((gx.get(i, j) - expect).abs() < 1e-15);
                assert_eq!(gy.get(i, j), 0.0);
            }
        }

        let checker = ImageBuffer::from_fn(6, 6, |i, j| ((i + j) % 2) as f64).unwrap();
        let (gx, _) = image_gradient(&checker).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(gx.get(i, j).abs(), 1.0);
            }
        }
        let rgb = ImageBuffer::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(image_gradient(&rgb).is_err());
    }

    #[test]
    fn blur_keeps_constants_and_matches_kernel_product() {
        let c = ImageBuffer::constant(9, 7, 0.37).unwrap();
        let b = gaussian_blur(&c, 1.3).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-12));

        let mut impulse = vec![0.0; 15 * 15];
        impulse[7 * 15 + 7] = 1.0;
        let b = gaussian_blur(&img(15, 15, &impulse), 1.0).unwrap();
        // explicit kernel evaluation, independent of gaussian_kernel()
        let norm: f64 = (-3..=3).map(|k: i32| (-(k * k) as f64 / 2.0).exp()).sum();
        let k0 = 1.0 / norm;
        assert!((b.get(7, 7, 0) - k0 * k0).abs() < 1e-15);
        assert!(gaussian_blur(&c, 0.0).is_err());
    }

    #[test]
    fn repeated_blur_approximates_wider_blur() {
        let im = smooth_image(48, 48);
        let s = 1.2;
        let twice = gaussian_blur(&gaussian_blur(&im, s).unwrap(), s).unwrap();
        let once = gaussian_blur(&im, s * 2f64.sqrt()).unwrap();
        let (num, den) = twice
            .data()
            .iter()
            .zip(once.data())
            .fold((0.0, 0.0), |(n, d), (a, b)| (n + (a - b).powi(2), d + b * b));
        assert!((num / den).sqrt() < 0.02);
    }

    #[test]
    fn blur_preserves_mean_with_constant_margin() {
        // bump in the middle, constant border wider than the kernel reach
        let im = ImageBuffer::from_fn(40, 40, |i, j| {
            let (di, dj) = (i as f64 - 19.5, j as f64 - 19.5);
            0.2 + 0.6 * (-(di * di + dj * dj) / 8.0).exp()
        })
        .unwrap();
        let b = gaussian_blur(&im, 1.5).unwrap();
        let mean = |x: &ImageBuffer| x.data().iter().sum::<f64>() / x.data().len() as f64;
        assert!((mean(&im) - mean(&b)).abs() < 1e-9);
    }
}
