//! Super-resolution evaluation: BT.601 luminance, PSNR, SSIM, and the
//! bicubic resampler used to make LR inputs and the interpolation baseline.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} RGB image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageU8 { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Samples scaled to `[0, 1]`, as an interleaved `H x W x 3` buffer.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Inverse of [`to_unit_f64`](Self::to_unit_f64): clamps to `[0, 1]` and rounds.
    pub fn from_unit_f64(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        let q = data.iter().map(|&v| quantize(v * 255.0)).collect();
        Self::new(height, width, q)
    }
}

/// Rounds half away from zero and clamps to `0..=255`. NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// BT.601 limited-range luma, `Y = 16 + 65.481 R' + 128.553 G' + 24.966 B'`
/// with `R', G', B'` in `[0, 1]`. Returns an `H x W` tensor in `[16, 235]`.
pub fn rgb_to_y(img: &ImageU8) -> Tensor<f64> {
    let y = img
        .data
        .chunks_exact(3)
        .map(|p| {
            16.0 + (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0
        })
        .collect();
    Tensor::from_vec(&[img.height, img.width], y).expect("non-empty image")
}

fn dims2(op: &'static str, t: &Tensor<f64>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::invalid_shape(op, t.shape(), "expected an H x W plane")),
    }
}

/// Removes `border` pixels from every side of an `H x W` plane.
pub fn crop_border(t: &Tensor<f64>, border: usize) -> Result<Tensor<f64>> {
    let (h, w) = dims2("crop_border", t)?;
    if border == 0 {
        return Ok(t.clone());
    }
    if h <= 2 * border || w <= 2 * border {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {border} pixels from a {h}x{w} plane"
        )));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let d = t.data();
    let mut out = Vec::with_capacity(oh * ow);
    for y in border..h - border {
        out.extend_from_slice(&d[y * w + border..y * w + w - border]);
    }
    Tensor::from_vec(&[oh, ow], out)
}

/// PSNR in dB for peak 255 after cropping `crop` pixels per side.
/// Identical planes give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, crop: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    dims2("psnr", a)?;
    let (a, b) = (crop_border(a, crop)?, crop_border(b, crop)?);
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, gi) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *gi = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable 'valid' Gaussian filter: `(h - 10) x (w - 10)` output.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 255).
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (h, w) = dims2("ssim", a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let g = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let xx = filter_valid(&prod(&|p, _| p * p), h, w, &g);
    let yy = filter_valid(&prod(&|_, q| q * q), h, w, &g);
    let xy = filter_valid(&prod(&|p, q| p * q), h, w, &g);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = xx[i] - mx * mx;
        let syy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// PSNR and SSIM on the luminance channel with `crop` pixels removed per side.
pub fn evaluate_y(a: &ImageU8, b: &ImageU8, crop: usize) -> Result<(f64, f64)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("evaluate_y", &[a.height, a.width], &[b.height, b.width]));
    }
    let (ya, yb) = (rgb_to_y(a), rgb_to_y(b));
    let p = psnr(&ya, &yb, crop)?;
    let s = ssim(&crop_border(&ya, crop)?, &crop_border(&yb, crop)?)?;
    Ok((p, s))
}

// ---- bicubic ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    Up(usize),
    Down(usize),
}

impl Resize {
    fn output_extent(self, n: usize) -> usize {
        match self {
            Resize::Up(f) => n * f,
            Resize::Down(f) => n / f,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Resize::Up(f) | Resize::Down(f) if (1..=4).contains(&f) => Ok(()),
            other => Err(Error::InvalidArgument(format!("unsupported resize factor {other:?}"))),
        }
    }
}

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic kernel (`a = -0.5`).
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    let a = CUBIC_A;
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for output sample `i`.
/// Downscaling stretches the kernel by the factor (antialiasing); source
/// indices are not yet clamped.
pub fn bicubic_taps(i: usize, factor: Resize) -> Vec<(isize, f64)> {
    let (u, stretch) = match factor {
        Resize::Up(f) => ((i as f64 + 0.5) / f as f64 - 0.5, 1.0),
        Resize::Down(f) => ((i as f64 + 0.5) * f as f64 - 0.5, f as f64),
    };
    let radius = 2.0 * stretch;
    let lo = (u - radius).ceil() as isize;
    let hi = (u + radius).floor() as isize;
    let mut taps: Vec<(isize, f64)> = (lo..=hi)
        .map(|j| (j, cubic((u - j as f64) / stretch)))
        .filter(|&(_, wgt)| wgt != 0.0)
        .collect();
    let s: f64 = taps.iter().map(|t| t.1).sum();
    taps.iter_mut().for_each(|t| t.1 /= s);
    taps
}

fn resize_axis(src: &[f64], len: usize, stride: usize, count: usize, factor: Resize) -> (Vec<f64>, usize) {
    // src viewed as `count` independent lines of `len` samples, `stride` apart within a line
    let out_len = factor.output_extent(len);
    let taps: Vec<Vec<(usize, f64)>> = (0..out_len)
        .map(|i| {
            bicubic_taps(i, factor)
                .into_iter()
                .map(|(j, w)| (j.clamp(0, len as isize - 1) as usize, w))
                .collect()
        })
        .collect();
    let mut out = vec![0.0; out_len * count];
    for line in 0..count {
        let (outer, inner) = (line / stride, line % stride);
        let base = outer * len * stride + inner;
        let obase = outer * out_len * stride + inner;
        for (i, t) in taps.iter().enumerate() {
            out[obase + i * stride] = t.iter().map(|&(j, w)| w * src[base + j * stride]).sum();
        }
    }
    (out, out_len)
}

/// Separable bicubic resize of an interleaved `h x w x c` float image.
pub fn bicubic_resize_f64(src: &[f64], h: usize, w: usize, c: usize, factor: Resize) -> Result<(Vec<f64>, usize, usize)> {
    factor.validate()?;
    if src.len() != h * w * c {
        return Err(Error::InvalidArgument("buffer does not match extents".into()));
    }
    let (oh, ow) = (factor.output_extent(h), factor.output_extent(w));
    if oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument(format!(
            "resizing {h}x{w} by {factor:?} leaves an empty image"
        )));
    }
    if matches!(factor, Resize::Up(1) | Resize::Down(1)) {
        return Ok((src.to_vec(), h, w));
    }
    // horizontal: lines are (y, ch) with samples stride c apart
    let (tmp, _) = resize_axis(src, w, c, h * c, factor);
    // vertical: lines are (x, ch) with samples stride ow*c apart
    let (out, _) = resize_axis(&tmp, h, ow * c, ow * c, factor);
    Ok((out, oh, ow))
}

pub fn bicubic_resize(img: &ImageU8, factor: Resize) -> Result<ImageU8> {
    factor.validate()?;
    if matches!(factor, Resize::Up(1) | Resize::Down(1)) {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let (out, oh, ow) = bicubic_resize_f64(&src, img.height, img.width, 3, factor)?;
    ImageU8::new(oh, ow, out.into_iter().map(quantize).collect())
}
