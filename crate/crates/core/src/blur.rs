//! Camera-shake blur simulation.
//!
//! A kernel is produced by a seeded random walk over spline control
//! points (bounded speed, Gaussian acceleration), interpolated by a
//! Catmull-Rom spline, splatted bilinearly onto an m×m grid and smoothed
//! by an isotropic Gaussian sensor PSF. Blurring is a zero-padded 2-D
//! convolution plus i.i.d. Gaussian noise, `B = I∗k + η`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the additive noise in the degradation model.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;

const BKRN_MAGIC: &[u8; 4] = b"BKRN";

/// An m×m non-negative grid summing to one (m odd), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    m: usize,
    grid: Vec<f32>,
}

impl BlurKernel {
    /// Validate and wrap a grid. The sum must be within `1e-4` of one.
    pub fn new(m: usize, grid: Vec<f32>) -> Result<Self> {
        if m.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {m} must be odd")));
        }
        if grid.len() != m * m {
            return Err(Error::shape("blur_kernel", format!("{} values for a {m}x{m} grid", grid.len())));
        }
        if grid.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Format("kernel has negative or non-finite entries".into()));
        }
        let total: f64 = grid.iter().map(|&v| v as f64).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Format(format!("kernel sums to {total}, expected 1")));
        }
        Ok(BlurKernel { m, grid })
    }

    /// Normalize a non-negative f64 grid to unit sum.
    fn from_mass(m: usize, mass: Vec<f64>) -> Self {
        let mass: Vec<f64> = mass.into_iter().map(|v| v.max(0.0)).collect();
        let total: f64 = mass.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Self::delta(m);
        }
        BlurKernel {
            m,
            grid: mass.into_iter().map(|v| (v / total) as f32).collect(),
        }
    }

    /// Centered delta (identity blur).
    pub fn delta(m: usize) -> Self {
        let mut grid = vec![0.0; m * m];
        grid[(m / 2) * m + m / 2] = 1.0;
        BlurKernel { m, grid }
    }

    /// A centered `width`×`width` box embedded in an m×m grid.
    pub fn centered_box(m: usize, width: usize) -> Result<Self> {
        if width.is_multiple_of(2) || width > m {
            return Err(Error::Config(format!("box width {width} must be odd and at most {m}")));
        }
        let lo = (m - width) / 2;
        let mut mass = vec![0.0; m * m];
        for r in lo..lo + width {
            for c in lo..lo + width {
                mass[r * m + c] = 1.0;
            }
        }
        Ok(Self::from_mass(m, mass))
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.grid[row * self.m + col]
    }

    /// 1×1×m×m tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, 1, self.m, self.m], self.grid.clone()).expect("grid is m×m")
    }

    /// Read sample `n` of an N×1×m×m kernel batch.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let [_, _, m, mw] = t.dims4("blur_kernel")?;
        if m != mw {
            return Err(Error::shape("blur_kernel", "kernel grid must be square"));
        }
        Self::new(m, t.item(n).into_data())
    }

    /// "BKRN" encoding: magic, little-endian u32 m, m² little-endian f32 row-major.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(BKRN_MAGIC)?;
        w.write_all(&(self.m as u32).to_le_bytes())?;
        for v in &self.grid {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.grid.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated BKRN header".into()))?;
        if &head[..4] != BKRN_MAGIC {
            return Err(Error::Format("missing BKRN magic".into()));
        }
        let m = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        if m == 0 || m > 4096 {
            return Err(Error::Format(format!("implausible kernel size {m}")));
        }
        let mut body = vec![0u8; 4 * m * m];
        r.read_exact(&mut body)
            .map_err(|_| Error::Format("truncated BKRN body".into()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::Format(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after BKRN body".into()));
        }
        let grid = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(m, grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub num_control_points: usize,
    /// Maximum displacement between consecutive control points, in pixels.
    pub max_speed: f64,
    /// Standard deviation of the per-step velocity change, in pixels.
    pub max_accel: f64,
    pub samples_per_segment: usize,
    /// Sensor PSF sigma is drawn uniformly from this range (pixels).
    pub psf_sigma_range: (f64, f64),
    pub m: usize,
    /// The exposure keeps a random leading fraction in `[1 − jitter, 1]` of the path.
    pub exposure_jitter: f64,
}

impl TrajectoryConfig {
    /// Trajectories for an 85×85 grid.
    pub fn paper() -> Self {
        TrajectoryConfig {
            num_control_points: 8,
            max_speed: 10.0,
            max_accel: 4.0,
            samples_per_segment: 32,
            psf_sigma_range: (0.3, 1.5),
            m: 85,
            exposure_jitter: 0.3,
        }
    }

    /// Trajectories for a 17×17 grid.
    pub fn toy() -> Self {
        TrajectoryConfig {
            num_control_points: 8,
            max_speed: 2.0,
            max_accel: 0.8,
            samples_per_segment: 16,
            psf_sigma_range: (0.3, 0.8),
            m: 17,
            exposure_jitter: 0.3,
        }
    }

    /// Degenerate configuration producing centered deltas.
    pub fn still(m: usize) -> Self {
        TrajectoryConfig {
            max_speed: 0.0,
            max_accel: 0.0,
            psf_sigma_range: (0.0, 0.0),
            exposure_jitter: 0.0,
            m,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.psf_sigma_range;
        let ok = self.num_control_points >= 2
            && self.samples_per_segment >= 1
            && self.max_speed >= 0.0
            && self.max_accel >= 0.0
            && lo >= 0.0
            && lo <= hi
            && (0.0..1.0).contains(&self.exposure_jitter)
            && self.m % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trajectory config {self:?}")))
        }
    }
}

/// A camera path as sub-pixel `(x, y)` points, centered on its centroid.
pub type Trajectory = Vec<[f64; 2]>;

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let t2 = t * t;
    let t3 = t2 * t;
    let mut out = [0.0; 2];
    for a in 0..2 {
        out[a] = 0.5
            * (2.0 * p1[a]
                + (-p0[a] + p2[a]) * t
                + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
                + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t3);
    }
    out
}

/// Random camera path: bounded-speed second-order random walk over the
/// control points, interpolated by a Catmull-Rom spline.
pub fn sample_trajectory(rng: &mut impl Rng, config: &TrajectoryConfig) -> Result<Trajectory> {
    config.validate()?;
    let clip = |v: [f64; 2]| {
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if norm > config.max_speed {
            let s = if norm > 0.0 { config.max_speed / norm } else { 0.0 };
            [v[0] * s, v[1] * s]
        } else {
            v
        }
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen::<f64>() * config.max_speed;
    let mut vel = [speed * angle.cos(), speed * angle.sin()];
    let mut pos = [0.0f64; 2];
    let mut ctrl = vec![pos];
    let accel = Normal::new(0.0, config.max_accel.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 1..config.num_control_points {
        vel = clip([vel[0] + accel.sample(rng), vel[1] + accel.sample(rng)]);
        pos = [pos[0] + vel[0], pos[1] + vel[1]];
        ctrl.push(pos);
    }

    let n = ctrl.len();
    let get = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut path = Vec::with_capacity((n - 1) * config.samples_per_segment + 1);
    for seg in 0..n - 1 {
        let s = seg as isize;
        for k in 0..config.samples_per_segment {
            let t = k as f64 / config.samples_per_segment as f64;
            path.push(catmull_rom(get(s - 1), get(s), get(s + 1), get(s + 2), t));
        }
    }
    path.push(ctrl[n - 1]);

    let keep = 1.0 - rng.gen::<f64>() * config.exposure_jitter;
    let len = ((path.len() as f64 * keep).ceil() as usize).clamp(1, path.len());
    path.truncate(len);

    let cx = path.iter().map(|p| p[0]).sum::<f64>() / path.len() as f64;
    let cy = path.iter().map(|p| p[1]).sum::<f64>() / path.len() as f64;
    for p in &mut path {
        *p = [p[0] - cx, p[1] - cy];
    }
    Ok(path)
}

/// Largest distance of any path point from the origin.
pub fn trajectory_extent(path: &[[f64; 2]]) -> f64 {
    path.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max)
}

/// Discrete Gaussian on a `(2r+1)²` box, `r = ceil(3σ)`, normalized to unit sum.
pub fn gaussian_psf(sigma: f64) -> (usize, Vec<f64>) {
    if sigma <= 0.0 {
        return (0, vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as usize;
    let e = 2 * r + 1;
    let mut w = Vec::with_capacity(e * e);
    for dy in 0..e {
        for dx in 0..e {
            let (y, x) = (dy as f64 - r as f64, dx as f64 - r as f64);
            w.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    (r, w.into_iter().map(|v| v / total).collect())
}

/// Splat a path onto an m×m grid (equal weight per point, bilinear),
/// smooth by a Gaussian PSF and normalize. Paths that do not fit are
/// scaled down about the center.
pub fn rasterize_kernel(path: &[[f64; 2]], m: usize, psf_sigma: f64) -> Result<BlurKernel> {
    if m.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size {m} must be odd")));
    }
    if path.is_empty() {
        return Ok(BlurKernel::delta(m));
    }
    let c = (m / 2) as f64;
    let limit = (c - 1.0).max(0.0);
    let reach = path.iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max);
    let scale = if reach > limit && reach > 0.0 { limit / reach } else { 1.0 };

    let mut mass = vec![0.0f64; m * m];
    let w = 1.0 / path.len() as f64;
    for p in path {
        let (x, y) = (c + p[0] * scale, c + p[1] * scale);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (row, col) = (y0 as isize + dy, x0 as isize + dx);
                if wx * wy > 0.0 && row >= 0 && col >= 0 && (row as usize) < m && (col as usize) < m {
                    mass[row as usize * m + col as usize] += w * wx * wy;
                }
            }
        }
    }

    let (r, psf) = gaussian_psf(psf_sigma);
    if r > 0 {
        let e = 2 * r + 1;
        let mut blurred = vec![0.0f64; m * m];
        for row in 0..m {
            for col in 0..m {
                let v = mass[row * m + col];
                if v == 0.0 {
                    continue;
                }
                for dy in 0..e {
                    let rr = row as isize + dy as isize - r as isize;
                    if rr < 0 || rr >= m as isize {
                        continue;
                    }
                    for dx in 0..e {
                        let cc = col as isize + dx as isize - r as isize;
                        if cc < 0 || cc >= m as isize {
                            continue;
                        }
                        blurred[rr as usize * m + cc as usize] += v * psf[dy * e + dx];
                    }
                }
            }
        }
        mass = blurred;
    }
    Ok(BlurKernel::from_mass(m, mass))
}

/// Trajectory plus a PSF sigma drawn from the configured range.
pub fn sample_kernel(rng: &mut impl Rng, config: &TrajectoryConfig) -> Result<BlurKernel> {
    let path = sample_trajectory(rng, config)?;
    let (lo, hi) = config.psf_sigma_range;
    let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    rasterize_kernel(&path, config.m, sigma)
}

/// Blur a C×H×W image by `k` (true convolution, zero borders) and add
/// N(0, σ²) noise. The result is not clipped.
pub fn apply_blur(image: &Tensor<f32>, k: &BlurKernel, noise_sigma: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        other => return Err(Error::shape("apply_blur", format!("expected C×H×W image, got {other:?}"))),
    };
    let m = k.size();
    let half = (m / 2) as isize;
    let taps: Vec<(isize, isize, f32)> = (0..m * m)
        .filter(|&i| k.grid()[i] != 0.0)
        .map(|i| ((i / m) as isize - half, (i % m) as isize - half, k.grid()[i]))
        .collect();
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        // B(y, x) = Σ_{u,v} k(u, v) · I(y − u, x − v)
        for &(du, dv, kv) in &taps {
            for y in 0..h {
                let sy = y as isize - du;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let x0 = dv.max(0) as usize;
                let x1 = (w as isize + dv.min(0)).max(0) as usize;
                let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                let drow = &mut dst[y * w..(y + 1) * w];
                for x in x0..x1.max(x0) {
                    drow[x] += kv * srow[(x as isize - dv) as usize];
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut out {
            *v += noise.sample(rng) as f32;
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Side of the smallest centered odd window holding at least `mass` of the kernel.
pub fn kernel_support_size(k: &BlurKernel, mass: f64) -> usize {
    let m = k.size();
    let c = m / 2;
    let total: f64 = k.grid().iter().map(|&v| v as f64).sum();
    let target = mass * total;
    // grow the window one ring at a time
    let mut inside = k.at(c, c) as f64;
    for r in 0..=c {
        if r > 0 {
            let (lo, hi) = (c - r, c + r);
            for i in lo..=hi {
                inside += k.at(lo, i) as f64 + k.at(hi, i) as f64;
            }
            for i in lo + 1..hi {
                inside += k.at(i, lo) as f64 + k.at(i, hi) as f64;
            }
        }
        if inside >= target * (1.0 - 1e-12) {
            return 2 * r + 1;
        }
    }
    m
}

/// Size class of a kernel support: `0` for `≤ bounds[0]`, `1` for
/// `≤ bounds[1]`, `2` otherwise.
pub fn size_class(support: usize, bounds: [usize; 2]) -> usize {
    if support <= bounds[0] {
        0
    } else if support <= bounds[1] {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn still_trajectory_is_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = sample_trajectory(&mut rng, &TrajectoryConfig::still(17)).unwrap();
        assert!(path.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
        let k = rasterize_kernel(&path, 17, 0.0).unwrap();
        assert_eq!(k, BlurKernel::delta(17));
    }

    #[test]
    fn even_grid_rejected() {
        assert!(matches!(rasterize_kernel(&[[0.0, 0.0]], 8, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn support_of_delta_and_box() {
        assert_eq!(kernel_support_size(&BlurKernel::delta(85), 0.99), 1);
        assert_eq!(kernel_support_size(&BlurKernel::centered_box(85, 31).unwrap(), 0.99), 31);
    }

    #[test]
    fn size_classes() {
        let b = [31, 61];
        assert_eq!(size_class(1, b), 0);
        assert_eq!(size_class(31, b), 0);
        assert_eq!(size_class(33, b), 1);
        assert_eq!(size_class(61, b), 1);
        assert_eq!(size_class(63, b), 2);
    }

    #[test]
    fn bkrn_rejects_bad_magic() {
        let mut bytes = BlurKernel::delta(3).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(BlurKernel::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = BlurKernel::delta(3).to_bytes();
        assert!(BlurKernel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn delta_blur_without_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn([3, 9, 11], |_| rng.gen::<f32>());
        let out = apply_blur(&img, &BlurKernel::delta(5), 0.0, &mut rng).unwrap();
        assert_eq!(out, img);
    }
}
