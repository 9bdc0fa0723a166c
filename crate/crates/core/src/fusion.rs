//! Keypoint heatmaps and camera/LiDAR feature fusion.
//!
//! The camera branch is represented by an oracle that renders Gaussian peaks
//! at the annotated 2D keypoints (optionally corrupted by per-keypoint
//! dropout and peak jitter). After Gaussian smoothing, every LiDAR point
//! reads the K-channel heatmap slice at its rounded, rescaled projection and
//! the slice is appended to the point's coordinates.
//!
//! Grid coordinates: column `m` along the width, row `n` along the height,
//! `m = round(W'/W * u)` and `n = round(H'/H * v)` with rounding half away
//! from zero. Projections landing outside the grid get an all-zero feature.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::NUM_KEYPOINTS;
use crate::rng;
use crate::scene::{Keypoint2d, Scene};

/// H' x W' x K likelihood grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Heatmap {
            height,
            width,
            data: vec![0.0; height * width * NUM_KEYPOINTS],
        }
    }

    /// Builds a heatmap from channel-major values, checking the `[0, 1]` range.
    pub fn from_channels(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(
                "heatmap dimensions must be positive".into(),
            ));
        }
        if data.len() != height * width * NUM_KEYPOINTS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} heatmap values, found {}",
                height * width * NUM_KEYPOINTS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Heatmap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn offset(&self, row: usize, col: usize, k: usize) -> usize {
        (k * self.height + row) * self.width + col
    }

    pub fn get(&self, row: usize, col: usize, k: usize) -> f64 {
        self.data[self.offset(row, col, k)]
    }

    pub fn set(&mut self, row: usize, col: usize, k: usize, value: f64) {
        let o = self.offset(row, col, k);
        self.data[o] = value;
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn channel_max(&self, k: usize) -> f64 {
        self.channel(k).iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Probability that a keypoint channel is blanked.
    pub dropout_prob: f64,
    /// Standard deviation of the peak displacement, grid cells.
    pub jitter_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapOracleConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Rendered peak width, grid cells.
    pub sigma_render: f64,
    pub smooth_kernel_size: usize,
    pub smooth_sigma: f64,
    pub corruption: Option<Corruption>,
}

impl Default for HeatmapOracleConfig {
    fn default() -> Self {
        HeatmapOracleConfig {
            grid_height: 64,
            grid_width: 64,
            sigma_render: 2.0,
            smooth_kernel_size: 7,
            smooth_sigma: 3.0,
            corruption: None,
        }
    }
}

impl HeatmapOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::config("heatmap grid dimensions must be positive"));
        }
        if !(self.sigma_render > 0.0 && self.smooth_sigma > 0.0) {
            return Err(Error::config("heatmap sigmas must be positive"));
        }
        if self.smooth_kernel_size == 0 || self.smooth_kernel_size.is_multiple_of(2) {
            return Err(Error::config(
                "smoothing kernel size must be odd and at least 1",
            ));
        }
        if let Some(c) = self.corruption {
            if !(0.0..=1.0).contains(&c.dropout_prob) {
                return Err(Error::config("dropout_prob must lie in [0, 1]"));
            }
            if !(c.jitter_sigma >= 0.0 && c.jitter_sigma.is_finite()) {
                return Err(Error::config("jitter_sigma must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Renders one Gaussian peak per visible keypoint. Corruption, if any, is
/// drawn from a stream seeded by `seed`.
pub fn render_gt_heatmap(
    keypoints_2d: &[Keypoint2d; NUM_KEYPOINTS],
    image_width: u32,
    image_height: u32,
    config: &HeatmapOracleConfig,
    seed: u64,
) -> Heatmap {
    let (gh, gw) = (config.grid_height, config.grid_width);
    let sx = gw as f64 / f64::from(image_width);
    let sy = gh as f64 / f64::from(image_height);
    let inv_two_sigma2 = 1.0 / (2.0 * config.sigma_render * config.sigma_render);
    let mut rng = rng::stream(seed, "heatmap-corruption", 0);
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut h = Heatmap::zeros(gh, gw);
    for (k, kp) in keypoints_2d.iter().enumerate() {
        let (mut cm, mut cn) = (kp.pixel.u * sx, kp.pixel.v * sy);
        if let Some(c) = config.corruption {
            // Three draws per keypoint regardless of settings.
            let drop = rng.random::<f64>() < c.dropout_prob;
            let dm = unit.sample(&mut rng) * c.jitter_sigma;
            let dn = unit.sample(&mut rng) * c.jitter_sigma;
            if drop {
                continue;
            }
            cm += dm;
            cn += dn;
        }
        if !kp.visible {
            continue;
        }
        let ch = h.channel_mut(k);
        for row in 0..gh {
            let dy = row as f64 - cn;
            for col in 0..gw {
                let dx = col as f64 - cm;
                ch[row * gw + col] = (-(dx * dx + dy * dy) * inv_two_sigma2).exp();
            }
        }
    }
    h
}

/// Normalized 1D Gaussian taps; their outer product is the normalized 2D kernel.
pub fn gaussian_taps(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let half = (kernel_size / 2) as f64;
    let mut w: Vec<f64> = (0..kernel_size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Convolves every channel with a normalized `kernel_size` x `kernel_size`
/// Gaussian, zero-padded at the borders.
pub fn smooth_heatmap(h: &Heatmap, kernel_size: usize, sigma: f64) -> Result<Heatmap> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::config(
            "smoothing kernel size must be odd and at least 1",
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("smoothing sigma must be positive"));
    }
    if kernel_size == 1 {
        return Ok(h.clone());
    }
    let taps = gaussian_taps(kernel_size, sigma);
    let half = (kernel_size / 2) as isize;
    let (gh, gw) = (h.height as isize, h.width as isize);
    let mut out = Heatmap::zeros(h.height, h.width);
    let mut tmp = vec![0.0; h.height * h.width];
    for k in 0..NUM_KEYPOINTS {
        let src = h.channel(k);
        // Horizontal pass.
        for r in 0..gh {
            for c in 0..gw {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let cc = c + t as isize - half;
                    if (0..gw).contains(&cc) {
                        acc += w * src[(r * gw + cc) as usize];
                    }
                }
                tmp[(r * gw + c) as usize] = acc;
            }
        }
        // Vertical pass.
        let dst = out.channel_mut(k);
        for r in 0..gh {
            for c in 0..gw {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let rr = r + t as isize - half;
                    if (0..gh).contains(&rr) {
                        acc += w * tmp[(rr * gw + c) as usize];
                    }
                }
                debug_assert!(acc <= 1.0 + 1e-12, "normalized blur overshoot {acc}");
                dst[(r * gw + c) as usize] = acc.min(1.0);
            }
        }
    }
    Ok(out)
}

/// Rendered and smoothed oracle heatmap for a scene.
pub fn camera_heatmap(scene: &Scene, config: &HeatmapOracleConfig, seed: u64) -> Result<Heatmap> {
    config.validate()?;
    let raw = render_gt_heatmap(
        &scene.keypoints_2d,
        scene.camera.width(),
        scene.camera.height(),
        config,
        seed,
    );
    smooth_heatmap(&raw, config.smooth_kernel_size, config.smooth_sigma)
}

/// Point cloud augmented with per-point camera features: N x (3 + K).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCloud {
    data: Array2<f64>,
}

pub const FUSED_WIDTH: usize = 3 + NUM_KEYPOINTS;

impl FusedCloud {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() != FUSED_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "fused cloud needs {FUSED_WIDTH} columns, got {}",
                data.ncols()
            )));
        }
        Ok(FusedCloud { data })
    }

    pub fn n_points(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.data
    }

    pub fn camera_features(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i).slice_move(ndarray::s![3..])
    }

    /// Blanks the camera columns (LiDAR-only input of the same width).
    pub fn zero_camera_features(&mut self) {
        self.data.slice_mut(ndarray::s![.., 3..]).fill(0.0);
    }

    /// Rows picked by `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> FusedCloud {
        FusedCloud {
            data: self.data.select(ndarray::Axis(0), indices),
        }
    }
}

/// Grid cell for an image pixel, or `None` when it falls outside the grid.
pub fn grid_cell(
    u: f64,
    v: f64,
    image_width: u32,
    image_height: u32,
    h: &Heatmap,
) -> Option<(usize, usize)> {
    let m = (h.width as f64 / f64::from(image_width) * u).round();
    let n = (h.height as f64 / f64::from(image_height) * v).round();
    if m >= 0.0 && n >= 0.0 && (m as usize) < h.width && (n as usize) < h.height {
        Some((n as usize, m as usize))
    } else {
        None
    }
}

/// Concatenates each point's coordinates with its heatmap slice.
pub fn sample_camera_features(h: &Heatmap, scene: &Scene) -> FusedCloud {
    let (w, hh) = (scene.camera.width(), scene.camera.height());
    let mut data = Array2::zeros((scene.len(), FUSED_WIDTH));
    for (i, p) in scene.points.iter().enumerate() {
        let mut row = data.row_mut(i);
        row[0] = p.position.x;
        row[1] = p.position.y;
        row[2] = p.position.z;
        if let Some((n, m)) = grid_cell(p.pixel.u, p.pixel.v, w, hh, h) {
            for k in 0..NUM_KEYPOINTS {
                row[3 + k] = h.get(n, m, k);
            }
        }
    }
    FusedCloud { data }
}
