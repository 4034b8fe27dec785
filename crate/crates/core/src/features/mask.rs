//! Per-octave exclusion masks for specular reflections and image borders.

use super::FeatureError;
use crate::map::KeyPoint;

pub const DEFAULT_INTENSITY_THRESHOLD: f64 = 0.9;
pub const DEFAULT_BORDER_MARGIN: f64 = 10.0;
pub const DEFAULT_DILATION_BASE: f64 = 3.0;

/// Row-major intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityGrid {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl IntensityGrid {
    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    /// Sparse grid: zero everywhere except at the given keypoints, which
    /// carry their own intensity. Used when only feature files are available.
    pub fn from_keypoints(width: u32, height: u32, keypoints: &[KeyPoint]) -> Self {
        let mut g = Self::filled(width, height, 0.0);
        for kp in keypoints {
            if let Some(i) = g.index_of(kp.pixel.x, kp.pixel.y) {
                g.data[i] = g.data[i].max(kp.intensity);
            }
        }
        g
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.data[(y * self.width + x) as usize] = v;
    }

    fn index_of(&self, x: f64, y: f64) -> Option<usize> {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return None;
        }
        Some(yi as usize * self.width as usize + xi as usize)
    }
}

/// `true` marks an excluded pixel. One grid per pyramid level.
#[derive(Clone, Debug)]
pub struct OctaveMaskSet {
    pub width: u32,
    pub height: u32,
    pub threshold: f64,
    pub dilation_radii: Vec<f64>,
    pub border_widths: Vec<f64>,
    levels: Vec<Vec<bool>>,
}

impl OctaveMaskSet {
    pub fn n_octaves(&self) -> usize {
        self.levels.len()
    }

    /// Whether a continuous pixel position is allowed at `octave`. Positions
    /// are rounded to the nearest pixel; anything outside the image is excluded.
    pub fn allows(&self, octave: usize, x: f64, y: f64) -> bool {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return false;
        }
        !self.levels[octave][yi as usize * self.width as usize + xi as usize]
    }

    pub fn excluded(&self, octave: usize, x: u32, y: u32) -> bool {
        self.levels[octave][(y * self.width + x) as usize]
    }

    pub fn level(&self, octave: usize) -> &[bool] {
        &self.levels[octave]
    }
}

/// Builds one mask per octave. Level `k` excludes the pixels above
/// `intensity_threshold` and the pixels of `invalid_region` (if any), both
/// dilated by a disk of radius `dilation_base * 2^k`, plus a border ring of
/// width `border_margin * 2^k`.
pub fn build_masks(
    grid: &IntensityGrid,
    intensity_threshold: f64,
    border_margin: f64,
    dilation_base: f64,
    n_octaves: usize,
    invalid_region: Option<&[bool]>,
) -> Result<OctaveMaskSet, FeatureError> {
    if n_octaves == 0 {
        return Err(FeatureError::InvalidInput("n_octaves must be at least 1".into()));
    }
    if grid.data.len() != (grid.width * grid.height) as usize {
        return Err(FeatureError::InvalidInput("grid size mismatch".into()));
    }
    if let Some(i) = grid.data.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::InvalidInput(format!("non-finite intensity at {i}")));
    }
    if let Some(inv) = invalid_region {
        if inv.len() != grid.data.len() {
            return Err(FeatureError::InvalidInput("invalid region size mismatch".into()));
        }
    }
    let (w, h) = (grid.width as usize, grid.height as usize);
    let raw: Vec<bool> = grid
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 > intensity_threshold || invalid_region.is_some_and(|r| r[i]))
        .collect();
    // Only pixels on the boundary of the raw set need stamping; interior
    // pixels are already covered by the set itself.
    let boundary: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            raw[y * w + x]
                && (x == 0
                    || y == 0
                    || x == w - 1
                    || y == h - 1
                    || !raw[y * w + x - 1]
                    || !raw[y * w + x + 1]
                    || !raw[(y - 1) * w + x]
                    || !raw[(y + 1) * w + x])
        })
        .map(|(x, y)| (x as i64, y as i64))
        .collect();

    let mut levels = Vec::with_capacity(n_octaves);
    let mut radii = Vec::with_capacity(n_octaves);
    let mut borders = Vec::with_capacity(n_octaves);
    for k in 0..n_octaves {
        let scale = (1u64 << k) as f64;
        let radius = dilation_base * scale;
        let border = border_margin * scale;
        let mut mask = raw.clone();
        let r = radius.floor() as i64;
        let r2 = radius * radius;
        for &(x, y) in &boundary {
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    if ((dx * dx + dy * dy) as f64) <= r2 {
                        mask[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                if xf < border || yf < border || xf >= w as f64 - border || yf >= h as f64 - border
                {
                    mask[y * w + x] = true;
                }
            }
        }
        levels.push(mask);
        radii.push(radius);
        borders.push(border);
    }
    Ok(OctaveMaskSet {
        width: grid.width,
        height: grid.height,
        threshold: intensity_threshold,
        dilation_radii: radii,
        border_widths: borders,
        levels,
    })
}

/// Per-keypoint keep flags (see [`filter_keypoints`]).
pub fn keypoint_mask(keypoints: &[KeyPoint], masks: &OctaveMaskSet) -> Result<Vec<bool>, FeatureError> {
    keypoints
        .iter()
        .map(|kp| {
            let o = kp.octave as usize;
            if o >= masks.n_octaves() {
                return Err(FeatureError::InvalidInput(format!(
                    "keypoint octave {o} outside the {}-level mask set",
                    masks.n_octaves()
                )));
            }
            Ok(masks.allows(o, kp.pixel.x, kp.pixel.y))
        })
        .collect()
}

/// Same flags as [`build_masks`] + [`keypoint_mask`] on
/// [`IntensityGrid::from_keypoints`], without rasterizing: a keypoint is
/// tested against the border of its octave and against each bright keypoint.
pub fn sparse_keypoint_mask(
    keypoints: &[KeyPoint],
    width: u32,
    height: u32,
    intensity_threshold: f64,
    border_margin: f64,
    dilation_base: f64,
) -> Vec<bool> {
    let (w, h) = (width as f64, height as f64);
    let pixel = |kp: &KeyPoint| {
        let (x, y) = (kp.pixel.x.round(), kp.pixel.y.round());
        (x >= 0.0 && y >= 0.0 && x < w && y < h).then_some((x as i64, y as i64))
    };
    let bright: Vec<(i64, i64)> = keypoints
        .iter()
        .filter(|kp| kp.intensity as f64 > intensity_threshold)
        .filter_map(pixel)
        .collect();
    keypoints
        .iter()
        .map(|kp| {
            let Some((x, y)) = pixel(kp) else { return false };
            let scale = (1u64 << kp.octave.min(62)) as f64;
            let (border, radius) = (border_margin * scale, dilation_base * scale);
            let (xf, yf) = (x as f64, y as f64);
            if xf < border || yf < border || xf >= w - border || yf >= h - border {
                return false;
            }
            let r = radius.floor() as i64;
            !bright.iter().any(|&(bx, by)| {
                let (dx, dy) = (x - bx, y - by);
                dx.abs() <= r && dy.abs() <= r && ((dx * dx + dy * dy) as f64) <= radius * radius
            })
        })
        .collect()
}

/// Keeps each keypoint allowed by the mask of its own octave.
pub fn filter_keypoints(
    keypoints: &[KeyPoint],
    masks: &OctaveMaskSet,
) -> Result<Vec<KeyPoint>, FeatureError> {
    let keep = keypoint_mask(keypoints, masks)?;
    Ok(keypoints
        .iter()
        .zip(keep)
        .filter_map(|(kp, k)| k.then(|| kp.clone()))
        .collect())
}
