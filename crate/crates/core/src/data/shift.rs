//! Synthetic domain shifts.
//!
//! Inputs are either 2-D points (`[2]`, coordinates in the unit square) or
//! images (`[C, H, W]`). Geometric transforms act about the center of the
//! domain: `(0.5, 0.5)` for points, the pixel-grid center for images. Every
//! transform re-clamps to `[0, 1]` and leaves labels and `N` untouched.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{MpbmError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftKind {
    /// Counter-clockwise rotation.
    Rotate { degrees: f64 },
    /// `x ↦ (1 − a)·x + a·(1 − x)`; `a = 1` is full inversion.
    IntensityInvert { amount: f64 },
    GaussianNoise { std: f64 },
    /// `x ↦ c + scale·S(x − c) + translate`, `S = [[1, shear], [0, 1]]`.
    /// For images `translate` is in pixels (x, y).
    AffineWarp {
        #[serde(default)]
        shear: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        translate: [f64; 2],
    },
    /// Each example independently loses one random channel with this
    /// probability.
    ChannelDrop { probability: f64 },
}

fn one() -> f64 {
    1.0
}

impl ShiftKind {
    /// True when the parameters describe the identity map.
    pub fn is_identity(&self) -> bool {
        match *self {
            ShiftKind::Rotate { degrees } => degrees.rem_euclid(360.0) == 0.0,
            ShiftKind::IntensityInvert { amount } => amount == 0.0,
            ShiftKind::GaussianNoise { std } => std == 0.0,
            ShiftKind::AffineWarp { shear, scale, translate } => shear == 0.0 && scale == 1.0 && translate == [0.0, 0.0],
            ShiftKind::ChannelDrop { probability } => probability <= 0.0,
        }
    }

    fn supports(&self, shape: &[usize]) -> bool {
        match (self, layout(shape)) {
            (ShiftKind::IntensityInvert { .. } | ShiftKind::GaussianNoise { .. }, _) => true,
            (ShiftKind::Rotate { .. } | ShiftKind::AffineWarp { .. }, Layout::Point | Layout::Image { .. }) => true,
            (ShiftKind::ChannelDrop { .. }, Layout::Image { c, .. }) => c >= 2,
            _ => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Rotate { .. } => "rotate",
            ShiftKind::IntensityInvert { .. } => "intensity_invert",
            ShiftKind::GaussianNoise { .. } => "gaussian_noise",
            ShiftKind::AffineWarp { .. } => "affine_warp",
            ShiftKind::ChannelDrop { .. } => "channel_drop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(flatten)]
    pub kind: ShiftKind,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        ShiftSpec { kind, seed }
    }

    /// Named shift chains used as stand-in target domains.
    ///
    /// | name        | chain                                   |
    /// |-------------|-----------------------------------------|
    /// | `rotate30`  | rotate 30°                              |
    /// | `inverted`  | full intensity inversion + noise 0.05   |
    /// | `noisy`     | noise 0.15                              |
    /// | `warped`    | shear 0.3, scale 0.9                    |
    /// | `colorless` | channel drop p = 0.5 + noise 0.05       |
    pub fn preset(name: &str, seed: u64) -> Result<Vec<ShiftSpec>> {
        use ShiftKind::*;
        let kinds = match name {
            "rotate30" => vec![Rotate { degrees: 30.0 }],
            "inverted" => vec![IntensityInvert { amount: 1.0 }, GaussianNoise { std: 0.05 }],
            "noisy" => vec![GaussianNoise { std: 0.15 }],
            "warped" => vec![AffineWarp {
                shear: 0.3,
                scale: 0.9,
                translate: [0.0, 0.0],
            }],
            "colorless" => vec![ChannelDrop { probability: 0.5 }, GaussianNoise { std: 0.05 }],
            _ => {
                return Err(MpbmError::config(
                    "shifts.preset",
                    format!("unknown preset `{name}` (rotate30, inverted, noisy, warped, colorless)"),
                ))
            }
        };
        Ok(kinds
            .into_iter()
            .enumerate()
            .map(|(i, k)| ShiftSpec::new(k, seed.wrapping_add(i as u64)))
            .collect())
    }
}

enum Layout {
    Point,
    Image { c: usize, h: usize, w: usize },
    Flat,
}

fn layout(shape: &[usize]) -> Layout {
    match *shape {
        [2] => Layout::Point,
        [c, h, w] => Layout::Image { c, h, w },
        _ => Layout::Flat,
    }
}

fn unsupported(kind: &ShiftKind, shape: &[usize]) -> MpbmError {
    MpbmError::UnsupportedShift {
        kind: kind.name().into(),
        shape: shape.to_vec(),
    }
}

pub fn apply_shift(d: &Dataset, s: &ShiftSpec) -> Result<Dataset> {
    let shape = d.input_shape().to_vec();
    if !s.kind.supports(&shape) {
        return Err(unsupported(&s.kind, &shape));
    }
    if s.kind.is_identity() {
        let mut out = d.clone();
        out.domain = format!("{}/{}", d.domain, s.kind.name());
        return Ok(out);
    }
    let per = d.inputs().cols();
    let mut x = d.inputs().data().to_vec();
    let mut rng = Rng::new(s.seed);
    match (&s.kind, layout(&shape)) {
        (ShiftKind::IntensityInvert { amount }, _) => {
            for v in &mut x {
                *v = (1.0 - amount) * *v + amount * (1.0 - *v);
            }
        }
        (ShiftKind::GaussianNoise { std }, _) => {
            if *std != 0.0 {
                for v in &mut x {
                    *v += std * rng.normal();
                }
            }
        }
        (ShiftKind::Rotate { degrees }, Layout::Point) => {
            let (sin, cos) = exact_sin_cos(*degrees);
            for p in x.chunks_exact_mut(2) {
                let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
                p[0] = 0.5 + cos * dx - sin * dy;
                p[1] = 0.5 + sin * dx + cos * dy;
            }
        }
        (ShiftKind::Rotate { degrees }, Layout::Image { c, h, w }) => {
            let quarter = degrees.rem_euclid(360.0) / 90.0;
            if quarter.fract() == 0.0 && (h == w || (quarter as usize).is_multiple_of(2)) {
                for img in x.chunks_exact_mut(per) {
                    rotate_quarters(img, c, h, w, quarter as usize);
                }
            } else {
                let (sin, cos) = exact_sin_cos(*degrees);
                // Inverse map: output pixel looks up the source at R⁻¹(p − c) + c.
                let m = [cos, sin, -sin, cos];
                for img in x.chunks_exact_mut(per) {
                    warp_image(img, c, h, w, m, [0.0, 0.0]);
                }
            }
        }
        (ShiftKind::AffineWarp { shear, scale, translate }, Layout::Point) => {
            for p in x.chunks_exact_mut(2) {
                let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
                p[0] = 0.5 + scale * (dx + shear * dy) + translate[0];
                p[1] = 0.5 + scale * dy + translate[1];
            }
        }
        (ShiftKind::AffineWarp { shear, scale, translate }, Layout::Image { c, h, w }) => {
            if *scale == 0.0 {
                return Err(MpbmError::config("affine_warp.scale", "must be non-zero"));
            }
            let inv = [1.0 / scale, -shear / scale, 0.0, 1.0 / scale];
            for img in x.chunks_exact_mut(per) {
                warp_image(img, c, h, w, inv, *translate);
            }
        }
        (ShiftKind::ChannelDrop { probability }, Layout::Image { c, h, w }) if c >= 2 => {
            let plane = h * w;
            for img in x.chunks_exact_mut(per) {
                if rng.uniform() < *probability {
                    let k = rng.below(c);
                    img[k * plane..(k + 1) * plane].fill(0.0);
                }
            }
        }
        (kind, _) => return Err(unsupported(kind, &shape)),
    }
    for v in &mut x {
        *v = v.clamp(0.0, 1.0);
    }
    let mut out = d.with_inputs(Tensor::new(d.inputs().shape().to_vec(), x)?)?;
    out.domain = format!("{}/{}", d.domain, s.kind.name());
    Ok(out)
}

pub fn apply_shifts(d: &Dataset, chain: &[ShiftSpec]) -> Result<Dataset> {
    let mut out = d.clone();
    for s in chain {
        out = apply_shift(&out, s)?;
    }
    Ok(out)
}

/// sin/cos that are exact at multiples of 90°.
fn exact_sin_cos(degrees: f64) -> (f64, f64) {
    let r = degrees.rem_euclid(360.0);
    match r {
        0.0 => (0.0, 1.0),
        90.0 => (1.0, 0.0),
        180.0 => (0.0, -1.0),
        270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}

/// Counter-clockwise by `q` quarter turns, per channel, as displayed (rows run
/// top to bottom). Odd `q` requires a square image.
fn rotate_quarters(img: &mut [f64], c: usize, h: usize, w: usize, q: usize) {
    let plane = h * w;
    for ch in img.chunks_exact_mut(plane).take(c) {
        match q % 4 {
            0 => {}
            2 => ch.reverse(),
            q => {
                let mut cur = ch.to_vec();
                for _ in 0..q {
                    let s = cur.clone();
                    for i in 0..h {
                        for j in 0..w {
                            cur[(w - 1 - j) * w + i] = s[i * w + j];
                        }
                    }
                }
                ch.copy_from_slice(&cur);
            }
        }
    }
}

/// Resample through the inverse map `src = M·(dst − center − t) + center`
/// with bilinear interpolation and zero fill outside the frame.
fn warp_image(img: &mut [f64], c: usize, h: usize, w: usize, m: [f64; 4], t: [f64; 2]) {
    let plane = h * w;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.to_vec();
    let fetch = |s: &[f64], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            s[y as usize * w + x as usize]
        }
    };
    for ch in 0..c {
        let s = &src[ch * plane..(ch + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                // Image y grows downward; flip so positive angles read CCW.
                let dx = j as f64 - cx - t[0];
                let dy = cy - i as f64 + t[1];
                let sx = m[0] * dx + m[1] * dy + cx;
                let sy = cy - (m[2] * dx + m[3] * dy);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (tx, ty) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = fetch(s, y0, x0) * (1.0 - tx) * (1.0 - ty)
                    + fetch(s, y0, x0 + 1) * tx * (1.0 - ty)
                    + fetch(s, y0 + 1, x0) * (1.0 - tx) * ty
                    + fetch(s, y0 + 1, x0 + 1) * tx * ty;
                img[ch * plane + i * w + j] = v;
            }
        }
    }
}
