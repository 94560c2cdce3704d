//! Pinhole-camera geometry for head pairs.
//!
//! Two encodings are derived from a pair of head boxes:
//!
//! * an 8-dim 2D encoding: box centers and sizes divided by the longer image
//!   side, with centers measured from the top-left corner;
//! * a 3-dim unit direction from head 1 to head 2 in camera coordinates,
//!   recovered without metric depth by treating depth as inversely
//!   proportional to the square root of the box area.
//!
//! The principal point is the exact image center. The depth proportionality
//! constant cancels in the normalized direction and is never represented.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Default horizontal field of view assumed for images of unknown origin.
pub const DEFAULT_FOV_DEG: f64 = 53.0;

const UNIT_TOL: f64 = 1e-9;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidValue(format!(
                "image dims must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn max_side(&self) -> f64 {
        f64::from(self.width.max(self.height))
    }
}

/// Axis-aligned head box in pixels, origin at the image top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl HeadBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::NonFinite("head box center"));
        }
        if !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "head box size must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Mirror about the vertical image centerline.
    pub fn flipped(&self, dims: ImageDims) -> Self {
        Self {
            cx: f64::from(dims.width) - self.cx,
            ..*self
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub fov_deg: f64,
}

impl CameraIntrinsics {
    /// Camera with an explicit focal length; the field of view is back-computed
    /// from the longer image side.
    pub fn from_focal(dims: ImageDims, focal_px: f64) -> Result<Self> {
        if !(focal_px > 0.0 && focal_px.is_finite()) {
            return Err(Error::InvalidValue(format!("focal length {focal_px}")));
        }
        let fov_deg = 2.0 * (dims.max_side() / 2.0 / focal_px).atan().to_degrees();
        Ok(Self { focal_px, fov_deg })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            focal_px: self.focal_px * s,
            fov_deg: self.fov_deg,
        }
    }
}

/// `f = max(w, h) / 2 * cot(fov / 2)`.
pub fn focal_from_fov(dims: ImageDims, fov_deg: f64) -> Result<CameraIntrinsics> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::OutOfRangeFov(fov_deg));
    }
    let half = (fov_deg / 2.0).to_radians();
    Ok(CameraIntrinsics {
        focal_px: dims.max_side() / 2.0 / half.tan(),
        fov_deg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialEncoding {
    pub enc2d: [f64; 8],
    pub dir3d: Vec3,
}

impl SpatialEncoding {
    pub const DIM: usize = 11;

    pub fn to_vec(&self) -> Vec<f64> {
        self.enc2d
            .iter()
            .chain(self.dir3d.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoGazeLabels {
    pub g1: Vec3,
    pub g2: Vec3,
}

pub fn spatial_encoding_2d(b1: &HeadBox, b2: &HeadBox, dims: ImageDims) -> [f64; 8] {
    let s = dims.max_side();
    let mut out = [0.0; 8];
    for (i, v) in b1.as_array().iter().chain(b2.as_array().iter()).enumerate() {
        out[i] = v / s;
    }
    out
}

/// Unnormalized relative vector `[x, y, z]` from head 1 to head 2.
fn relative_vector(b1: &HeadBox, b2: &HeadBox, dims: ImageDims, cam: &CameraIntrinsics) -> Vec3 {
    let (ox, oy) = (f64::from(dims.width) / 2.0, f64::from(dims.height) / 2.0);
    let (r1, r2) = (b1.area().sqrt(), b2.area().sqrt());
    let (x1, y1) = (b1.cx - ox, b1.cy - oy);
    let (x2, y2) = (b2.cx - ox, b2.cy - oy);
    [
        (x2 / r2 - x1 / r1) / cam.focal_px,
        (y2 / r2 - y1 / r1) / cam.focal_px,
        1.0 / r2 - 1.0 / r1,
    ]
}

pub fn relative_direction_3d(
    b1: &HeadBox,
    b2: &HeadBox,
    dims: ImageDims,
    cam: &CameraIntrinsics,
) -> Result<Vec3> {
    b1.validate()?;
    b2.validate()?;
    let v = relative_vector(b1, b2, dims, cam);
    let n = norm(&v);
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateGeometry(n));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

pub fn pseudo_gaze_labels(v: &Vec3) -> Result<PseudoGazeLabels> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    Ok(PseudoGazeLabels {
        g1: *v,
        g2: [-v[0], -v[1], -v[2]],
    })
}

pub fn spatial_encoding(
    b1: &HeadBox,
    b2: &HeadBox,
    dims: ImageDims,
    cam: &CameraIntrinsics,
) -> Result<SpatialEncoding> {
    Ok(SpatialEncoding {
        enc2d: spatial_encoding_2d(b1, b2, dims),
        dir3d: relative_direction_3d(b1, b2, dims, cam)?,
    })
}

/// True when `(b1, b2)` must be swapped so that the first head has the
/// lexicographically smaller `(cx, cy)` center, ties broken by smaller area.
pub fn needs_swap(b1: &HeadBox, b2: &HeadBox) -> bool {
    let key = |b: &HeadBox| (b.cx, b.cy, b.area());
    let (k1, k2) = (key(b1), key(b2));
    k1.partial_cmp(&k2) == Some(std::cmp::Ordering::Greater)
}

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn neg(v: &Vec3) -> Vec3 {
    [-v[0], -v[1], -v[2]]
}

/// Angle between two nonzero vectors, in degrees.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}
