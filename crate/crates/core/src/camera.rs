//! Pinhole projection and the crop/scale reparameterization between the
//! cropped network frame and the full camera frame.
//!
//! Crop convention: `bx = (crop_center_x − cx) / cx` (likewise `by`), and
//! `s = B / 224` for a square box of side `B`. With this, the full-frame root
//! translation relates to the crop-frame one by `z = z_c·s` and
//! `fx·x/z = (fx/s)·x_c/z_c + bx·cx`.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geom::{rot, V3};

/// Side of the square network input, in pixels.
pub const CROP_SIZE: f64 = 224.0;
/// Minimum depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;
/// Depth normalization constant for τ.
pub const TAU_SCALE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 1500.0,
            fy: 1500.0,
            cx: 960.0,
            cy: 540.0,
            width: 1920,
            height: 1080,
        }
    }
}

/// `P = [bx, by, s]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub bx: f64,
    pub by: f64,
    pub s: f64,
}

impl CropParams {
    /// The uncropped case, `P = (0, 0, 1)`.
    pub const IDENTITY: CropParams = CropParams {
        bx: 0.0,
        by: 0.0,
        s: 1.0,
    };

    /// Crop center in full-image pixels.
    pub fn center(&self, k: &Intrinsics) -> [f64; 2] {
        [k.cx + self.bx * k.cx, k.cy + self.by * k.cy]
    }

    /// Maps a full-image pixel into the 224×224 crop.
    pub fn to_crop_pixel(&self, k: &Intrinsics, uv: [f64; 2]) -> [f64; 2] {
        let c = self.center(k);
        [
            CROP_SIZE / 2.0 + (uv[0] - c[0]) / self.s,
            CROP_SIZE / 2.0 + (uv[1] - c[1]) / self.s,
        ]
    }
}

/// World→camera extrinsic: `X_cam = R·X_world + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        rot::add(&rot::apply(&self.rotation, p), &self.translation)
    }

    pub fn camera_to_world(&self, p: &[f64; 3]) -> [f64; 3] {
        rot::apply(&rot::transpose(&self.rotation), &rot::sub(p, &self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.camera_to_world(&[0.0; 3])
    }
}

pub fn project_generic<T: Real>(p: &V3<T>, k: &Intrinsics) -> Result<[T; 2]> {
    let z = p.z();
    if z.value() <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: z.value() });
    }
    Ok([p.x() / z * k.fx + k.cx, p.y() / z * k.fy + k.cy])
}

pub fn project(point: [f64; 3], k: &Intrinsics) -> Result<[f64; 2]> {
    project_generic(&V3(point), k)
}

/// Expands the short side of `(x0, y0, w, h)` about its center.
pub fn squarify(x0: f64, y0: f64, w: f64, h: f64) -> (f64, f64, f64) {
    let side = w.max(h);
    let cx = x0 + w / 2.0;
    let cy = y0 + h / 2.0;
    (cx - side / 2.0, cy - side / 2.0, side)
}

pub fn crop_params_from_bbox(x0: f64, y0: f64, side: f64, k: &Intrinsics) -> Result<CropParams> {
    if !(side > 0.0) {
        return Err(Error::EmptyBox { side });
    }
    Ok(CropParams {
        s: side / CROP_SIZE,
        bx: (x0 + side / 2.0 - k.cx) / k.cx,
        by: (y0 + side / 2.0 - k.cy) / k.cy,
    })
}

pub fn crop_to_full_generic<T: Real>(tau_c: &V3<T>, p: &CropParams, k: &Intrinsics) -> Result<V3<T>> {
    if tau_c.z().value() <= 0.0 {
        return Err(Error::BehindCamera { z: tau_c.z().value() });
    }
    let z = tau_c.z() * p.s;
    Ok(V3([
        tau_c.x() + z * (p.bx * k.cx / k.fx),
        tau_c.y() + z * (p.by * k.cy / k.fy),
        z,
    ]))
}

pub fn crop_to_full(tau_c: [f64; 3], p: &CropParams, k: &Intrinsics) -> Result<[f64; 3]> {
    crop_to_full_generic(&V3(tau_c), p, k).map(|v| v.0)
}

pub fn full_to_crop(tau: [f64; 3], p: &CropParams, k: &Intrinsics) -> Result<[f64; 3]> {
    if tau[2] <= 0.0 {
        return Err(Error::BehindCamera { z: tau[2] });
    }
    let z = tau[2];
    Ok([
        tau[0] - z * (p.bx * k.cx / k.fx),
        tau[1] - z * (p.by * k.cy / k.fy),
        z / p.s,
    ])
}

pub fn tau_normalize(tau: [f64; 3]) -> [f64; 3] {
    tau.map(|v| v / TAU_SCALE)
}

pub fn tau_denormalize(tau: [f64; 3]) -> [f64; 3] {
    tau.map(|v| v * TAU_SCALE)
}

/// Pinhole camera on crop pixels with principal point at the crop center,
/// used by estimators that do not know where the crop came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropCamera {
    pub focal: f64,
}

impl CropCamera {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: CROP_SIZE / 2.0,
            cy: CROP_SIZE / 2.0,
            width: CROP_SIZE as u32,
            height: CROP_SIZE as u32,
        }
    }
}
