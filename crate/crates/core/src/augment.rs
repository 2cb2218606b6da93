//! Rigid training augmentation applied jointly to an image and its labels.
//!
//! The forward map scales by `scale`, rotates in the axial (H×W) plane about the
//! D axis through the volume centre, then shifts by `shift_frac · extent` voxels.
//! Output voxels are filled by inverse mapping: trilinear for images with 0
//! outside the field of view, nearest neighbour for labels with background outside.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{LabelMap, Volume};
use crate::error::{Error, Result};

/// Coordinates this close to an integer are snapped to it, so integer shifts
/// resample without interpolation error.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation_deg: f64,
    /// Shift per axis (D, H, W) as a fraction of that axis's extent.
    pub shift_frac: [f64; 3],
    pub scale: f64,
    pub apply: bool,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_frac: [0.0; 3],
            scale: 1.0,
            apply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub max_shift_frac: f64,
    pub scale_range: (f64, f64),
    /// Draw each axis's shift independently; otherwise one magnitude is shared.
    pub independent_shift: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            max_rotation_deg: 30.0,
            max_shift_frac: 0.2,
            scale_range: (0.8, 1.2),
            independent_shift: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probability)
            && (0.0..=30.0).contains(&self.max_rotation_deg)
            && (0.0..=0.2).contains(&self.max_shift_frac)
            && 0.8 <= self.scale_range.0
            && self.scale_range.0 <= self.scale_range.1
            && self.scale_range.1 <= 1.2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "augmentation ranges {self:?} exceed rotation 30°, shift 0.2, scale [0.8, 1.2]"
            )))
        }
    }

    /// Draws `apply` with the configured probability, then every parameter
    /// uniformly from its range; transforms not applied are the identity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RigidTransform {
        if !rng.random_bool(self.probability) {
            return RigidTransform::identity();
        }
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, self.max_rotation_deg);
        let shift_frac = if self.independent_shift {
            [0, 1, 2].map(|_| sym(rng, self.max_shift_frac))
        } else {
            let m = sym(rng, self.max_shift_frac);
            [m; 3]
        };
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        RigidTransform {
            rotation_deg,
            shift_frac,
            scale,
            apply: true,
        }
    }
}

/// Samples with the default ranges: 80% application, ±30°, ±20%, [0.8, 1.2].
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    AugmentConfig::default().sample(rng)
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

pub fn apply_transform(image: &Volume, labels: &LabelMap, t: &RigidTransform) -> Result<(Volume, LabelMap)> {
    if image.extents() != labels.extents() {
        return Err(Error::Shape {
            op: "apply_transform",
            detail: format!("image {:?} vs labels {:?}", image.extents(), labels.extents()),
        });
    }
    if !t.apply {
        return Ok((image.clone(), labels.clone()));
    }
    let [d, h, w] = image.extents();
    let centre = [d, h, w].map(|n| (n as f64 - 1.0) / 2.0);
    let shift = [
        t.shift_frac[0] * d as f64,
        t.shift_frac[1] * h as f64,
        t.shift_frac[2] * w as f64,
    ];
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
    let inv_s = 1.0 / t.scale;
    let src = image.data();
    let lab = labels.labels();
    let at = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let value = |z: isize, y: isize, x: isize| -> f32 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[at(z as usize, y as usize, x as usize)]
        }
    };

    let n = d * h * w;
    let mut out_img = Vec::with_capacity(n);
    let mut out_lab = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                // undo the shift, then the rotation (transpose), then the scale
                let pz = z as f64 - centre[0] - shift[0];
                let py = y as f64 - centre[1] - shift[1];
                let px = x as f64 - centre[2] - shift[2];
                let ry = cos * py + sin * px;
                let rx = -sin * py + cos * px;
                let sz = snap(pz * inv_s + centre[0]);
                let sy = snap(ry * inv_s + centre[1]);
                let sx = snap(rx * inv_s + centre[2]);

                let (fz, fy, fx) = (sz.floor(), sy.floor(), sx.floor());
                let (tz, ty, tx) = ((sz - fz) as f32, (sy - fy) as f32, (sx - fx) as f32);
                let (iz, iy, ix) = (fz as isize, fy as isize, fx as isize);
                let mut acc = 0.0f32;
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                            let wgt = wz * wy * wx;
                            if wgt != 0.0 {
                                acc += wgt * value(iz + dz, iy + dy, ix + dx);
                            }
                        }
                    }
                }
                out_img.push(acc);

                let (nz, ny, nx) = (sz.round(), sy.round(), sx.round());
                let inside = nz >= 0.0 && ny >= 0.0 && nx >= 0.0 && nz < d as f64 && ny < h as f64 && nx < w as f64;
                out_lab.push(if inside { lab[at(nz as usize, ny as usize, nx as usize)] } else { 0 });
            }
        }
    }
    Ok((
        Volume::new(image.extents(), image.spacing(), out_img)?,
        LabelMap::new(labels.extents(), labels.spacing(), out_lab, labels.num_labels())?,
    ))
}
