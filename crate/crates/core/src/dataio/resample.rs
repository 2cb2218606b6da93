use super::{LabelMap, Volume};
use crate::error::{Error, Result};

/// Per-axis source lookup for one output index: trilinear corners and weight,
/// and the nearest source index.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f32,
    nearest: usize,
}

/// Voxel-centre aligned map from `out` samples onto `n` source samples spaced
/// `ratio` source voxels apart; out-of-range coordinates clamp to the edge.
fn taps(n: usize, out: usize, ratio: f64) -> Vec<Tap> {
    (0..out)
        .map(|j| {
            let x = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = x.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(n - 1),
                t: (x - lo as f64) as f32,
                nearest: (x.round() as usize).min(n - 1),
            }
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

fn resample(v: &Volume, m: &LabelMap, out: [usize; 3], ratio: [f64; 3], spacing: [f64; 3]) -> Result<(Volume, LabelMap)> {
    let [d, h, w] = v.extents();
    let tz = taps(d, out[0], ratio[0]);
    let ty = taps(h, out[1], ratio[1]);
    let tx = taps(w, out[2], ratio[2]);
    let at = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let src = v.data();
    let mut img = Vec::with_capacity(out.iter().product());
    let mut lab = Vec::with_capacity(img.capacity());
    for a in &tz {
        for b in &ty {
            for c in &tx {
                let plane = |z: usize| {
                    let r0 = lerp(src[at(z, b.lo, c.lo)], src[at(z, b.lo, c.hi)], c.t);
                    let r1 = lerp(src[at(z, b.hi, c.lo)], src[at(z, b.hi, c.hi)], c.t);
                    lerp(r0, r1, b.t)
                };
                img.push(lerp(plane(a.lo), plane(a.hi), a.t));
                lab.push(m.labels()[at(a.nearest, b.nearest, c.nearest)]);
            }
        }
    }
    Ok((
        Volume::new(out, spacing, img)?,
        LabelMap::new(out, spacing, lab, m.num_labels())?,
    ))
}

fn check_shared(v: &Volume, m: &LabelMap) -> Result<()> {
    if v.extents() != m.extents() || v.spacing() != m.spacing() {
        return Err(Error::Shape {
            op: "preprocess",
            detail: format!(
                "image grid {:?}@{:?} differs from label grid {:?}@{:?}",
                v.extents(),
                v.spacing(),
                m.extents(),
                m.spacing()
            ),
        });
    }
    Ok(())
}

/// Resamples to isotropic spacing equal to the smallest input spacing:
/// trilinear for the image, nearest for labels.
pub fn resample_isotropic(v: &Volume, m: &LabelMap) -> Result<(Volume, LabelMap)> {
    check_shared(v, m)?;
    let sp = v.spacing();
    let s = sp.iter().copied().fold(f64::INFINITY, f64::min);
    let ext = v.extents();
    let out: [usize; 3] = std::array::from_fn(|i| ((ext[i] as f64 * sp[i] / s).round() as usize).max(1));
    let ratio: [f64; 3] = std::array::from_fn(|i| ext[i] as f64 / out[i] as f64);
    resample(v, m, out, ratio, [s; 3])
}

/// Pads every axis to the largest extent, centring the content; the image is
/// filled with 0 and labels with background.
pub fn zero_pad_cube(v: &Volume, m: &LabelMap) -> Result<(Volume, LabelMap)> {
    check_shared(v, m)?;
    let [d, h, w] = v.extents();
    let e = d.max(h).max(w);
    let off = [(e - d) / 2, (e - h) / 2, (e - w) / 2];
    let mut img = vec![0.0f32; e * e * e];
    let mut lab = vec![0u8; e * e * e];
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = ((z + off[0]) * e + y + off[1]) * e + off[2];
            img[dst..dst + w].copy_from_slice(&v.data()[src..src + w]);
            lab[dst..dst + w].copy_from_slice(&m.labels()[src..src + w]);
        }
    }
    Ok((
        Volume::new([e; 3], v.spacing(), img)?,
        LabelMap::new([e; 3], m.spacing(), lab, m.num_labels())?,
    ))
}

/// Resizes a cube to `target³`, rescaling the spacing by the resize factor.
pub fn resize_cube(v: &Volume, m: &LabelMap, target: usize) -> Result<(Volume, LabelMap)> {
    check_shared(v, m)?;
    let ext = v.extents();
    if ext[0] != ext[1] || ext[1] != ext[2] {
        return Err(Error::Shape {
            op: "resize_cube",
            detail: format!("extents {ext:?} are not cubic"),
        });
    }
    if target == 0 {
        return Err(Error::InvalidConfig("target extent must be positive".into()));
    }
    let ratio = ext[0] as f64 / target as f64;
    let spacing = v.spacing().map(|s| s * ratio);
    resample(v, m, [target; 3], [ratio; 3], spacing)
}

/// Isotropic resampling at the minimum spacing, zero padding to a cube, then
/// resizing to `target_extent³`.
pub fn preprocess(v: &Volume, m: &LabelMap, target_extent: usize) -> Result<(Volume, LabelMap)> {
    let (v, m) = resample_isotropic(v, m)?;
    let (v, m) = zero_pad_cube(&v, &m)?;
    resize_cube(&v, &m, target_extent)
}
