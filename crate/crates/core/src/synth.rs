//! Labelled ellipsoid phantoms with extreme label-size imbalance.
//!
//! Label 1 is a large ellipsoid near the centre; every smaller label is an
//! ellipsoid placed inside the remaining label-1 region, largest first. Radii are
//! scaled by bisection on the discrete voxel count so each label lands near its
//! target fraction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{make_splits, write_labels, write_volume, LabelEntry, LabelMap, Manifest, Split, Subject, Volume};
use crate::error::{Error, Result};
use crate::seed;

/// Relative tolerance on each label's voxel fraction.
pub const FRACTION_TOLERANCE: f64 = 0.3;

const PLACEMENT_ATTEMPTS: usize = 200;

/// Whole-phantom redraws before giving up.
const LAYOUT_ATTEMPTS: usize = 25;

/// Non-background fractions of the five-label desk dataset.
pub const DESK_FRACTIONS: [f64; 4] = [0.30, 0.05, 0.01, 0.0014];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub extent: usize,
    pub num_labels: usize,
    /// Target voxel fractions of labels `1..L`; background takes the rest.
    pub fractions: Vec<f64>,
    /// Mean intensity per label, background first.
    pub intensity_means: Vec<f32>,
    pub intensity_stds: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk defaults for `num_labels` labels on an `extent³` grid.
    pub fn desk(extent: usize, num_labels: usize, seed: u64) -> Self {
        Self {
            extent,
            num_labels,
            fractions: default_fractions(num_labels),
            intensity_means: (0..num_labels).map(|l| default_mean(l)).collect(),
            intensity_stds: vec![0.15; num_labels],
            noise_sigma: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_labels < 2 || self.num_labels > 256 {
            return bad(format!("num_labels {} outside 2..=256", self.num_labels));
        }
        if self.extent < 4 {
            return bad(format!("extent {} is too small for a phantom", self.extent));
        }
        if self.fractions.len() != self.num_labels - 1 {
            return bad(format!(
                "{} fractions given for {} non-background labels",
                self.fractions.len(),
                self.num_labels - 1
            ));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return bad(format!("fraction {f} must be positive"));
        }
        let total: f64 = self.fractions.iter().sum();
        if total > 1.0 {
            return bad(format!("fractions sum to {total}, which exceeds 1"));
        }
        if self.fractions.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("fractions {:?} must be non-increasing by label", self.fractions));
        }
        if self.intensity_means.len() != self.num_labels || self.intensity_stds.len() != self.num_labels {
            return bad("one intensity mean and std per label are required".into());
        }
        if self.intensity_stds.iter().chain([&self.noise_sigma]).any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("intensity stds and noise sigma must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// `DESK_FRACTIONS` for up to five labels; further labels shrink geometrically.
pub fn default_fractions(num_labels: usize) -> Vec<f64> {
    (1..num_labels)
        .map(|l| match DESK_FRACTIONS.get(l - 1) {
            Some(&f) => f,
            None => DESK_FRACTIONS[3] * 0.5f64.powi((l - DESK_FRACTIONS.len()) as i32),
        })
        .collect()
}

fn default_mean(label: usize) -> f32 {
    match label {
        0 => 0.0,
        l => 1.0 + 0.5 * (l - 1) as f32,
    }
}

/// Axis-aligned ellipsoid with voxel-unit centre and radii.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn scaled(&self, s: f64) -> Self {
        Self {
            centre: self.centre,
            radii: self.radii.map(|r| r * s),
        }
    }

    /// Flat indices of the grid voxels whose centres lie inside.
    fn voxels(&self, e: usize) -> Vec<usize> {
        let range = |a: usize| {
            let lo = (self.centre[a] - self.radii[a]).ceil().max(0.0) as usize;
            let hi = (self.centre[a] + self.radii[a]).floor().min((e - 1) as f64);
            (lo, hi)
        };
        let mut out = Vec::new();
        let (z0, z1) = range(0);
        let (y0, y1) = range(1);
        let (x0, x1) = range(2);
        if z1 < 0.0 || y1 < 0.0 || x1 < 0.0 {
            return out;
        }
        for z in z0..=z1 as usize {
            let dz = (z as f64 - self.centre[0]) / self.radii[0];
            for y in y0..=y1 as usize {
                let dy = (y as f64 - self.centre[1]) / self.radii[1];
                for x in x0..=x1 as usize {
                    let dx = (x as f64 - self.centre[2]) / self.radii[2];
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        out.push((z * e + y) * e + x);
                    }
                }
            }
        }
        out
    }

    /// Scales the radii so the voxel count is as close as possible to `target`.
    fn fit(&self, e: usize, target: usize) -> (Self, Vec<usize>) {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while self.scaled(hi).voxels(e).len() < target && hi < 1e3 {
            hi *= 2.0;
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if self.scaled(mid).voxels(e).len() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let below = self.scaled(lo).voxels(e);
        let above = self.scaled(hi).voxels(e);
        if target.abs_diff(below.len()) < above.len().abs_diff(target) {
            (self.scaled(lo), below)
        } else {
            (self.scaled(hi), above)
        }
    }
}

fn unit_radii(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.8..1.25))
}

fn within_tolerance(count: usize, target: f64) -> bool {
    (count as f64 - target).abs() <= FRACTION_TOLERANCE * target
}

/// Generates one phantom; deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let e = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        match layout(spec, &mut rng) {
            Ok(labels) => {
                let image = labels
                    .iter()
                    .map(|&l| {
                        let l = l as usize;
                        let a: f32 = StandardNormal.sample(&mut rng);
                        let b: f32 = StandardNormal.sample(&mut rng);
                        spec.intensity_means[l] + spec.intensity_stds[l] * a + spec.noise_sigma * b
                    })
                    .collect();
                return Ok((
                    Volume::new([e; 3], [1.0; 3], image)?,
                    LabelMap::new([e; 3], [1.0; 3], labels, spec.num_labels)?,
                ));
            }
            Err(err) => last = Some(err),
        }
    }
    let detail = match last {
        Some(Error::InfeasiblePhantom { detail, .. }) => detail,
        Some(other) => return Err(other),
        None => String::new(),
    };
    Err(Error::InfeasiblePhantom {
        attempts: LAYOUT_ATTEMPTS,
        detail,
    })
}

/// One attempt at the label layout.
fn layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let e = spec.extent;
    let n = e * e * e;
    let mut labels = vec![0u8; n];

    // the outer ellipsoid holds label 1 and every nested label
    let outer_target = spec.fractions.iter().sum::<f64>() * n as f64;
    let c = (e as f64 - 1.0) / 2.0;
    let outer = Ellipsoid {
        centre: std::array::from_fn(|_| c + rng.random_range(-1.5..1.5)),
        radii: unit_radii(rng),
    };
    let (_, inside) = outer.fit(e, outer_target.round() as usize);
    if !within_tolerance(inside.len(), outer_target) {
        return Err(Error::InfeasiblePhantom {
            attempts: 1,
            detail: format!("outer region reached {} of {outer_target:.0} voxels", inside.len()),
        });
    }
    for &v in &inside {
        labels[v] = 1;
    }

    for (i, &f) in spec.fractions.iter().enumerate().skip(1) {
        let label = (i + 1) as u8;
        let target = f * n as f64;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let host: Vec<usize> = (0..n).filter(|&v| labels[v] == 1).collect();
            if host.is_empty() {
                break;
            }
            let v = host[rng.random_range(0..host.len())];
            let centre = [(v / (e * e)) as f64, ((v / e) % e) as f64, (v % e) as f64]
                .map(|x| x + rng.random_range(-0.5..0.5));
            let shape = Ellipsoid {
                centre,
                radii: unit_radii(rng),
            };
            let (_, vox) = shape.fit(e, target.round().max(1.0) as usize);
            if within_tolerance(vox.len(), target) && vox.iter().all(|&v| labels[v] == 1) {
                for v in vox {
                    labels[v] = label;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePhantom {
                attempts: PLACEMENT_ATTEMPTS,
                detail: format!("label {label} (fraction {f}) does not fit inside label 1"),
            });
        }
    }

    let mut counts = vec![0usize; spec.num_labels];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    for (i, &f) in spec.fractions.iter().enumerate() {
        if !within_tolerance(counts[i + 1], f * n as f64) {
            return Err(Error::InfeasiblePhantom {
                attempts: 1,
                detail: format!("label {} ended with {} voxels for a target of {:.0}", i + 1, counts[i + 1], f * n as f64),
            });
        }
    }

    Ok(labels)
}

/// Writes `n_subjects` phantoms and a manifest with `n_sets` 70/30 splits into `out_dir`.
/// Subject `i` uses the seed derived from `(seed, i)`.
pub fn generate_dataset(spec: &PhantomSpec, n_subjects: usize, n_sets: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let splits = make_splits(n_subjects, n_sets, 0.7, seed)?;
    fs::create_dir_all(out_dir)?;
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut counts = vec![0u64; spec.num_labels];
    for i in 0..n_subjects {
        let subject_spec = PhantomSpec {
            seed: seed::derive(seed, &[i as u64]),
            ..spec.clone()
        };
        let (v, m) = generate_phantom(&subject_spec)?;
        for (c, k) in counts.iter_mut().zip(m.counts()) {
            *c += k;
        }
        let id = format!("subject_{i:03}");
        let image = format!("{id}_image.mvol");
        let labels = format!("{id}_labels.mvol");
        write_volume(out_dir.join(&image), &v)?;
        write_labels(out_dir.join(&labels), &m)?;
        subjects.push(Subject {
            id,
            image: image.into(),
            labels: labels.into(),
        });
    }
    let total: u64 = counts.iter().sum();
    let labels = counts
        .iter()
        .enumerate()
        .map(|(l, &c)| LabelEntry {
            id: l,
            name: if l == 0 { "background".into() } else { format!("label_{l}") },
            frequency: c as f64 / total as f64,
        })
        .collect();
    let ids = |idx: &[usize]| idx.iter().map(|&i| subjects[i].id.clone()).collect::<Vec<_>>();
    let splits = splits
        .iter()
        .map(|s| Split {
            train: ids(&s.train),
            val: ids(&s.val),
        })
        .collect();
    let manifest = Manifest::new(subjects, labels, splits, seed, out_dir);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
