//! Synthetic multi-center lesion images: a smooth textured background
//! with one to three soft-edged elliptical or metaball lesions. Each center
//! is a [`CenterProfile`]; centers differ in colour, texture, contrast,
//! noise, shape statistics and image size.

use std::fs;
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{fnv1a, DatasetManifest, ManifestEntry, SegmentationSample, Split};
use super::mask::{extract_box, BinaryMask};
use super::pnm::{quantize, write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_AREA_FRACTION: f64 = 0.02;
pub const MAX_AREA_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterProfile {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Mean background RGB in `[0, 1]`.
    pub background: [f64; 3],
    /// Amplitude of the sinusoidal background texture, `[0, 0.3]`.
    pub texture_amplitude: f64,
    /// Texture frequency in cycles per image, `[0.5, 8]`.
    pub texture_frequency: f64,
    /// Direction of the lesion colour shift, entries in `[-1, 1]`.
    pub lesion_tint: [f64; 3],
    /// Scale of the lesion colour shift, `[0.05, 1]`.
    pub lesion_contrast: f64,
    /// Minor/major axis ratio range within `[0.3, 1]`.
    pub eccentricity: (f64, f64),
    /// Additive Gaussian noise σ, `[0, 0.2]`.
    pub noise_sigma: f64,
    /// Inclusive lesion count range within `[1, 3]`.
    pub lesions_per_image: (usize, usize),
    /// Total lesion area fraction per image, within `[0.02, 0.25]`.
    pub area_fraction: (f64, f64),
    /// Probability that a lesion is a two-blob metaball instead of an ellipse.
    pub metaball_prob: f64,
    /// Width of the soft lesion edge in pixels, `[0.3, 4]`.
    pub edge_softness: f64,
}

impl Default for CenterProfile {
    fn default() -> Self {
        Self {
            name: "center_a".into(),
            width: 64,
            height: 64,
            background: [0.62, 0.38, 0.32],
            texture_amplitude: 0.06,
            texture_frequency: 3.0,
            lesion_tint: [0.6, -0.2, -0.3],
            lesion_contrast: 0.45,
            eccentricity: (0.6, 1.0),
            noise_sigma: 0.02,
            lesions_per_image: (1, 1),
            area_fraction: (0.04, 0.25),
            metaball_prob: 0.25,
            edge_softness: 1.0,
        }
    }
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl CenterProfile {
    /// Five built-in single-lesion centers with distinct acquisition styles.
    pub fn builtin(count: usize) -> Vec<CenterProfile> {
        let base = CenterProfile::default();
        let all = [
            base.clone(),
            CenterProfile {
                name: "center_b".into(),
                width: 72,
                height: 64,
                background: [0.52, 0.33, 0.30],
                texture_amplitude: 0.08,
                texture_frequency: 4.0,
                lesion_tint: [0.5, 0.1, -0.2],
                lesion_contrast: 0.4,
                noise_sigma: 0.03,
                ..base.clone()
            },
            CenterProfile {
                name: "center_c".into(),
                width: 64,
                height: 80,
                background: [0.68, 0.45, 0.40],
                texture_amplitude: 0.05,
                texture_frequency: 2.0,
                lesion_tint: [-0.3, -0.5, -0.4],
                lesion_contrast: 0.4,
                eccentricity: (0.5, 0.9),
                noise_sigma: 0.025,
                ..base.clone()
            },
            CenterProfile {
                name: "center_d".into(),
                width: 80,
                height: 80,
                background: [0.55, 0.42, 0.36],
                texture_amplitude: 0.1,
                texture_frequency: 5.0,
                lesion_tint: [0.4, 0.3, -0.1],
                lesion_contrast: 0.35,
                noise_sigma: 0.035,
                metaball_prob: 0.4,
                ..base.clone()
            },
            CenterProfile {
                name: "center_e".into(),
                width: 64,
                height: 64,
                background: [0.48, 0.30, 0.34],
                texture_amplitude: 0.09,
                texture_frequency: 6.0,
                lesion_tint: [0.5, -0.1, 0.3],
                lesion_contrast: 0.35,
                eccentricity: (0.45, 0.9),
                noise_sigma: 0.04,
                edge_softness: 1.5,
                ..base
            },
        ];
        all.into_iter().cycle().take(count).enumerate().map(|(i, mut p)| {
            if i >= 5 {
                p.name = format!("{}_{}", p.name, i / 5);
                p.texture_frequency += (i / 5) as f64 * 0.5;
            }
            p
        }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            bad.push(format!("name {:?} must be non-empty [A-Za-z0-9_-]", self.name));
        }
        if self.width < 8 || self.height < 8 {
            bad.push(format!("image size {}x{} must be at least 8x8", self.width, self.height));
        }
        if !self.background.iter().all(|&v| in_range(v, 0.0, 1.0)) {
            bad.push("background entries must lie in [0, 1]".into());
        }
        if !in_range(self.texture_amplitude, 0.0, 0.3) {
            bad.push("texture_amplitude must lie in [0, 0.3]".into());
        }
        if !in_range(self.texture_frequency, 0.5, 8.0) {
            bad.push("texture_frequency must lie in [0.5, 8]".into());
        }
        if !self.lesion_tint.iter().all(|&v| in_range(v, -1.0, 1.0)) {
            bad.push("lesion_tint entries must lie in [-1, 1]".into());
        }
        if !in_range(self.lesion_contrast, 0.05, 1.0) {
            bad.push("lesion_contrast must lie in [0.05, 1]".into());
        }
        let (e0, e1) = self.eccentricity;
        if !(in_range(e0, 0.3, 1.0) && in_range(e1, 0.3, 1.0) && e0 <= e1) {
            bad.push("eccentricity must be an ordered range within [0.3, 1]".into());
        }
        if !in_range(self.noise_sigma, 0.0, 0.2) {
            bad.push("noise_sigma must lie in [0, 0.2]".into());
        }
        let (l0, l1) = self.lesions_per_image;
        if !(1..=3).contains(&l0) || !(1..=3).contains(&l1) || l0 > l1 {
            bad.push("lesions_per_image must be an ordered range within [1, 3]".into());
        }
        let (a0, a1) = self.area_fraction;
        if !(in_range(a0, MIN_AREA_FRACTION, MAX_AREA_FRACTION)
            && in_range(a1, MIN_AREA_FRACTION, MAX_AREA_FRACTION)
            && a0 < a1)
        {
            bad.push("area_fraction must be an increasing range within [0.02, 0.25]".into());
        }
        if !in_range(self.metaball_prob, 0.0, 1.0) {
            bad.push("metaball_prob must lie in [0, 1]".into());
        }
        if !in_range(self.edge_softness, 0.3, 4.0) {
            bad.push("edge_softness must lie in [0.3, 4]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("profile {}: {}", self.name, bad.join("; "))))
        }
    }

    fn same_statistics(&self, other: &CenterProfile) -> bool {
        CenterProfile {
            name: String::new(),
            ..self.clone()
        } == CenterProfile {
            name: String::new(),
            ..other.clone()
        }
    }
}

/// One elliptical blob; a lesion is the metaball sum of one or more blobs.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    major: f64,
    minor: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.major).powi(2) + (v / self.minor).powi(2)
    }
}

#[derive(Clone, Debug)]
struct Lesion {
    blobs: Vec<Blob>,
    cx: f64,
    cy: f64,
    /// Radius of a disc containing the lesion.
    reach: f64,
    scale: f64,
}

impl Lesion {
    /// Soft occupancy in `[0, 1]`, exactly 0.5 on the lesion boundary.
    fn occupancy(&self, x: f64, y: f64, softness: f64) -> f64 {
        let field: f64 = self.blobs.iter().map(|b| (-2.0 * b.r2(x, y)).exp()).sum();
        let level = if field > 0.0 { field.ln() + 2.0 } else { -1e3 };
        let z = level * self.scale / (4.0 * softness);
        1.0 / (1.0 + (-z).exp())
    }
}

/// One rendered image with its per-lesion masks.
pub struct SyntheticImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub union: BinaryMask,
    pub components: Vec<BinaryMask>,
}

fn sample_lesion(rng: &mut ChaCha8Rng, p: &CenterProfile, area: f64) -> Option<Lesion> {
    let (w, h) = (p.width as f64, p.height as f64);
    let ecc = rng.random_range(p.eccentricity.0..=p.eccentricity.1);
    let major = (area / (std::f64::consts::PI * ecc)).sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let metaball = rng.random_bool(p.metaball_prob);
    let reach = if metaball { major * 1.3 } else { major } + p.edge_softness;
    if 2.0 * reach + 2.0 >= w.min(h) {
        return None;
    }
    let cx = rng.random_range(reach + 1.0..w - reach - 1.0);
    let cy = rng.random_range(reach + 1.0..h - reach - 1.0);
    let blobs = if metaball {
        let (a, b) = (major * 0.75, ecc * major * 0.75);
        let off = 0.55 * major;
        let tilt = rng.random_range(-0.6..0.6f64);
        let (s2, c2) = (theta + tilt).sin_cos();
        vec![
            Blob { cx: cx - off * cos, cy: cy - off * sin, major: a, minor: b, cos, sin },
            Blob { cx: cx + off * cos, cy: cy + off * sin, major: a, minor: b, cos: c2, sin: s2 },
        ]
    } else {
        vec![Blob { cx, cy, major, minor: ecc * major, cos, sin }]
    };
    Some(Lesion {
        blobs,
        cx,
        cy,
        reach,
        scale: (ecc * major).max(1.0),
    })
}

/// Renders one image. Retries internally until the lesion count and total
/// area fraction satisfy the profile.
pub fn render_image(profile: &CenterProfile, rng: &mut ChaCha8Rng) -> Result<SyntheticImage> {
    profile.validate()?;
    let (w, h) = (profile.width, profile.height);
    let px = (w * h) as f64;
    let noise = Normal::new(0.0, profile.noise_sigma.max(1e-12)).expect("valid sigma");
    for _attempt in 0..200 {
        let k = rng.random_range(profile.lesions_per_image.0..=profile.lesions_per_image.1);
        let total = rng.random_range(profile.area_fraction.0..=profile.area_fraction.1);
        let shares: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.0)).collect();
        let share_sum: f64 = shares.iter().sum();
        let mut lesions: Vec<Lesion> = Vec::with_capacity(k);
        for s in &shares {
            let Some(l) = sample_lesion(rng, profile, total * s / share_sum * px) else {
                break;
            };
            let clear = lesions.iter().all(|o| {
                ((o.cx - l.cx).powi(2) + (o.cy - l.cy).powi(2)).sqrt() > o.reach + l.reach + 3.0
            });
            if !clear {
                break;
            }
            lesions.push(l);
        }
        if lesions.len() != k {
            continue;
        }

        let mut occupancy = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                occupancy[y * w + x] = lesions
                    .iter()
                    .map(|l| l.occupancy(fx, fy, profile.edge_softness))
                    .fold(0.0, f64::max);
            }
        }
        let union = BinaryMask::new(h, w, occupancy.iter().map(|&o| o >= 0.5).collect())?;
        let frac = union.fraction();
        if frac < profile.area_fraction.0 || frac > profile.area_fraction.1 {
            continue;
        }
        let components = union.connected_components();
        if components.len() != k {
            continue;
        }

        let tex: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let f = profile.texture_frequency * rng.random_range(0.6..1.4);
                (f * ang.cos(), f * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let channel_gain = [1.0, 0.8, 0.7];
        let mut rgb = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let t = tex
                    .iter()
                    .map(|&(fx, fy, ph)| (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                let o = occupancy[y * w + x];
                for c in 0..3 {
                    let bg = profile.background[c] + profile.texture_amplitude * t * channel_gain[c];
                    let lesion = profile.lesion_contrast * profile.lesion_tint[c];
                    let n = if profile.noise_sigma > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    rgb[(y * w + x) * 3 + c] = (bg + o * lesion + n).clamp(0.0, 1.0);
                }
            }
        }
        return Ok(SyntheticImage {
            width: w,
            height: h,
            rgb,
            union,
            components,
        });
    }
    Err(Error::Config(format!(
        "profile {} cannot place its lesions in a {w}x{h} image",
        profile.name
    )))
}

/// An in-memory sample (no quantisation) of the first lesion of a freshly
/// rendered image.
pub fn synthetic_sample(profile: &CenterProfile, seed: u64, sample_id: &str) -> Result<SegmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = render_image(profile, &mut rng)?;
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32;
        }
    }
    let mask = img.components.into_iter().next().expect("at least one lesion");
    Ok(SegmentationSample {
        sample_id: sample_id.into(),
        center_id: profile.name.clone(),
        image: Tensor::new(&[3, h, w], data)?,
        bbox: extract_box(&mask)?,
        mask,
    })
}

fn image_seed(seed: u64, center: &str, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ fnv1a(center.as_bytes()) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn write_image(
    out_dir: &Path,
    profile: &CenterProfile,
    index: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, &profile.name, index));
    let img = render_image(profile, &mut rng)?;
    let image_id = format!("{}_{index:04}", profile.name);
    let image_rel = format!("images/{image_id}.ppm");
    let rgb: Vec<u8> = img.rgb.iter().map(|&v| quantize(v)).collect();
    write_ppm(&out_dir.join(&image_rel), img.width, img.height, &rgb)?;
    let single = img.components.len() == 1;
    img.components
        .iter()
        .enumerate()
        .map(|(j, comp)| {
            let sample_id = if single {
                image_id.clone()
            } else {
                format!("{image_id}_l{j}")
            };
            let mask_rel = format!("masks/{sample_id}.pgm");
            let gray: Vec<u8> = comp.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_pgm(&out_dir.join(&mask_rel), img.width, img.height, &gray)?;
            Ok(ManifestEntry {
                sample_id,
                image_path: image_rel.clone(),
                mask_path: mask_rel,
                center_id: profile.name.clone(),
                height: img.height,
                width: img.width,
                split: Split::Train,
                bbox: Some(extract_box(comp)?),
            })
        })
        .collect()
}

/// Generates `per_center` images for every profile under `out_dir`
/// (`images/`, `masks/`, `manifest.json`), one manifest entry per lesion.
/// Output is a deterministic function of the profiles and `seed`,
/// independent of `jobs`.
pub fn generate_synthetic_dataset(
    profiles: &[CenterProfile],
    per_center: usize,
    out_dir: &Path,
    seed: u64,
    jobs: usize,
) -> Result<DatasetManifest> {
    if per_center == 0 {
        return Err(Error::Config("per_center must be >= 1".into()));
    }
    if profiles.is_empty() {
        return Err(Error::Config("at least one center profile is required".into()));
    }
    for (i, p) in profiles.iter().enumerate() {
        p.validate()?;
        for q in &profiles[..i] {
            if q.name == p.name {
                return Err(Error::Config(format!("duplicate center name {}", p.name)));
            }
            if q.same_statistics(p) {
                return Err(Error::Config(format!(
                    "centers {} and {} have identical parameters",
                    q.name, p.name
                )));
            }
        }
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let jobs_list: Vec<(usize, usize)> = (0..profiles.len())
        .flat_map(|c| (0..per_center).map(move |i| (c, i)))
        .collect();
    let workers = jobs.clamp(1, jobs_list.len());
    let mut results: Vec<Option<Result<Vec<ManifestEntry>>>> =
        (0..jobs_list.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs_list = &jobs_list;
                s.spawn(move || {
                    jobs_list
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(k, &(c, i))| (k, write_image(out_dir, &profiles[c], i, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("generator worker panicked") {
                results[k] = Some(r);
            }
        }
    });
    let mut entries = Vec::new();
    for r in results {
        entries.extend(r.expect("every job ran")?);
    }
    let manifest = DatasetManifest::new(entries, Some(seed));
    manifest.save(out_dir)?;
    Ok(manifest)
}
