//! Synthetic styled scene pairs.
//!
//! Each scene is drawn from a point `s` in a one-dimensional style space
//! `[0, 1]`. The style fixes the background spectra and texture scale, the
//! spectral direction of injected changes, and the strength of a smooth
//! seasonal difference that alters unchanged land between the two dates.
//! A *localized* pool draws its styles from a narrow window; a *diverse* pool
//! spreads them over the whole space.

use std::f32::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, SceneEntry, ScenePair, Split};
use crate::error::{invalid, Error, Result};
use crate::raster::{write_mask, write_raster, ChangeMask, Raster, CHANGED, UNCHANGED};

pub const SYNTH_BANDS: usize = 4;
pub const AIRLIGHT: f32 = 0.5;

/// Ranges that every style is drawn within. Pairs `(a, b)` whose doc says
/// "across the style space" give the value at style 0 and at style 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_seed: u64,
    /// Per-band base reflectance range.
    pub base_intensity: (f32, f32),
    /// Cycles of base-spectrum drift across the style space.
    pub base_drift: f32,
    /// Texture frequency across the style space, in cycles per 64 pixels.
    pub texture_frequency: (f32, f32),
    pub texture_amplitude: f32,
    /// Target fraction of changed pixels.
    pub change_density: f64,
    pub blob_radius: (f32, f32),
    /// Mean change magnitude across the style space.
    pub change_strength: (f32, f32),
    /// Radians the change direction turns across the style space.
    pub rotation: f32,
    /// Amplitude of a smooth unchanged-land difference between the dates,
    /// along the change direction, across the style space.
    pub seasonal: (f32, f32),
    /// Blend weight toward a grey airlight across the style space.
    pub haze: (f32, f32),
    /// Per-date sensor noise standard deviation.
    pub noise: f32,
    /// Maximum absolute per-band gain drift between the dates.
    pub drift: f32,
}

impl Default for StyleSpec {
    fn default() -> Self {
        Self {
            style_seed: 0,
            base_intensity: (0.35, 0.65),
            base_drift: 0.0,
            texture_frequency: (2.0, 6.0),
            texture_amplitude: 0.25,
            change_density: 0.1,
            blob_radius: (2.5, 6.0),
            change_strength: (0.4, 0.15),
            rotation: 0.0,
            seasonal: (0.0, 0.1),
            haze: (0.0, 0.0),
            noise: 0.01,
            drift: 0.02,
        }
    }
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(a, b): (f32, f32)| a.is_finite() && b.is_finite() && a <= b;
        let finite = |(a, b): (f32, f32)| a.is_finite() && b.is_finite();
        if !(self.change_density > 0.0 && self.change_density <= 0.5) {
            return Err(invalid!(
                "change density must lie in (0, 0.5], got {}",
                self.change_density
            ));
        }
        if !ok_range(self.base_intensity) || !ok_range(self.blob_radius) {
            return Err(invalid!("style ranges must be finite and non-empty"));
        }
        if !finite(self.texture_frequency) || !finite(self.change_strength) || !finite(self.seasonal) {
            return Err(invalid!("style parameters must be finite"));
        }
        if self.blob_radius.0 <= 0.0 || self.texture_frequency.0.min(self.texture_frequency.1) <= 0.0 {
            return Err(invalid!("blob radius and texture frequency must be positive"));
        }
        let unit = |v: f32| (0.0..1.0).contains(&v);
        if !unit(self.haze.0) || !unit(self.haze.1) {
            return Err(invalid!("haze must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0 && self.drift >= 0.0 && self.rotation.is_finite() && self.base_drift.is_finite()) {
            return Err(invalid!(
                "noise, drift, rotation and base drift must be finite and non-negative"
            ));
        }
        Ok(())
    }
}

fn lerp((a, b): (f32, f32), t: f32) -> f32 {
    a + (b - a) * t
}

/// Concrete appearance parameters of one style point.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub param: f32,
    pub base: [f32; SYNTH_BANDS],
    pub texture_frequency: f32,
    /// Unit spectral direction of change.
    pub change_direction: [f32; SYNTH_BANDS],
    pub change_strength: f32,
    pub seasonal: f32,
    pub haze: f32,
}

impl Style {
    pub fn at(s: f32, spec: &StyleSpec) -> Self {
        let s = s.clamp(0.0, 1.0);
        let phase = (spec.style_seed % 997) as f32 / 997.0;
        let base = std::array::from_fn(|b| {
            let t = 0.5 + 0.5 * (TAU * (spec.base_drift * s + b as f32 / SYNTH_BANDS as f32 + phase)).sin();
            lerp(spec.base_intensity, t)
        });
        // turns from bands {0, 1} toward bands {2, 3}
        let theta = spec.rotation * s;
        let (c, sn) = (theta.cos(), theta.sin());
        let h = std::f32::consts::FRAC_1_SQRT_2;
        Self {
            param: s,
            base,
            texture_frequency: lerp(spec.texture_frequency, s),
            change_direction: [c * h, c * h, sn * h, sn * h],
            change_strength: lerp(spec.change_strength, s),
            seasonal: lerp(spec.seasonal, s),
            haze: lerp(spec.haze, s),
        }
    }
}

/// How the style points of a set of scenes are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StylePool {
    /// Styles uniform in `[center - width/2, center + width/2]`.
    Localized { center: f32, width: f32 },
    /// One style per stratum of `[0, 1]`.
    Diverse,
    /// Evenly spaced styles from `from` to `to` (inclusive).
    Graded { from: f32, to: f32 },
}

impl StylePool {
    pub const LOCALIZED_WIDTH: f32 = 0.1;

    pub fn name(&self) -> &'static str {
        match self {
            StylePool::Localized { .. } => "loc",
            StylePool::Diverse => "div",
            StylePool::Graded { .. } => "grad",
        }
    }

    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<f32> {
        match *self {
            StylePool::Localized { center, width } => {
                let lo = (center - width / 2.0).clamp(0.0, 1.0 - width);
                (0..n).map(|_| lo + width * rng.gen::<f32>()).collect()
            }
            StylePool::Diverse => (0..n).map(|i| (i as f32 + rng.gen::<f32>()) / n as f32).collect(),
            StylePool::Graded { from, to } => (0..n)
                .map(|i| {
                    if n == 1 {
                        from
                    } else {
                        from + (to - from) * i as f32 / (n - 1) as f32
                    }
                })
                .collect(),
        }
    }

    /// Group tag of the scene with style `s`. Localized tags share the prefix of their window.
    pub fn group_tag(&self, s: f32) -> String {
        match *self {
            StylePool::Localized { center, .. } => format!("loc{center:.2}-s{s:.3}"),
            _ => format!("{}-s{s:.3}", self.name()),
        }
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in `[0, 1]` with about `cycles` cells across a 64-pixel span.
fn value_noise(h: usize, w: usize, cycles: f32, rng: &mut impl Rng) -> Vec<f32> {
    let cell = (64.0 / cycles).max(1.0);
    let gh = (h as f32 / cell).ceil() as usize + 2;
    let gw = (w as f32 / cell).ceil() as usize + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / cell;
        let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / cell;
            let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) + (g(y0, x0 + 1) - g(y0, x0)) * tx;
            let bot = g(y0 + 1, x0) + (g(y0 + 1, x0 + 1) - g(y0 + 1, x0)) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

/// Disc blobs added until the changed fraction reaches `density`.
/// Returns the mask and, per pixel, the index of the blob covering it.
fn place_blobs(h: usize, w: usize, density: f64, radius: (f32, f32), rng: &mut impl Rng) -> (Vec<u8>, Vec<u32>) {
    let target = (density * (h * w) as f64).round() as usize;
    let mut labels = vec![UNCHANGED; h * w];
    let mut owner = vec![u32::MAX; h * w];
    let mut count = 0usize;
    let mut blob = 0u32;
    while count < target {
        let r = rng.gen_range(radius.0..=radius.1);
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let (y0, y1) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(h - 1),
        );
        let (x0, x1) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(w - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r && labels[y * w + x] == UNCHANGED {
                    labels[y * w + x] = CHANGED;
                    owner[y * w + x] = blob;
                    count += 1;
                    if count >= target {
                        return (labels, owner);
                    }
                }
            }
        }
        blob += 1;
    }
    (labels, owner)
}

/// One synthetic pair with style `s`.
pub fn generate_scene(
    scene_id: impl Into<String>,
    group: impl Into<String>,
    split: Split,
    s: f32,
    size: (usize, usize),
    spec: &StyleSpec,
    rng: &mut impl Rng,
) -> Result<ScenePair> {
    spec.validate()?;
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(invalid!("scene size must be positive"));
    }
    let style = Style::at(s, spec);
    let n = h * w;
    let cover = value_noise(h, w, style.texture_frequency, rng);
    let detail: Vec<Vec<f32>> = (0..SYNTH_BANDS)
        .map(|_| value_noise(h, w, 2.0 * style.texture_frequency, rng))
        .collect();
    let (labels, owner) = place_blobs(h, w, spec.change_density, spec.blob_radius, rng);
    let blobs = owner
        .iter()
        .filter(|&&o| o != u32::MAX)
        .max()
        .map_or(0, |&m| m as usize + 1);
    let strengths: Vec<f32> = (0..blobs)
        .map(|_| style.change_strength * rng.gen_range(0.75..1.25))
        .collect();

    let drift = spec.drift;
    let gain: [f32; SYNTH_BANDS] = std::array::from_fn(|_| 1.0 + rng.gen_range(-drift..=drift));
    let offset: [f32; SYNTH_BANDS] = std::array::from_fn(|_| rng.gen_range(-drift..=drift) * 0.5);
    let season = value_noise(h, w, style.texture_frequency, rng);
    let noise = Normal::new(0.0f32, spec.noise).map_err(|e| invalid!("noise: {e}"))?;
    let (keep, veil) = (1.0 - style.haze, style.haze * AIRLIGHT);
    let amp = spec.texture_amplitude;

    let mut pre = vec![0.0f32; SYNTH_BANDS * n];
    let mut post = vec![0.0f32; SYNTH_BANDS * n];
    for b in 0..SYNTH_BANDS {
        let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
        for p in 0..n {
            let clean = style.base[b] + amp * sign * (cover[p] - 0.5) + 0.3 * amp * (detail[b][p] - 0.5);
            let mut after = gain[b] * clean + offset[b];
            if owner[p] != u32::MAX {
                after += strengths[owner[p] as usize] * style.change_direction[b];
            }
            after += style.seasonal * style.change_direction[b] * (0.7 + 0.3 * season[p]);
            pre[b * n + p] = keep * clean + veil + noise.sample(rng);
            post[b * n + p] = keep * after + veil + noise.sample(rng);
        }
    }
    ScenePair::new(
        scene_id.into(),
        Raster::new(h, w, SYNTH_BANDS, pre)?,
        Raster::new(h, w, SYNTH_BANDS, post)?,
        Some(ChangeMask::new(h, w, labels)?),
        group.into(),
        split,
    )
}

/// What `synthesize` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_scenes: usize,
    pub train_pool: StylePool,
    pub test_scenes: usize,
    pub test_pool: StylePool,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub spec: StyleSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_scenes: 3,
            train_pool: StylePool::Diverse,
            test_scenes: 4,
            test_pool: StylePool::Diverse,
            height: 128,
            width: 128,
            seed: 42,
            spec: StyleSpec::default(),
        }
    }
}

/// Generates a set of scenes from one pool. Styles are drawn first, then scenes,
/// all from a stream seeded by `seed`.
pub fn generate_pool(
    prefix: &str,
    split: Split,
    n: usize,
    pool: StylePool,
    size: (usize, usize),
    spec: &StyleSpec,
    seed: u64,
) -> Result<Vec<ScenePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles = pool.draw(n, &mut rng);
    styles
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            generate_scene(
                format!("{prefix}{i:03}"),
                pool.group_tag(s),
                split,
                s,
                size,
                spec,
                &mut rng,
            )
        })
        .collect()
}

/// Train and test scenes for `cfg`, train first. The two splits use independent streams.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<ScenePair>> {
    cfg.spec.validate()?;
    if cfg.train_scenes + cfg.test_scenes == 0 {
        return Err(invalid!("at least one scene must be requested"));
    }
    let size = (cfg.height, cfg.width);
    let mut scenes = generate_pool(
        "train",
        Split::Train,
        cfg.train_scenes,
        cfg.train_pool,
        size,
        &cfg.spec,
        cfg.seed,
    )?;
    scenes.extend(generate_pool(
        "test",
        Split::Test,
        cfg.test_scenes,
        cfg.test_pool,
        size,
        &cfg.spec,
        cfg.seed ^ 0x7465_7374,
    )?);
    Ok(scenes)
}

/// Writes scenes as CDRAST1 files plus `manifest.json` under `out_dir`.
pub fn write_dataset(scenes: &[ScenePair], out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let band_count = scenes.first().map_or(SYNTH_BANDS, ScenePair::bands);
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let file = |kind: &str| PathBuf::from(format!("{}_{kind}.cdr", s.scene_id));
        let (pre, post) = (file("pre"), file("post"));
        write_raster(&s.pre, out_dir.join(&pre))?;
        write_raster(&s.post, out_dir.join(&post))?;
        let mask = match &s.mask {
            Some(m) => {
                let p = file("mask");
                write_mask(m, out_dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(SceneEntry {
            id: s.scene_id.clone(),
            pre,
            post,
            mask,
            group: s.group.clone(),
            split: s.split,
        });
    }
    let manifest = Manifest {
        band_count,
        num_change_classes: 1,
        scenes: entries,
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn change_density_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = StyleSpec::default();
        for s in [0.0, 0.5, 1.0] {
            let sc = generate_scene("a", "g", Split::Train, s, (128, 128), &spec, &mut rng).unwrap();
            let changed = sc.mask.unwrap().count(CHANGED) as f64;
            assert!((changed - 1638.0).abs() <= 0.2 * 1638.0, "{changed}");
        }
    }

    #[test]
    fn pools_draw_expected_styles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = StylePool::Diverse.draw(4, &mut rng);
        for (i, s) in d.iter().enumerate() {
            assert!(*s >= i as f32 / 4.0 && *s < (i + 1) as f32 / 4.0);
        }
        let l = StylePool::Localized {
            center: 0.5,
            width: 0.1,
        }
        .draw(10, &mut rng);
        assert!(l.iter().all(|s| (0.45..=0.55).contains(s)));
        let g = StylePool::Graded { from: 0.0, to: 1.0 }.draw(5, &mut rng);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn group_tags() {
        let spec = StyleSpec::default();
        let div = generate_pool("d", Split::Train, 4, StylePool::Diverse, (16, 16), &spec, 9).unwrap();
        let mut tags: Vec<&str> = div.iter().map(|s| s.group.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        assert_eq!(tags.len(), 4);
        let pool = StylePool::Localized {
            center: 0.2,
            width: 0.1,
        };
        let loc = generate_pool("l", Split::Train, 4, pool, (16, 16), &spec, 9).unwrap();
        assert!(loc.iter().all(|s| s.group.starts_with("loc0.20-")));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            height: 24,
            width: 24,
            ..SynthConfig::default()
        };
        assert_eq!(synthesize(&cfg).unwrap(), synthesize(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg };
        assert_ne!(synthesize(&cfg).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn bad_density_rejected() {
        let spec = StyleSpec {
            change_density: 0.0,
            ..StyleSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = StyleSpec {
            change_density: 0.6,
            ..StyleSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
