//! Scene pairs, manifests and radiometric normalization statistics.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::raster::{read_mask, read_raster, ChangeMask, Raster, IGNORE};

/// `K` change classes plus one unchanged class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    num_change_classes: usize,
}

impl ClassScheme {
    pub fn new(num_change_classes: usize) -> Result<Self> {
        if num_change_classes == 0 {
            return Err(invalid!("at least one change class is required"));
        }
        Ok(Self { num_change_classes })
    }

    pub fn binary() -> Self {
        Self { num_change_classes: 1 }
    }

    pub fn num_change_classes(&self) -> usize {
        self.num_change_classes
    }

    pub fn total_classes(&self) -> usize {
        self.num_change_classes + 1
    }

    pub fn is_binary(&self) -> bool {
        self.num_change_classes == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A co-registered pre/post image pair with an optional reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub pre: Raster,
    pub post: Raster,
    pub mask: Option<ChangeMask>,
    pub group: String,
    pub split: Split,
}

impl ScenePair {
    pub fn new(
        scene_id: impl Into<String>,
        pre: Raster,
        post: Raster,
        mask: Option<ChangeMask>,
        group: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if !pre.same_shape(&post) {
            return Err(invalid!(
                "scene {scene_id}: pre is {}x{}x{} but post is {}x{}x{}",
                pre.channels(),
                pre.height(),
                pre.width(),
                post.channels(),
                post.height(),
                post.width()
            ));
        }
        if let Some(m) = &mask {
            if !m.matches(&pre) {
                return Err(invalid!(
                    "scene {scene_id}: mask is {}x{} but images are {}x{}",
                    m.height(),
                    m.width(),
                    pre.height(),
                    pre.width()
                ));
            }
        }
        Ok(Self {
            scene_id,
            pre,
            post,
            mask,
            group: group.into(),
            split,
        })
    }

    pub fn height(&self) -> usize {
        self.pre.height()
    }

    pub fn width(&self) -> usize {
        self.pre.width()
    }

    pub fn bands(&self) -> usize {
        self.pre.channels()
    }

    pub fn require_mask(&self) -> Result<&ChangeMask> {
        self.mask
            .as_ref()
            .ok_or_else(|| invalid!("scene {} has no reference mask", self.scene_id))
    }
}

/// One scene entry as it appears in the manifest JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub mask: Option<PathBuf>,
    pub group: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub band_count: usize,
    pub num_change_classes: usize,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn class_scheme(&self) -> Result<ClassScheme> {
        ClassScheme::new(self.num_change_classes)
    }

    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().filter(|s| s.split == split).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A manifest together with every scene it references, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scheme: ClassScheme,
    pub scenes: Vec<ScenePair>,
}

impl Dataset {
    /// Number of training scenes (`I`).
    pub fn train_len(&self) -> usize {
        self.manifest.count(Split::Train)
    }

    /// Number of test scenes (`J`).
    pub fn test_len(&self) -> usize {
        self.manifest.count(Split::Test)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ScenePair> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn scene(&self, id: &str) -> Option<&ScenePair> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }
}

/// Loads a manifest and all of its rasters, validating every scene.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    dataset_from_manifest(manifest, base)
}

/// Loads the scenes of an already-parsed manifest; paths resolve against `base`.
pub fn dataset_from_manifest(manifest: Manifest, base: &Path) -> Result<Dataset> {
    let scheme = manifest.class_scheme()?;
    if manifest.band_count == 0 {
        return Err(invalid!("band_count must be positive"));
    }
    let mut seen = HashSet::new();
    for entry in &manifest.scenes {
        if !seen.insert(entry.id.as_str()) {
            return Err(invalid!("duplicate scene id {}", entry.id));
        }
    }

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let scene = load_entry(entry, base, &manifest, scheme).map_err(|e| match e {
            Error::Validation(m) if !m.contains(&entry.id) => Error::Validation(format!("scene {}: {m}", entry.id)),
            other => other,
        })?;
        scenes.push(scene);
    }
    Ok(Dataset {
        manifest,
        scheme,
        scenes,
    })
}

fn load_entry(entry: &SceneEntry, base: &Path, manifest: &Manifest, scheme: ClassScheme) -> Result<ScenePair> {
    let resolve = |p: &Path| base.join(p);
    let missing = |p: &Path| -> Result<()> {
        if resolve(p).is_file() {
            Ok(())
        } else {
            Err(invalid!(
                "scene {}: referenced file {} does not exist",
                entry.id,
                resolve(p).display()
            ))
        }
    };
    missing(&entry.pre)?;
    missing(&entry.post)?;
    if let Some(m) = &entry.mask {
        missing(m)?;
    }

    let pre = read_raster(resolve(&entry.pre))?;
    let post = read_raster(resolve(&entry.post))?;
    if pre.channels() != manifest.band_count {
        return Err(invalid!(
            "scene {}: images have {} bands, manifest declares {}",
            entry.id,
            pre.channels(),
            manifest.band_count
        ));
    }
    let mask = entry
        .mask
        .as_ref()
        .map(|m| read_mask(resolve(m), scheme.num_change_classes()))
        .transpose()?;
    ScenePair::new(entry.id.clone(), pre, post, mask, entry.group.clone(), entry.split)
}

/// Per-band standardization statistics computed over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Bands whose variance was zero; their std was replaced by 1.0.
    pub zero_variance: Vec<bool>,
}

impl NormStats {
    pub fn band_count(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
            zero_variance: vec![false; bands],
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.zero_variance.iter().any(|&f| f)
    }
}

/// Pools both images of every scene; population standard deviation.
pub fn compute_norm_stats<'a, I>(train_scenes: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a ScenePair>,
{
    let mut bands = None;
    let mut count = 0u64;
    let mut sums: Vec<f64> = Vec::new();
    let mut scenes = Vec::new();
    for scene in train_scenes {
        let b = scene.bands();
        match bands {
            None => {
                bands = Some(b);
                sums = vec![0.0; b];
            }
            Some(prev) if prev != b => return Err(invalid!("scene {} has {b} bands, expected {prev}", scene.scene_id)),
            _ => {}
        }
        for img in [&scene.pre, &scene.post] {
            for (band, sum) in sums.iter_mut().enumerate() {
                *sum += img.plane(band).iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }
        count += 2 * scene.pre.pixels() as u64;
        scenes.push(scene);
    }
    let Some(bands) = bands else {
        return Err(invalid!("cannot compute normalization stats from zero scenes"));
    };
    let n = count as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();

    // Second pass for a numerically stable variance.
    let mut sq = vec![0.0f64; bands];
    for scene in &scenes {
        for img in [&scene.pre, &scene.post] {
            for (band, acc) in sq.iter_mut().enumerate() {
                let m = mean[band];
                *acc += img.plane(band).iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>();
            }
        }
    }

    let mut std = Vec::with_capacity(bands);
    let mut zero_variance = Vec::with_capacity(bands);
    for (band, acc) in sq.iter().enumerate() {
        let s = (acc / n).sqrt() as f32;
        if s > 0.0 && s.is_finite() {
            std.push(s);
            zero_variance.push(false);
        } else {
            warn!("band {band} has zero variance over the training split; using std 1.0");
            std.push(1.0);
            zero_variance.push(true);
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std,
        zero_variance,
    })
}

/// Standardizes one raster band-wise.
pub fn normalize_raster(r: &Raster, stats: &NormStats) -> Result<Raster> {
    if r.channels() != stats.band_count() {
        return Err(shape_err!(
            "raster has {} bands, stats have {}",
            r.channels(),
            stats.band_count()
        ));
    }
    r.map_bands(|b, v| (v - stats.mean[b]) / stats.std[b])
}

/// Maps `x -> (x - mean_b) / std_b` on both images; the mask is untouched.
///
/// Not idempotent: applying it twice standardizes twice.
pub fn normalize_scene(s: &ScenePair, stats: &NormStats) -> Result<ScenePair> {
    let pre = normalize_raster(&s.pre, stats).map_err(|e| invalid!("scene {}: {e}", s.scene_id))?;
    let post = normalize_raster(&s.post, stats).map_err(|e| invalid!("scene {}: {e}", s.scene_id))?;
    Ok(ScenePair { pre, post, ..s.clone() })
}

/// Validity mask for confidence and metrics: `true` where the label is not `IGNORE`.
pub fn valid_pixels(mask: Option<&ChangeMask>) -> Option<Vec<bool>> {
    mask.map(|m| m.labels().iter().map(|&l| l != IGNORE).collect())
}
