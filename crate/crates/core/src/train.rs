//! Patch-based training of the FCN with class weighting and dihedral augmentation.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{compute_norm_stats, normalize_scene, Dataset, NormStats, ScenePair, Split};
use crate::error::{invalid, Error, Result};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::model::{record_forward, FcnConfig, FcnModel};
use crate::raster::{ChangeMask, Raster, IGNORE};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor4, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    D4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub patches_per_scene_per_epoch: usize,
    pub class_weighting: ClassWeighting,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            patch_size: 64,
            batch_size: 8,
            patches_per_scene_per_epoch: 32,
            class_weighting: ClassWeighting::InverseFrequency,
            augment: Augment::D4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &FcnConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_scene_per_epoch == 0 {
            return Err(invalid!("epochs, batch size and patches per scene must be positive"));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(model.size_multiple()) {
            return Err(invalid!(
                "patch size {} must be a positive multiple of {}",
                self.patch_size,
                model.size_multiple()
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

/// SHA-256 over the canonical JSON of both configs; equal hashes mean equal protocols.
pub fn protocol_hash(model: &FcnConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train, train.adam())).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub model_path: Option<String>,
    pub model_config: FcnConfig,
    pub train_config: TrainConfig,
    pub adam: AdamConfig,
    pub protocol_hash: String,
    pub class_weights: Vec<f32>,
    pub norm_stats: NormStats,
    pub train_scenes: Vec<String>,
    pub seed: u64,
    /// The only field that differs between identical reruns.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f32>,
    /// Classes with no labelled pixel; their weight is 0.
    pub missing: Vec<bool>,
}

/// `w_k = N_valid / ((K+1) * N_k)`; a balanced dataset yields all ones.
pub fn compute_class_weights<'a, I>(scenes: I, num_classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a ScenePair>,
{
    let mut counts = vec![0u64; num_classes];
    for s in scenes {
        let mask = s.require_mask()?;
        for &l in mask.labels() {
            if l == IGNORE {
                continue;
            }
            let l = usize::from(l);
            if l >= num_classes {
                return Err(invalid!("scene {}: label {l} out of range", s.scene_id));
            }
            counts[l] += 1;
        }
    }
    let valid: u64 = counts.iter().sum();
    if valid == 0 {
        return Err(Error::Degenerate("no labelled pixels in the training split".into()));
    }
    let mut weights = Vec::with_capacity(num_classes);
    let mut missing = Vec::with_capacity(num_classes);
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            warn!("class {k} has no training pixels; its weight is 0");
            weights.push(0.0);
            missing.push(true);
        } else {
            weights.push((valid as f64 / (num_classes as f64 * c as f64)) as f32);
            missing.push(false);
        }
    }
    Ok(ClassWeights { weights, missing })
}

/// Co-located crops of a scene pair and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pre: Raster,
    pub post: Raster,
    pub mask: ChangeMask,
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// `size x size` crop at `(y0, x0)`; rows/cols past the scene edge are mirrored
/// in the images and labelled IGNORE in the mask.
fn crop(scene: &ScenePair, mask: &ChangeMask, y0: usize, x0: usize, size: usize) -> Result<Patch> {
    let (h, w) = (scene.height(), scene.width());
    let grab = |img: &Raster| -> Result<Raster> {
        let mut data = Vec::with_capacity(img.channels() * size * size);
        for c in 0..img.channels() {
            let plane = img.plane(c);
            for y in y0..y0 + size {
                let row = &plane[reflect(y, h) * w..][..w];
                if y0 + size <= h && x0 + size <= w {
                    data.extend_from_slice(&row[x0..x0 + size]);
                } else {
                    data.extend((x0..x0 + size).map(|x| row[reflect(x, w)]));
                }
            }
        }
        Raster::new(size, size, img.channels(), data)
    };
    let mut labels = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            labels.push(if y < h && x < w { mask.get(y, x) } else { IGNORE });
        }
    }
    Ok(Patch {
        pre: grab(&scene.pre)?,
        post: grab(&scene.post)?,
        mask: ChangeMask::with_classes(size, size, labels, usize::from(u8::MAX - 1))?,
    })
}

/// Draws `n` patches with uniformly random top-left corners (row first, then column).
pub fn sample_patches(scene: &ScenePair, n: usize, patch_size: usize, rng: &mut impl Rng) -> Result<Vec<Patch>> {
    let mask = scene.require_mask()?;
    let (h, w) = (scene.height(), scene.width());
    (0..n)
        .map(|_| {
            let y0 = if h > patch_size {
                rng.gen_range(0..=h - patch_size)
            } else {
                0
            };
            let x0 = if w > patch_size {
                rng.gen_range(0..=w - patch_size)
            } else {
                0
            };
            crop(scene, mask, y0, x0, patch_size)
        })
        .collect()
}

/// An element of the dihedral group of the square: `rotations` quarter turns
/// (counter-clockwise) applied after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct D4 {
    pub rotations: u8,
    pub flip: bool,
}

impl D4 {
    pub const IDENTITY: D4 = D4 {
        rotations: 0,
        flip: false,
    };

    pub fn all() -> [D4; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = D4 {
                rotations: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    /// Source coordinate that lands on `(y, x)` of an `s x s` output.
    pub fn source(self, y: usize, x: usize, s: usize) -> (usize, usize) {
        // invert the rotations first, then the flip
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.rotations % 4 {
            // output of a ccw turn at (y, x) came from (x, s-1-y)
            (sy, sx) = (sx, s - 1 - sy);
        }
        if self.flip {
            sx = s - 1 - sx;
        }
        (sy, sx)
    }
}

fn transform_plane<T: Copy>(src: &[T], s: usize, e: D4) -> Vec<T> {
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = e.source(y, x, s);
            out.push(src[sy * s + sx]);
        }
    }
    out
}

pub fn apply_d4(p: &Patch, e: D4) -> Result<Patch> {
    let s = p.mask.height();
    if p.mask.width() != s || p.pre.height() != s || p.pre.width() != s {
        return Err(invalid!(
            "augmentation needs square patches, got {}x{}",
            p.pre.height(),
            p.pre.width()
        ));
    }
    let img = |r: &Raster| -> Result<Raster> {
        let data = (0..r.channels())
            .flat_map(|c| transform_plane(r.plane(c), s, e))
            .collect();
        Raster::new(s, s, r.channels(), data)
    };
    Ok(Patch {
        pre: img(&p.pre)?,
        post: img(&p.post)?,
        mask: ChangeMask::with_classes(s, s, transform_plane(p.mask.labels(), s, e), usize::from(u8::MAX - 1))?,
    })
}

/// Applies one uniformly drawn dihedral transform to all three rasters.
pub fn augment_d4(p: &Patch, rng: &mut impl Rng) -> Result<Patch> {
    let e = D4::all()[rng.gen_range(0..8)];
    apply_d4(p, e)
}

/// Stacks patches into a `[n, 2B, s, s]` input and flat targets.
fn batch_tensors(patches: &[&Patch]) -> (Tensor4<f32>, Vec<u8>) {
    let s = patches[0].mask.height();
    let b = patches[0].pre.channels();
    let mut data = Vec::with_capacity(patches.len() * 2 * b * s * s);
    let mut targets = Vec::with_capacity(patches.len() * s * s);
    for p in patches {
        data.extend_from_slice(p.pre.data());
        data.extend_from_slice(p.post.data());
        targets.extend_from_slice(p.mask.labels());
    }
    let t = Tensor4::new([patches.len(), 2 * b, s, s], data).expect("patch shapes agree");
    (t, targets)
}

/// One forward/backward pass; returns the loss and per-parameter gradients.
pub(crate) fn loss_and_grads(
    model: &FcnModel,
    input: Tensor4<f32>,
    targets: &[u8],
    class_weights: &[f32],
) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p.tensor.clone())).collect();
    let x = tape.input(input);
    let out = record_forward(model.config(), &mut tape, &vars, x)?;
    let loss = tape.softmax_ce_loss(out.logits, targets, class_weights)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.tensor.len()], <[f32]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Trains on the dataset's train split.
pub fn train(ds: &Dataset, model_cfg: FcnConfig, cfg: TrainConfig) -> Result<(TrainReport, FcnModel)> {
    let scenes: Vec<&ScenePair> = ds.split(Split::Train).collect();
    train_on(&scenes, model_cfg, cfg)
}

/// Trains on raw (unnormalized) labelled scenes.
pub fn train_on(scenes: &[&ScenePair], model_cfg: FcnConfig, cfg: TrainConfig) -> Result<(TrainReport, FcnModel)> {
    let started = Instant::now();
    model_cfg.validate()?;
    cfg.validate(&model_cfg)?;
    if scenes.is_empty() {
        return Err(invalid!("the training split is empty"));
    }
    for s in scenes {
        if s.mask.is_none() {
            return Err(invalid!("training scene {} has no reference mask", s.scene_id));
        }
        if s.bands() != model_cfg.in_bands {
            return Err(invalid!(
                "training scene {} has {} bands, model expects {}",
                s.scene_id,
                s.bands(),
                model_cfg.in_bands
            ));
        }
    }

    let stats = compute_norm_stats(scenes.iter().copied())?;
    let normalized = scenes
        .iter()
        .map(|s| normalize_scene(s, &stats))
        .collect::<Result<Vec<_>>>()?;
    let class_weights = match cfg.class_weighting {
        ClassWeighting::InverseFrequency => compute_class_weights(&normalized, model_cfg.num_classes)?.weights,
        ClassWeighting::None => vec![1.0; model_cfg.num_classes],
    };

    let mut model = FcnModel::init(model_cfg)?;
    let mut adam = Adam::<f32>::new(cfg.adam(), model.params().iter().map(|p| p.tensor.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut patches = Vec::with_capacity(normalized.len() * cfg.patches_per_scene_per_epoch);
        for scene in &normalized {
            for p in sample_patches(scene, cfg.patches_per_scene_per_epoch, cfg.patch_size, &mut rng)? {
                patches.push(match cfg.augment {
                    Augment::D4 => augment_d4(&p, &mut rng)?,
                    Augment::None => p,
                });
            }
        }
        patches.shuffle(&mut rng);

        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in patches.chunks(cfg.batch_size) {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let (input, targets) = batch_tensors(&refs);
            if targets.iter().all(|&t| t == IGNORE) {
                continue;
            }
            let (loss, grads) = loss_and_grads(&model, input, &targets, &class_weights)?;
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            adam.step(&mut params, &grad_refs)?;
            total += f64::from(loss);
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
        info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }

    let wall_clock_seconds = started.elapsed().as_secs_f64();
    info!("trained {} steps in {wall_clock_seconds:.1}s", adam.steps());
    let report = TrainReport {
        epoch_losses,
        steps: adam.steps() as usize,
        model_path: None,
        model_config: model_cfg,
        train_config: cfg,
        adam: cfg.adam(),
        protocol_hash: protocol_hash(&model_cfg, &cfg),
        class_weights,
        norm_stats: stats,
        train_scenes: scenes.iter().map(|s| s.scene_id.clone()).collect(),
        seed: cfg.seed,
        wall_clock_seconds,
    };
    Ok((report, model))
}

/// Per-scene and pooled confusion over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvaluation {
    pub per_scene: Vec<(String, ConfusionMatrix)>,
    /// Element-wise sum of the per-scene matrices.
    pub pooled: ConfusionMatrix,
}

/// Predicts every scene of `split` (after normalization with `stats`) and tallies it.
pub fn evaluate_split(model: &FcnModel, ds: &Dataset, split: Split, stats: &NormStats) -> Result<SplitEvaluation> {
    let scenes: Vec<&ScenePair> = ds.split(split).collect();
    evaluate_scenes(model, &scenes, stats)
}

pub fn evaluate_scenes(model: &FcnModel, scenes: &[&ScenePair], stats: &NormStats) -> Result<SplitEvaluation> {
    let mut per_scene = Vec::with_capacity(scenes.len());
    for s in scenes {
        let reference = s.require_mask()?;
        let n = normalize_scene(s, stats)?;
        let pred = model.predict_map(&n.pre, &n.post)?;
        per_scene.push((s.scene_id.clone(), confusion(&pred, reference)?));
    }
    let pooled = per_scene.iter().map(|(_, c)| *c).sum();
    Ok(SplitEvaluation { per_scene, pooled })
}
