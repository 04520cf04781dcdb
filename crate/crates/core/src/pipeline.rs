//! End-to-end flows: inference, confidence routing, evaluation, and the two
//! synthetic experiments (training-set diversity, confidence vs. accuracy).

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{check_tau, route_scenes, scene_confidence, ConfidenceEntry, Route};
use crate::dataset::{normalize_scene, valid_pixels, NormStats, ScenePair, Split};
use crate::error::{invalid, Error, Result};
use crate::metrics::{confusion, kappa, ConfusionMatrix, MetricsRow};
use crate::model::{FcnConfig, FcnModel, LogitMap};
use crate::raster::ChangeMask;
use crate::synth::{generate_pool, StylePool, StyleSpec, SYNTH_BANDS};
use crate::train::{train_on, TrainConfig};
use crate::unsup::unsupervised_change_map;

/// Supervised prediction for one raw scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub scene_id: String,
    pub logits: LogitMap,
    pub map: ChangeMask,
}

pub fn infer_scene(model: &FcnModel, scene: &ScenePair, stats: &NormStats) -> Result<Inference> {
    let n = normalize_scene(scene, stats)?;
    let logits = model.forward_logits(&n.pre, &n.post)?;
    let map = logits.argmax()?;
    Ok(Inference {
        scene_id: scene.scene_id.clone(),
        logits,
        map,
    })
}

pub fn infer_scenes(model: &FcnModel, scenes: &[&ScenePair], stats: &NormStats) -> Result<Vec<Inference>> {
    scenes.iter().map(|s| infer_scene(model, s, stats)).collect()
}

/// Beta per scene from precomputed logits; ignore-labelled pixels are skipped when a mask exists.
pub fn confidence_entries(scenes: &[&ScenePair], inferences: &[Inference], tau: f64) -> Result<Vec<ConfidenceEntry>> {
    if scenes.is_empty() {
        return Err(invalid!("confidence needs at least one test scene"));
    }
    let raw = scenes
        .iter()
        .zip(inferences)
        .map(|(s, inf)| {
            let valid = valid_pixels(s.mask.as_ref());
            scene_confidence(s.scene_id.clone(), &inf.logits, valid.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    route_scenes(raw, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub route: Route,
    /// The map shipped for this scene (from the route taken).
    pub map: ChangeMask,
    pub supervised: Inference,
    /// Present whenever the scene was routed to the fallback.
    pub unsupervised: Option<ChangeMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub entries: Vec<ConfidenceEntry>,
    pub outcomes: Vec<SceneOutcome>,
}

impl PipelineRun {
    /// Metric rows for scenes with reference masks, in input order.
    pub fn metrics(&self, scenes: &[&ScenePair]) -> Result<Vec<MetricsRow>> {
        scenes
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(s, o)| {
                s.mask
                    .as_ref()
                    .map(|m| Ok(MetricsRow::from_confusion(&o.scene_id, confusion(&o.map, m)?)))
            })
            .collect()
    }
}

/// Routes each scene by its normalized confidence. With `assume_diverse` the
/// confidence check is skipped and every scene takes the supervised map.
pub fn run_pipeline(
    model: &FcnModel,
    scenes: &[&ScenePair],
    stats: &NormStats,
    tau: f64,
    assume_diverse: bool,
) -> Result<PipelineRun> {
    check_tau(tau)?;
    let inferences = infer_scenes(model, scenes, stats)?;
    let mut entries = confidence_entries(scenes, &inferences, tau)?;
    if assume_diverse {
        for e in &mut entries {
            e.route = Route::Supervised;
        }
    }
    let mut outcomes = Vec::with_capacity(scenes.len());
    for ((s, inf), e) in scenes.iter().zip(inferences).zip(&entries) {
        let (map, unsupervised) = match e.route {
            Route::Supervised => (inf.map.clone(), None),
            Route::Unsupervised => {
                let m = unsupervised_change_map(&s.pre, &s.post, stats)?;
                (m.clone(), Some(m))
            }
        };
        outcomes.push(SceneOutcome {
            scene_id: s.scene_id.clone(),
            route: e.route,
            map,
            supervised: inf,
            unsupervised,
        });
    }
    Ok(PipelineRun { entries, outcomes })
}

fn kappa_value(cm: &ConfusionMatrix) -> f64 {
    kappa(cm).map_or(0.0, |k| k.value)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation: Pearson correlation of the average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid!("spearman needs two equal-length samples of size >= 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Two-sided exact sign-test p-value for `wins` successes out of `trials`.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let k = wins.min(trials - wins);
    let mut tail = 0.0;
    let mut c = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            c = c * (trials - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(trials as i32)).min(1.0)
}

fn synth_model(base_channels: usize, depth: usize, seed: u64) -> FcnConfig {
    FcnConfig {
        base_channels,
        depth,
        seed,
        ..FcnConfig::new(SYNTH_BANDS, 2)
    }
}

/// Desk-scale training protocol used by both experiments.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 30,
        patch_size: 32,
        batch_size: 8,
        patches_per_scene_per_epoch: 32,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub seed: u64,
    pub reps: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_size: usize,
    pub model: FcnConfig,
    pub train: TrainConfig,
    pub spec: StyleSpec,
}

impl DiversityConfig {
    pub fn desk(seed: u64, reps: usize) -> Self {
        Self {
            seed,
            reps,
            train_scenes: 3,
            test_scenes: 6,
            scene_size: 64,
            model: synth_model(8, 2, seed & 0xff_ffff),
            train: desk_train_config(seed),
            spec: StyleSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRep {
    pub rep: usize,
    pub localized_center: f32,
    pub kappa_localized: f64,
    pub kappa_diverse: f64,
    pub protocol_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub config: DiversityConfig,
    pub reps: Vec<DiversityRep>,
    pub mean_kappa_localized: f64,
    pub mean_kappa_diverse: f64,
    pub diverse_wins: usize,
    pub sign_test_p: f64,
}

impl DiversityReport {
    /// `rep,kappa_localized,kappa_diverse` rows plus a `mean` row.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("rep,kappa_localized,kappa_diverse\n");
        for r in &self.reps {
            out.push_str(&format!("{},{:.4},{:.4}\n", r.rep, r.kappa_localized, r.kappa_diverse));
        }
        out.push_str(&format!(
            "mean,{:.4},{:.4}\n",
            self.mean_kappa_localized, self.mean_kappa_diverse
        ));
        out
    }
}

/// Trains one model on a localized and one on a diverse pool per repetition and
/// compares their pooled kappa on a shared diverse held-out set.
pub fn diversity_experiment(cfg: &DiversityConfig) -> Result<DiversityReport> {
    if cfg.reps < 3 {
        return Err(invalid!("the diversity experiment needs at least 3 repetitions"));
    }
    let size = (cfg.scene_size, cfg.scene_size);
    let mut reps = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.reps {
        let rep_seed = cfg.seed.wrapping_mul(1000).wrapping_add(rep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
        let center = rng.gen_range(StylePool::LOCALIZED_WIDTH / 2.0..=1.0 - StylePool::LOCALIZED_WIDTH / 2.0);
        let localized = StylePool::Localized {
            center,
            width: StylePool::LOCALIZED_WIDTH,
        };
        let data_seed = rng.gen::<u64>();
        let test_seed = rng.gen::<u64>();
        let test = generate_pool(
            "test",
            Split::Test,
            cfg.test_scenes,
            StylePool::Diverse,
            size,
            &cfg.spec,
            test_seed,
        )?;
        let test_refs: Vec<&ScenePair> = test.iter().collect();

        let arm = |pool: StylePool| -> Result<(f64, String)> {
            let train = generate_pool(
                "train",
                Split::Train,
                cfg.train_scenes,
                pool,
                size,
                &cfg.spec,
                data_seed,
            )?;
            let refs: Vec<&ScenePair> = train.iter().collect();
            let (report, model) = train_on(&refs, cfg.model, cfg.train)?;
            let preds = infer_scenes(&model, &test_refs, &report.norm_stats)?;
            let pooled: ConfusionMatrix = test_refs
                .iter()
                .zip(&preds)
                .map(|(s, p)| confusion(&p.map, s.require_mask()?))
                .sum::<Result<ConfusionMatrix>>()?;
            Ok((kappa_value(&pooled), report.protocol_hash))
        };
        let (kl, hl) = arm(localized)?;
        let (kd, hd) = arm(StylePool::Diverse)?;
        if hl != hd {
            return Err(invalid!("arms of repetition {rep} used different protocols"));
        }
        info!("diversity rep {rep}: localized {kl:.4} (center {center:.2}), diverse {kd:.4}");
        reps.push(DiversityRep {
            rep,
            localized_center: center,
            kappa_localized: kl,
            kappa_diverse: kd,
            protocol_hash: hl,
        });
    }
    let n = reps.len() as f64;
    let mean_kappa_localized = reps.iter().map(|r| r.kappa_localized).sum::<f64>() / n;
    let mean_kappa_diverse = reps.iter().map(|r| r.kappa_diverse).sum::<f64>() / n;
    let diverse_wins = reps.iter().filter(|r| r.kappa_diverse > r.kappa_localized).count();
    let decided = reps.iter().filter(|r| r.kappa_diverse != r.kappa_localized).count();
    Ok(DiversityReport {
        config: *cfg,
        mean_kappa_localized,
        mean_kappa_diverse,
        diverse_wins,
        sign_test_p: sign_test_p(diverse_wins, decided),
        reps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub train_pool: StylePool,
    pub test_scenes: usize,
    pub test_pool: StylePool,
    pub scene_size: usize,
    pub tau: f64,
    pub model: FcnConfig,
    pub train: TrainConfig,
    pub spec: StyleSpec,
}

impl BenchmarkConfig {
    /// Trained on a narrow style window near 0, tested on styles graded from 0 to 1.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            train_scenes: 3,
            train_pool: StylePool::Localized {
                center: StylePool::LOCALIZED_WIDTH / 2.0,
                width: StylePool::LOCALIZED_WIDTH,
            },
            test_scenes: 10,
            test_pool: StylePool::Graded { from: 0.0, to: 1.0 },
            scene_size: 64,
            tau: crate::confidence::DEFAULT_TAU,
            model: synth_model(8, 2, seed & 0xff_ffff),
            train: desk_train_config(seed),
            spec: StyleSpec::default(),
        }
    }

    pub fn scenes(&self) -> Result<(Vec<ScenePair>, Vec<ScenePair>)> {
        let size = (self.scene_size, self.scene_size);
        let train = generate_pool(
            "train",
            Split::Train,
            self.train_scenes,
            self.train_pool,
            size,
            &self.spec,
            self.seed,
        )?;
        let test = generate_pool(
            "test",
            Split::Test,
            self.test_scenes,
            self.test_pool,
            size,
            &self.spec,
            self.seed ^ 0x7465_7374,
        )?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScene {
    pub scene_id: String,
    pub group: String,
    pub beta: f64,
    pub beta_norm: f64,
    pub route: Route,
    pub kappa_supervised: f64,
    pub kappa_unsupervised: f64,
    pub kappa_pipeline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenes: Vec<BenchmarkScene>,
    pub spearman_beta_kappa: f64,
    pub pooled_kappa_supervised: f64,
    pub pooled_kappa_pipeline: f64,
    pub pooled_kappa_unsupervised: f64,
}

impl BenchmarkReport {
    pub fn lowest_confidence(&self) -> Option<&BenchmarkScene> {
        self.scenes.iter().min_by(|a, b| a.beta_norm.total_cmp(&b.beta_norm))
    }
}

/// Trains once, then scores every graded test scene three ways.
pub fn confidence_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let (train, test) = cfg.scenes()?;
    let train_refs: Vec<&ScenePair> = train.iter().collect();
    let (report, model) = train_on(&train_refs, cfg.model, cfg.train)?;
    let test_refs: Vec<&ScenePair> = test.iter().collect();
    let run = run_pipeline(&model, &test_refs, &report.norm_stats, cfg.tau, false)?;

    let mut scenes = Vec::with_capacity(test.len());
    let (mut sup, mut pipe, mut uns) = (
        ConfusionMatrix::default(),
        ConfusionMatrix::default(),
        ConfusionMatrix::default(),
    );
    for ((s, o), e) in test_refs.iter().zip(&run.outcomes).zip(&run.entries) {
        let reference = s.require_mask()?;
        let unsup_map = match &o.unsupervised {
            Some(m) => m.clone(),
            None => unsupervised_change_map(&s.pre, &s.post, &report.norm_stats)?,
        };
        let cs = confusion(&o.supervised.map, reference)?;
        let cu = confusion(&unsup_map, reference)?;
        let cp = confusion(&o.map, reference)?;
        sup = sup + cs;
        uns = uns + cu;
        pipe = pipe + cp;
        scenes.push(BenchmarkScene {
            scene_id: s.scene_id.clone(),
            group: s.group.clone(),
            beta: e.beta,
            beta_norm: e.beta_norm,
            route: e.route,
            kappa_supervised: kappa_value(&cs),
            kappa_unsupervised: kappa_value(&cu),
            kappa_pipeline: kappa_value(&cp),
        });
    }
    let betas: Vec<f64> = scenes.iter().map(|s| s.beta_norm).collect();
    let kappas: Vec<f64> = scenes.iter().map(|s| s.kappa_supervised).collect();
    Ok(BenchmarkReport {
        spearman_beta_kappa: spearman(&betas, &kappas)?,
        pooled_kappa_supervised: kappa_value(&sup),
        pooled_kappa_pipeline: kappa_value(&pipe),
        pooled_kappa_unsupervised: kappa_value(&uns),
        scenes,
    })
}
