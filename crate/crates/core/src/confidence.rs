//! Logit-based scene confidence and the supervised/unsupervised routing rule.
//!
//! Per pixel the largest pre-softmax logit is taken; a scene's indicator `beta`
//! is the mean of those maxima over its (valid) pixels. Across a set of test
//! scenes the indicators are min-max normalized to `beta_norm` in `[0, 1]`,
//! and a scene is trusted to the supervised model when `beta_norm >= tau`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::LogitMap;

pub const DEFAULT_TAU: f64 = 0.5;

/// Largest of the `K + 1` logits of one pixel.
pub fn pixel_zopt(logits: &[f32]) -> Result<f32> {
    if logits.len() < 2 {
        return Err(invalid!("need at least two logits, got {}", logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("logits must be finite"));
    }
    Ok(logits.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfidence {
    pub scene_id: String,
    pub beta: f64,
    pub beta_norm: Option<f64>,
}

/// Mean per-pixel max logit. `valid`, when given, selects the pixels that count.
pub fn scene_confidence(scene_id: impl Into<String>, lm: &LogitMap, valid: Option<&[bool]>) -> Result<SceneConfidence> {
    let scene_id = scene_id.into();
    let n = lm.height() * lm.width();
    if let Some(v) = valid {
        if v.len() != n {
            return Err(invalid!(
                "scene {scene_id}: validity mask has {} entries for {n} pixels",
                v.len()
            ));
        }
    }
    let mut buf = vec![0.0f32; lm.num_classes()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..n {
        if valid.is_some_and(|v| !v[p]) {
            continue;
        }
        lm.pixel_into(p, &mut buf);
        total += f64::from(pixel_zopt(&buf)?);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("scene {scene_id} has no valid pixels")));
    }
    Ok(SceneConfidence {
        scene_id,
        beta: total / count as f64,
        beta_norm: None,
    })
}

/// Min-max normalizes raw indicators. When all are equal (including a single
/// scene) every value maps to 1.0 and `degenerate` is set.
pub fn normalize_betas(betas: &[f64]) -> Result<(Vec<f64>, bool)> {
    if betas.is_empty() {
        return Err(invalid!("cannot normalize an empty set of confidences"));
    }
    if betas.iter().any(|b| !b.is_finite()) {
        return Err(invalid!("confidence values must be finite"));
    }
    let lo = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok((vec![1.0; betas.len()], true));
    }
    let span = hi - lo;
    let norm = betas.iter().map(|&b| ((b - lo) / span).clamp(0.0, 1.0)).collect();
    Ok((norm, false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConfidences {
    pub scenes: Vec<SceneConfidence>,
    pub degenerate: bool,
}

pub fn normalize_confidences(mut scenes: Vec<SceneConfidence>) -> Result<NormalizedConfidences> {
    let betas: Vec<f64> = scenes.iter().map(|s| s.beta).collect();
    let (norm, degenerate) = normalize_betas(&betas)?;
    for (s, b) in scenes.iter_mut().zip(norm) {
        s.beta_norm = Some(b);
    }
    Ok(NormalizedConfidences { scenes, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Supervised,
    Unsupervised,
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Route::Supervised => "supervised",
            Route::Unsupervised => "unsupervised",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scene_id: String,
    pub route: Route,
    pub beta_norm: f64,
    pub tau: f64,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(invalid!("tau must lie in [0, 1], got {tau}"))
    }
}

/// Supervised iff `beta_norm >= tau`.
pub fn decide_route(sc: &SceneConfidence, tau: f64) -> Result<RoutingDecision> {
    check_tau(tau)?;
    let beta_norm = sc
        .beta_norm
        .ok_or_else(|| invalid!("scene {} has no normalized confidence", sc.scene_id))?;
    let route = if beta_norm >= tau {
        Route::Supervised
    } else {
        Route::Unsupervised
    };
    Ok(RoutingDecision {
        scene_id: sc.scene_id.clone(),
        route,
        beta_norm,
        tau,
    })
}

/// One entry of the confidence report JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub scene_id: String,
    pub beta: f64,
    pub beta_norm: f64,
    pub route: Route,
    pub tau: f64,
    pub degenerate: bool,
}

/// Normalizes, routes, and flattens into report entries (input order kept).
pub fn route_scenes(scenes: Vec<SceneConfidence>, tau: f64) -> Result<Vec<ConfidenceEntry>> {
    check_tau(tau)?;
    let norm = normalize_confidences(scenes)?;
    norm.scenes
        .iter()
        .map(|s| {
            let d = decide_route(s, tau)?;
            Ok(ConfidenceEntry {
                scene_id: s.scene_id.clone(),
                beta: s.beta,
                beta_norm: d.beta_norm,
                route: d.route,
                tau,
                degenerate: norm.degenerate,
            })
        })
        .collect()
}
