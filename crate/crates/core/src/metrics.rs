//! Confusion accounting, sensitivity / specificity / kappa, and false-colour rendering.
//!
//! "Changed" is the positive class throughout: any label `>= 1` counts as change.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::raster::{ChangeMask, Raster, IGNORE, UNCHANGED};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Pixels whose reference label is 255.
    pub ignored: u64,
}

impl ConfusionMatrix {
    /// Pixels that entered the counts (excludes ignored).
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn compared(&self) -> u64 {
        self.total() + self.ignored
    }

    /// Swaps the roles of prediction and reference.
    pub fn transposed(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            ignored: self.ignored + o.ignored,
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Tallies `pred` against `reference`. Reference 255 is ignored; 255 in `pred` is an error.
pub fn confusion(pred: &ChangeMask, reference: &ChangeMask) -> Result<ConfusionMatrix> {
    if pred.height() != reference.height() || pred.width() != reference.width() {
        return Err(shape_err!(
            "prediction is {}x{}, reference is {}x{}",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        if p == IGNORE {
            return Err(invalid!("prediction contains the ignore label"));
        }
        if r == IGNORE {
            cm.ignored += 1;
            continue;
        }
        match (p != UNCHANGED, r != UNCHANGED) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Accuracy over changed reference pixels, in percent; `None` when there are none.
pub fn sensitivity(cm: &ConfusionMatrix) -> Option<f64> {
    let d = cm.tp + cm.fn_;
    (d > 0).then(|| 100.0 * cm.tp as f64 / d as f64)
}

/// Accuracy over unchanged reference pixels, in percent; `None` when there are none.
pub fn specificity(cm: &ConfusionMatrix) -> Option<f64> {
    let d = cm.tn + cm.fp;
    (d > 0).then(|| 100.0 * cm.tn as f64 / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1 (both maps constant and equal); value forced to 0.
    pub degenerate: bool,
}

/// Cohen's kappa, `(po - pe) / (1 - pe)`.
///
/// Evaluated as the binary closed form `2(tp*tn - fp*fn) / ((tp+fp)(fp+tn) + (tp+fn)(fn+tn))`
/// with an integer numerator and denominator, which avoids cancellation when
/// kappa is near zero.
pub fn kappa(cm: &ConfusionMatrix) -> Result<Kappa> {
    if cm.total() == 0 {
        return Err(Error::Degenerate("kappa of an empty confusion matrix".into()));
    }
    let (tp, tn, fp, fn_) = (
        i128::from(cm.tp),
        i128::from(cm.tn),
        i128::from(cm.fp),
        i128::from(cm.fn_),
    );
    let num = 2 * (tp * tn - fp * fn_);
    let den = (tp + fp) * (fp + tn) + (tp + fn_) * (fn_ + tn);
    if den == 0 {
        return Ok(Kappa {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: num as f64 / den as f64,
        degenerate: false,
    })
}

pub const COLOR_TP: [u8; 3] = [255, 255, 255];
pub const COLOR_FP: [u8; 3] = [0, 255, 0];
pub const COLOR_FN: [u8; 3] = [255, 0, 255];
pub const COLOR_TN: [u8; 3] = [0, 0, 0];
pub const COLOR_IGNORED: [u8; 3] = [128, 128, 128];

/// White hits, green false alarms, magenta misses, black true negatives, grey ignored.
pub fn falsecolor(pred: &ChangeMask, reference: &ChangeMask) -> Result<Raster> {
    if pred.height() != reference.height() || pred.width() != reference.width() {
        return Err(shape_err!("false-colour inputs differ in size"));
    }
    let n = pred.labels().len();
    let mut data = vec![0.0f32; 3 * n];
    for (i, (&p, &r)) in pred.labels().iter().zip(reference.labels()).enumerate() {
        if p == IGNORE {
            return Err(invalid!("prediction contains the ignore label"));
        }
        let color = if r == IGNORE {
            COLOR_IGNORED
        } else {
            match (p != UNCHANGED, r != UNCHANGED) {
                (true, true) => COLOR_TP,
                (true, false) => COLOR_FP,
                (false, true) => COLOR_FN,
                (false, false) => COLOR_TN,
            }
        };
        for (c, &v) in color.iter().enumerate() {
            data[c * n + i] = f32::from(v);
        }
    }
    Raster::new(pred.height(), pred.width(), 3, data)
}

/// Per-scene metrics row; percentages and kappa are stored unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene_id: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub kappa: Option<f64>,
    pub kappa_degenerate: bool,
    pub confusion: ConfusionMatrix,
}

impl MetricsRow {
    pub fn from_confusion(scene_id: impl Into<String>, cm: ConfusionMatrix) -> Self {
        let k = kappa(&cm).ok();
        Self {
            scene_id: scene_id.into(),
            sensitivity: sensitivity(&cm),
            specificity: specificity(&cm),
            kappa: k.map(|k| k.value),
            kappa_degenerate: k.is_none_or(|k| k.degenerate),
            confusion: cm,
        }
    }
}

pub const POOLED_ID: &str = "ALL";
pub const CSV_HEADER: &str = "scene_id,sensitivity,specificity,kappa,tp,tn,fp,fn,ignored";

fn two_decimals(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.2}"))
}

/// CSV with one row per scene plus a final `ALL` row built from pooled counts.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let pooled = MetricsRow::from_confusion(POOLED_ID, rows.iter().map(|r| r.confusion).sum());
    for r in rows.iter().chain(std::iter::once(&pooled)) {
        let c = &r.confusion;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.scene_id,
            two_decimals(r.sensitivity),
            two_decimals(r.specificity),
            two_decimals(r.kappa),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            c.ignored
        )
        .expect("writing to a String cannot fail");
    }
    out
}
