//! Mask IoU, average recall and the annotation budget estimate.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::domain::{Category, ConfidenceMap, MaskGrid, PhraseTags, Plurality, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::train::pseudo_label;

/// Annotation seconds per mask.
pub const SECONDS_PER_MASK: f64 = 79.1;

/// Binarization threshold for predictions.
pub const PREDICTION_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0.01, 0.02, …, 0.99.
pub fn recall_thresholds() -> impl Iterator<Item = f64> {
    (1..=99).map(|k| k as f64 / 100.0)
}

/// Intersection over union. Two empty masks agree perfectly.
pub fn iou(pred: &MaskGrid, truth: &MaskGrid) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::spec(format!(
            "iou: prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above `t`.
pub fn recall_at(ious: &[f64], t: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
}

/// Mean recall over the 99 thresholds, as a percentage. `None` when empty.
pub fn average_recall_of(ious: &[f64]) -> Option<f64> {
    if ious.is_empty() {
        return None;
    }
    let sum: f64 = recall_thresholds().map(|t| recall_at(ious, t)).sum();
    Some(100.0 * sum / 99.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Option<f64>,
    pub thing: Option<f64>,
    pub stuff: Option<f64>,
    pub singular: Option<f64>,
    pub plural: Option<f64>,
    pub per_phrase: Vec<(PhraseTags, f64)>,
    pub counts: BTreeMap<&'static str, usize>,
}

pub const CSV_HEADER: &str = "Overall,Thing,Stuff,Single,Plural";

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn from_ious(per_phrase: Vec<(PhraseTags, f64)>) -> Self {
        let pick = |f: &dyn Fn(&PhraseTags) -> bool| -> Vec<f64> {
            per_phrase.iter().filter(|(t, _)| f(t)).map(|(_, v)| *v).collect()
        };
        let all = pick(&|_| true);
        let thing = pick(&|t| t.category == Category::Thing);
        let stuff = pick(&|t| t.category == Category::Stuff);
        let singular = pick(&|t| t.plurality == Plurality::Singular);
        let plural = pick(&|t| t.plurality == Plurality::Plural);
        let counts = BTreeMap::from([
            ("overall", all.len()),
            ("thing", thing.len()),
            ("stuff", stuff.len()),
            ("singular", singular.len()),
            ("plural", plural.len()),
        ]);
        EvalReport {
            overall: average_recall_of(&all),
            thing: average_recall_of(&thing),
            stuff: average_recall_of(&stuff),
            singular: average_recall_of(&singular),
            plural: average_recall_of(&plural),
            per_phrase,
            counts,
        }
    }

    pub fn n_phrases(&self) -> usize {
        self.per_phrase.len()
    }

    pub fn columns(&self) -> [Option<f64>; 5] {
        [self.overall, self.thing, self.stuff, self.singular, self.plural]
    }

    /// Header line plus one row.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self.columns().into_iter().map(fmt_cell).collect();
        format!("{CSV_HEADER}\n{}\n", row.join(","))
    }

    pub fn to_text(&self) -> String {
        let names = ["overall", "thing", "stuff", "singular", "plural"];
        let mut out = String::from("average recall (%)\n");
        for (name, v) in names.iter().zip(self.columns()) {
            out.push_str(&format!(
                "  {name:<9} {:>6}  (n = {})\n",
                fmt_cell(v),
                self.counts[name]
            ));
        }
        out
    }
}

/// AR of thresholded confidences against truth, one entry per sample.
pub fn average_recall(
    preds: &[Vec<ConfidenceMap>],
    truths: &[Vec<MaskGrid>],
    tags: &[Vec<PhraseTags>],
) -> Result<EvalReport> {
    if preds.len() != truths.len() || preds.len() != tags.len() {
        return Err(Error::spec("average_recall: sample counts differ"));
    }
    let mut per_phrase = Vec::new();
    for ((p, t), g) in preds.iter().zip(truths).zip(tags) {
        if p.len() != t.len() || p.len() != g.len() {
            return Err(Error::spec("average_recall: phrase counts differ within a sample"));
        }
        for ((conf, truth), tag) in p.iter().zip(t).zip(g) {
            per_phrase.push((*tag, iou(&pseudo_label(conf, PREDICTION_THRESHOLD), truth)?));
        }
    }
    Ok(EvalReport::from_ious(per_phrase))
}

/// Runs `params` on unaugmented samples and scores the result.
pub fn evaluate_model(params: &ModelParams, samples: &[Sample]) -> Result<EvalReport> {
    let rows: Vec<Result<Vec<(PhraseTags, f64)>>> = samples
        .par_iter()
        .map(|s| {
            let truth = s
                .truth
                .as_ref()
                .ok_or_else(|| Error::spec("evaluation sample has no ground truth"))?;
            let (confs, _) = forward(params, &s.image, &s.phrases)?;
            confs
                .iter()
                .zip(truth)
                .zip(&s.phrases)
                .map(|((c, t), ph)| Ok((ph.tags(), iou(&pseudo_label(c, PREDICTION_THRESHOLD), t)?)))
                .collect()
        })
        .collect();
    let mut per_phrase = Vec::new();
    for r in rows {
        per_phrase.extend(r?);
    }
    Ok(EvalReport::from_ious(per_phrase))
}

/// Annotation days for `ratio` of `n_masks`, rounded half-up to 0.1 day.
pub fn budget_days(n_masks: u64, ratio: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
    }
    let days = n_masks as f64 * ratio * SECONDS_PER_MASK / 86_400.0;
    Ok((days * 10.0 + 0.5).floor() / 10.0)
}
