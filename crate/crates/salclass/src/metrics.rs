//! Saliency evaluation: Pearson CC, NSS and shuffled AUC, plus the
//! human-baseline computation (ground-truth maps scored against their own
//! fixations).

use crate::data::{Fixation, FixationSet};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::saliency::SaliencyMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

/// Pearson correlation of two same-shaped, non-constant maps.
pub fn pearson_cc(y: &SaliencyMap, t: &SaliencyMap) -> Result<f64> {
    if y.h != t.h || y.w != t.w {
        return Err(Error::Contract(format!(
            "cc: shape mismatch {}x{} vs {}x{}",
            y.h, y.w, t.h, t.w
        )));
    }
    if y.is_constant() || t.is_constant() {
        return Err(Error::Degenerate("cc of a constant map".into()));
    }
    let n = y.values.len() as f64;
    let my = y.values.iter().sum::<f64>() / n;
    let mt = t.values.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in y.values.iter().zip(&t.values) {
        let da = a - my;
        let db = b - mt;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    // sqrt(sxx*syy) keeps cc(Y, Y) == 1 exact for identical maps
    Ok(sxy / (sxx * syy).sqrt())
}

/// Normalized scanpath saliency: z-score the map (population std) and
/// average it at the fixation pixels (nearest-pixel lookup).
pub fn nss(y: &SaliencyMap, fixations: &FixationSet) -> Result<f64> {
    if y.is_constant() {
        return Err(Error::Degenerate("nss of a constant map".into()));
    }
    let n = y.values.len() as f64;
    let mean = y.values.iter().sum::<f64>() / n;
    let var = y.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut acc = 0.0;
    let mut count = 0usize;
    for f in fixations {
        if let Some((py, px)) = nearest_pixel(f, y.h, y.w) {
            acc += (y.at(py, px) - mean) / std;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("nss with no in-bounds fixations".into()));
    }
    Ok(acc / count as f64)
}

fn nearest_pixel(f: &Fixation, h: usize, w: usize) -> Option<(usize, usize)> {
    let px = f.x.round();
    let py = f.y.round();
    if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
        return None;
    }
    Some((py as usize, px as usize))
}

/// Knobs of the shuffled-AUC protocol. The metric literature leaves them
/// open; these defaults are fixed here so runs are comparable.
#[derive(Debug, Clone)]
pub struct SaucConfig {
    pub n_splits: usize,
    pub rng_seed: u64,
}

impl Default for SaucConfig {
    fn default() -> Self {
        SaucConfig {
            n_splits: 100,
            rng_seed: 0,
        }
    }
}

/// Shuffled AUC: positives are this image's fixations, negatives are a
/// caller-supplied pool of other images' fixations. Each of `n_splits`
/// seeded subsamples draws `|positives|` negatives; the AUC of each split
/// comes from an exact threshold sweep (trapezoidal area), and splits are
/// averaged.
pub fn shuffled_auc(
    y: &SaliencyMap,
    positives: &FixationSet,
    negatives: &FixationSet,
    cfg: &SaucConfig,
) -> Result<f64> {
    let pos: Vec<f64> = sample_values(y, positives);
    let neg_pool: Vec<f64> = sample_values(y, negatives);
    if pos.is_empty() || neg_pool.is_empty() {
        return Err(Error::Contract(
            "shuffled_auc needs non-empty positive and negative sets".into(),
        ));
    }
    let mut rng = stream_rng(cfg.rng_seed, "metric-splits");
    let mut acc = 0.0;
    let splits = cfg.n_splits.max(1);
    for _ in 0..splits {
        let neg: Vec<f64> = if neg_pool.len() >= pos.len() {
            let mut pool = neg_pool.clone();
            pool.shuffle(&mut rng);
            pool.truncate(pos.len());
            pool
        } else {
            (0..pos.len())
                .map(|_| neg_pool[rng.gen_range(0..neg_pool.len())])
                .collect()
        };
        acc += sweep_auc(&pos, &neg);
    }
    Ok(acc / splits as f64)
}

fn sample_values(y: &SaliencyMap, fixations: &FixationSet) -> Vec<f64> {
    fixations
        .iter()
        .filter_map(|f| nearest_pixel(f, y.h, y.w).map(|(py, px)| y.at(py, px)))
        .collect()
}

/// ROC area by threshold sweep over the union of observed values,
/// trapezoidal integration. Equals pairwise concordance with ties
/// counted half.
pub fn sweep_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    // points ordered from (0,0) (threshold above max) to (1,1)
    let mut pts = vec![(0.0, 0.0)];
    for &th in thresholds.iter().rev() {
        let tpr = pos.iter().filter(|v| **v >= th).count() as f64 / pos.len() as f64;
        let fpr = neg.iter().filter(|v| **v >= th).count() as f64 / neg.len() as f64;
        pts.push((fpr, tpr));
    }
    pts.push((1.0, 1.0));

    let mut area = 0.0;
    for win in pts.windows(2) {
        let (x0, y0) = win[0];
        let (x1, y1) = win[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Per-image scores; `None` marks a metric skipped as degenerate.
#[derive(Debug, Clone, Serialize)]
pub struct ImageScores {
    pub image_id: String,
    pub s_auc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
}

/// Aggregated evaluation report; means are unweighted over the images
/// where the metric was defined.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
    pub mean_s_auc: Option<f64>,
    pub mean_nss: Option<f64>,
    pub mean_cc: Option<f64>,
    pub skipped_s_auc: usize,
    pub skipped_nss: usize,
    pub skipped_cc: usize,
}

impl MetricReport {
    pub fn from_scores(per_image: Vec<ImageScores>) -> Self {
        fn agg(vals: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut skipped = 0usize;
            for v in vals {
                match v {
                    Some(x) => {
                        sum += x;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
            (if n > 0 { Some(sum / n as f64) } else { None }, skipped)
        }
        let (mean_s_auc, skipped_s_auc) = agg(per_image.iter().map(|s| s.s_auc));
        let (mean_nss, skipped_nss) = agg(per_image.iter().map(|s| s.nss));
        let (mean_cc, skipped_cc) = agg(per_image.iter().map(|s| s.cc));
        MetricReport {
            per_image,
            mean_s_auc,
            mean_nss,
            mean_cc,
            skipped_s_auc,
            skipped_nss,
            skipped_cc,
        }
    }

    /// CSV lines `image_id,s_auc,nss,cc`; skipped metrics render empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,s_auc,nss,cc\n");
        for s in &self.per_image {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.image_id,
                fmt(s.s_auc),
                fmt(s.nss),
                fmt(s.cc)
            ));
        }
        out
    }
}

/// One evaluation item: predicted map, ground truth map, own fixations.
pub struct EvalItem {
    pub image_id: String,
    pub predicted: SaliencyMap,
    pub ground_truth: SaliencyMap,
    pub fixations: FixationSet,
}

/// Scores a set of predictions. Negatives for each image's s-AUC are the
/// pooled fixations of all *other* images, rescaled into this image's map
/// coordinates by the caller (all desk maps share one size, so fixation
/// coordinates transfer directly).
pub fn evaluate(items: &[EvalItem], sauc: &SaucConfig) -> MetricReport {
    let scores = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let neg_pool: FixationSet = items
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, other)| other.fixations.iter().cloned())
                .collect();
            let per_image_cfg = SaucConfig {
                n_splits: sauc.n_splits,
                rng_seed: sauc.rng_seed.wrapping_add(i as u64),
            };
            let s_auc = if neg_pool.is_empty() {
                None
            } else {
                shuffled_auc(&item.predicted, &item.fixations, &neg_pool, &per_image_cfg).ok()
            };
            ImageScores {
                image_id: item.image_id.clone(),
                s_auc,
                nss: nss(&item.predicted, &item.fixations).ok(),
                cc: pearson_cc(&item.predicted, &item.ground_truth).ok(),
            }
        })
        .collect();
    MetricReport::from_scores(scores)
}

/// Table-3-style human baseline: each ground-truth map scored against its
/// own fixations and itself. CC is exactly 1 per image by construction.
pub fn human_baseline(items: &[EvalItem], sauc: &SaucConfig) -> MetricReport {
    let self_items: Vec<EvalItem> = items
        .iter()
        .map(|i| EvalItem {
            image_id: i.image_id.clone(),
            predicted: i.ground_truth.clone(),
            ground_truth: i.ground_truth.clone(),
            fixations: i.fixations.clone(),
        })
        .collect();
    evaluate(&self_items, sauc)
}
