use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::scene_batches;
use crate::datagen::{Corpus, Difficulty, Scene};
use crate::error::Result;
use crate::fusion::{offset_records, predict, OffsetRecord, RadiusSchedule};
use crate::model::Model;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub easy: usize,
    pub hard: usize,
    pub vdep: usize,
    pub vind: usize,
}

/// Accuracies per split and centroid distances of the predicted instances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub easy: f64,
    pub hard: f64,
    pub vdep: f64,
    pub vind: f64,
    pub counts: SplitCounts,
    pub correct: usize,
    /// Mean distance between predicted and target centroids.
    pub mean_distance: f64,
    /// The same mean restricted to wrong predictions; 0 when there are none.
    pub mean_failure_distance: f64,
    pub failures: usize,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn accuracy(correct: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        correct as f64 / count as f64
    }
}

/// Scores one predicted instance index per referral.
pub fn report_from_predictions(corpus: &Corpus, predictions: &[usize]) -> EvalReport {
    assert_eq!(predictions.len(), corpus.referrals.len(), "one prediction per referral");
    let mut counts = SplitCounts::default();
    let mut hits = SplitCounts::default();
    let (mut dist_sum, mut fail_sum, mut failures) = (0.0, 0.0, 0);
    for (r, &p) in corpus.referrals.iter().zip(predictions) {
        let ok = p == r.target;
        let scene = &corpus.scenes[r.scene_id];
        counts.total += 1;
        hits.total += usize::from(ok);
        match r.difficulty {
            Difficulty::Easy => {
                counts.easy += 1;
                hits.easy += usize::from(ok);
            }
            Difficulty::Hard => {
                counts.hard += 1;
                hits.hard += usize::from(ok);
            }
        }
        if r.view_dependent {
            counts.vdep += 1;
            hits.vdep += usize::from(ok);
        } else {
            counts.vind += 1;
            hits.vind += usize::from(ok);
        }
        let d = distance(scene.centroids[p], scene.centroids[r.target]);
        dist_sum += d;
        if !ok {
            fail_sum += d;
            failures += 1;
        }
    }
    let easy = accuracy(hits.easy, counts.easy);
    let hard = accuracy(hits.hard, counts.hard);
    let overall = if counts.total == 0 {
        0.0
    } else {
        (counts.easy as f64 * easy + counts.hard as f64 * hard) / counts.total as f64
    };
    EvalReport {
        overall,
        easy,
        hard,
        vdep: accuracy(hits.vdep, counts.vdep),
        vind: accuracy(hits.vind, counts.vind),
        correct: hits.total,
        mean_distance: if counts.total == 0 { 0.0 } else { dist_sum / counts.total as f64 },
        mean_failure_distance: if failures == 0 { 0.0 } else { fail_sum / failures as f64 },
        failures,
        counts,
    }
}

/// Selection logits of every referral, with each scene rotated about the
/// vertical axis by `angle` radians (the scene is used as is when the angle
/// is 0).
pub fn selection_logits(
    model: &Model,
    schedule: &RadiusSchedule,
    corpus: &Corpus,
    angle: f64,
) -> Result<Vec<Vec<f64>>> {
    let batches = scene_batches(corpus, usize::MAX);
    let per_scene: Vec<Vec<(usize, Vec<f64>)>> = batches
        .par_iter()
        .map(|(scene_id, refs)| {
            let scene: Cow<Scene> = if angle == 0.0 {
                Cow::Borrowed(&corpus.scenes[*scene_id])
            } else {
                Cow::Owned(corpus.scenes[*scene_id].rotated(angle))
            };
            let mut g = model.graph();
            let instances = model.encode_scene(&mut g, &scene)?;
            refs.iter()
                .map(|&ri| {
                    let (_, out) = model.forward(&mut g, &instances, &corpus.referrals[ri].tokens, schedule)?;
                    Ok((ri, g.value(out.selection_logits).data().to_vec()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut logits = vec![Vec::new(); corpus.referrals.len()];
    for (ri, l) in per_scene.into_iter().flatten() {
        logits[ri] = l;
    }
    Ok(logits)
}

pub fn evaluate(model: &Model, schedule: &RadiusSchedule, corpus: &Corpus) -> Result<EvalReport> {
    let logits = selection_logits(model, schedule, corpus, 0.0)?;
    let predictions: Vec<usize> = logits.iter().map(|l| predict(l)).collect();
    Ok(report_from_predictions(corpus, &predictions))
}

/// Per-block offset predictions for every referral of the corpus.
pub fn collect_offsets(model: &Model, schedule: &RadiusSchedule, corpus: &Corpus) -> Result<Vec<OffsetRecord>> {
    let mut rows = Vec::new();
    for (scene_id, refs) in scene_batches(corpus, usize::MAX) {
        let mut g = model.graph();
        let instances = model.encode_scene(&mut g, &corpus.scenes[scene_id])?;
        for ri in refs {
            let (_, out) = model.forward(&mut g, &instances, &corpus.referrals[ri].tokens, schedule)?;
            rows.extend(offset_records(&g, &out, scene_id, ri));
        }
    }
    Ok(rows)
}
