use std::f64::consts::TAU;

use super::eval::{report_from_predictions, selection_logits, EvalReport};
use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::fusion::{predict, RadiusSchedule};
use crate::model::Model;

/// Majority vote over per-view predictions. Ties go to the candidate with
/// the largest selection logit summed over views, then to the lowest index.
pub fn vote(predictions: &[usize], logits: &[Vec<f64>]) -> usize {
    let k = logits.first().map_or(0, Vec::len).max(predictions.iter().max().map_or(0, |m| m + 1));
    let mut votes = vec![0usize; k];
    for &p in predictions {
        votes[p] += 1;
    }
    let best = votes.iter().copied().max().unwrap_or(0);
    let summed = |i: usize| logits.iter().map(|l| l.get(i).copied().unwrap_or(0.0)).sum::<f64>();
    let mut winner: Option<(usize, f64)> = None;
    for (i, &v) in votes.iter().enumerate() {
        if v != best {
            continue;
        }
        let s = summed(i);
        if winner.map_or(true, |(_, ws)| s > ws) {
            winner = Some((i, s));
        }
    }
    winner.map_or(0, |(i, _)| i)
}

/// Evaluates with `views` copies of every scene rotated about the vertical
/// axis by `2 pi k / views`, combining the views by [`vote`].
pub fn mve(model: &Model, schedule: &RadiusSchedule, corpus: &Corpus, views: usize) -> Result<EvalReport> {
    if views == 0 {
        return Err(Error::Config("multi-view ensembling needs at least one view".into()));
    }
    let per_view: Vec<Vec<Vec<f64>>> = (0..views)
        .map(|k| selection_logits(model, schedule, corpus, TAU * k as f64 / views as f64))
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = (0..corpus.referrals.len())
        .map(|ri| {
            let logits: Vec<Vec<f64>> = per_view.iter().map(|v| v[ri].clone()).collect();
            let preds: Vec<usize> = logits.iter().map(|l| predict(l)).collect();
            vote(&preds, &logits)
        })
        .collect();
    Ok(report_from_predictions(corpus, &predictions))
}
