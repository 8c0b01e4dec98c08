use std::io::Write;

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::AdamW;
use crate::datagen::rng::{derive_seed, rng_for};
use crate::datagen::{augment_text, Corpus, Scene, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::Model;
use crate::tensor::{GradBuffer, Var};

/// One optimizer step of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub scene_id: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Batch means of every loss term.
    pub losses: LossReport,
}

pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<LogEntry>,
}

/// Groups referral indices by scene, in scene order, splitting scenes with
/// more than `cap` referrals into several batches.
pub fn scene_batches(corpus: &Corpus, cap: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (scene, refs) in corpus.by_scene() {
        for chunk in refs.chunks(cap.max(1)) {
            out.push((scene, chunk.to_vec()));
        }
    }
    out
}

pub fn train(config: &RunConfig, corpus: &Corpus) -> Result<TrainOutput> {
    train_with(config, corpus, |_| {})
}

/// Trains a fresh model, calling `on_step` after every optimizer step.
pub fn train_with<F>(config: &RunConfig, corpus: &Corpus, mut on_step: F) -> Result<TrainOutput>
where
    F: FnMut(&LogEntry),
{
    config.validate()?;
    if corpus.referrals.is_empty() {
        return Err(Error::Invalid("training corpus has no referrals".into()));
    }
    let vocab = Vocabulary::new();
    corpus.validate(&vocab)?;
    let schedule = config.radius_schedule()?;
    let objective = config.objective();
    let augment = config.augment();
    let mut model = Model::new(config.architecture(), derive_seed(config.seed, "model", 0))?;
    let mut opt = AdamW::new(
        &model.params,
        config.lr,
        (config.beta1, config.beta2),
        config.eps,
        config.weight_decay,
    );
    let mut batches = scene_batches(corpus, config.batch_cap);
    let mut grads = GradBuffer::zeros_like(&model.params);
    let mut log = Vec::new();
    let n_refs = corpus.referrals.len() as u64;
    let total_steps = config.epochs * batches.len();

    for epoch in 0..config.epochs {
        batches.shuffle(&mut rng_for(config.seed, "shuffle", epoch as u64));
        for (scene_id, refs) in &batches {
            let scene = augment_scene(config, &corpus.scenes[*scene_id], log.len());
            let scene = &scene;
            grads.zero();
            let reports = {
                let mut g = model.graph();
                let instances = model.encode_scene(&mut g, scene)?;
                let mut total: Option<Var> = None;
                let mut reports = Vec::with_capacity(refs.len());
                for &ri in refs {
                    let seed = derive_seed(config.seed, "augment", epoch as u64 * n_refs + ri as u64);
                    let referral = augment_text(&corpus.referrals[ri], &vocab, augment, seed);
                    let (loss, report) =
                        model.referral_loss(&mut g, scene, &instances, &referral, &schedule, &objective)?;
                    reports.push(report);
                    total = Some(match total {
                        Some(t) => g.add(t, loss)?,
                        None => loss,
                    });
                }
                let total = total.expect("batches are non-empty");
                let total = g.scale(total, 1.0 / refs.len() as f64);
                let value = g.value(total).item();
                if !value.is_finite() {
                    return Err(non_finite(log.len(), *scene_id, refs, &reports, "loss"));
                }
                g.backward(total)?;
                g.accumulate_into(&mut grads);
                reports
            };
            if !grads.is_finite() {
                return Err(non_finite(log.len(), *scene_id, refs, &reports, "gradient"));
            }
            opt.lr = config.lr_at(log.len(), total_steps);
            opt.step(&mut model.params, &grads);
            let entry = LogEntry {
                step: log.len(),
                epoch,
                scene_id: *scene_id,
                batch_size: refs.len(),
                lr: opt.lr,
                losses: LossReport::mean(&reports),
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(TrainOutput { model, log })
}

/// The training view of a scene at optimizer step `step`: randomly rotated
/// about the vertical axis and shifted horizontally, as configured. Every
/// label depends only on relative geometry, so targets are unchanged.
fn augment_scene<'a>(config: &RunConfig, scene: &'a Scene, step: usize) -> Cow<'a, Scene> {
    if !config.rotate_scenes && config.translate_max == 0.0 {
        return Cow::Borrowed(scene);
    }
    let mut rng = rng_for(config.seed, "scene-augment", step as u64);
    let mut out = Cow::Borrowed(scene);
    if config.rotate_scenes {
        out = Cow::Owned(out.rotated(rng.gen_range(0.0..std::f64::consts::TAU)));
    }
    if config.translate_max > 0.0 {
        let m = config.translate_max;
        out = Cow::Owned(out.translated([rng.gen_range(-m..=m), rng.gen_range(-m..=m), 0.0]));
    }
    out
}

fn non_finite(step: usize, scene_id: usize, refs: &[usize], reports: &[LossReport], what: &str) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "scene_id": scene_id,
        "referrals": refs,
        "losses": reports,
        "non_finite": what,
    });
    Error::NonFiniteLoss {
        step,
        detail: dump.to_string(),
    }
}

pub fn write_log<W: Write>(mut w: W, log: &[LogEntry]) -> Result<()> {
    for e in log {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}
