//! Training, evaluation, ablations, multi-view ensembling and end-to-end
//! gradient verification.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod mve;
pub mod optim;
pub mod train;

use rand::Rng as _;

pub use ablate::{ablate, ablate_with, AblationMode, AblationRow, AblationTable};
pub use config::{LanguageLoss, LrSchedule, Profile, RunConfig};
pub use eval::{collect_offsets, evaluate, report_from_predictions, EvalReport, SplitCounts};
pub use mve::{mve, vote};
pub use optim::AdamW;
pub use train::{scene_batches, train, train_with, write_log, LogEntry, TrainOutput};

use crate::datagen::rng::{derive_seed, rng_for};
use crate::datagen::vocab::{CLASSES, COLORS, PAD};
use crate::datagen::{generate_corpus, Corpus, Difficulty, Referral, Scene, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckReport, GRAD_TOLERANCE};
use crate::losses::LossWeights;
use crate::model::{Model, Objective};
use crate::tensor::BackwardFault;

pub const GRADCHECK_MAX_D: usize = 16;

/// The synthetic train and eval corpora described by `config`, drawn from
/// independent streams of `config.seed`.
pub fn benchmark(config: &RunConfig) -> Result<(Corpus, Corpus)> {
    let vocab = Vocabulary::new();
    let gen = config.gen_config();
    let train = generate_corpus(&gen, &vocab, derive_seed(config.seed, "train-corpus", 0), config.train_referrals)?;
    let eval = generate_corpus(&gen, &vocab, derive_seed(config.seed, "eval-corpus", 0), config.eval_referrals)?;
    Ok((train, eval))
}

/// A configuration small enough for exhaustive finite differences.
pub fn gradcheck_config() -> RunConfig {
    RunConfig {
        d: 8,
        heads: 2,
        ffn_mult: 1,
        ..RunConfig::desk()
    }
}

/// Three instances around the origin (pairwise distances straddling the
/// default radii) and a five-token utterance ending in padding.
pub fn toy_example(seed: u64) -> (Scene, Referral) {
    let mut rng = rng_for(seed, "gradcheck-toy", 0);
    let vocab = Vocabulary::new();
    let anchors = [[0.0, 0.0, 0.4], [0.8, 0.3, 0.5], [2.2, -1.4, 0.6]];
    let instances: Vec<(usize, usize, Vec<[f64; 6]>)> = anchors
        .iter()
        .map(|a| {
            let pts = (0..3)
                .map(|_| {
                    let mut p = [0.0; 6];
                    for (i, v) in p.iter_mut().enumerate() {
                        *v = if i < 3 { a[i] + rng.gen_range(-0.2..0.2) } else { rng.gen_range(0.0..1.0) };
                    }
                    p
                })
                .collect();
            (rng.gen_range(0..CLASSES.len()), rng.gen_range(0..COLORS.len()), pts)
        })
        .collect();
    let scene = Scene::from_instances(0, &instances, &[]).expect("non-empty instances");
    let mut tokens: Vec<u32> = (0..4).map(|_| rng.gen_range(2..vocab.len() as u32)).collect();
    tokens.push(PAD);
    let mut span: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.5)).collect();
    span[1] = true;
    span[4] = false;
    let target = rng.gen_range(0..3);
    let referral = Referral {
        scene_id: 0,
        tokens,
        span,
        target,
        difficulty: Difficulty::Easy,
        view_dependent: false,
        n_distractors: scene.distractors(target),
    };
    (scene, referral)
}

/// Finite-difference check of the total loss (every loss term switched on,
/// so every parameter is reachable) for a fresh model drawn from `seed`.
pub fn gradcheck(config: &RunConfig, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    config.validate()?;
    if config.d > GRADCHECK_MAX_D {
        return Err(Error::Config(format!(
            "gradcheck needs d <= {GRADCHECK_MAX_D}, got {}",
            config.d
        )));
    }
    let model = Model::new(config.architecture(), seed)?;
    let (scene, referral) = toy_example(seed);
    let schedule = config.radius_schedule()?;
    let objective = Objective {
        weights: LossWeights {
            selection: 1.0,
            offset: 1.0,
            span: 1.0,
            cls: 1.0,
        },
        reduction: config.offset_reduction,
    };
    check_gradients(&model.params, fault, GRAD_TOLERANCE, |g| {
        let inst = model.encode_scene(g, &scene)?;
        let (loss, _) = model.referral_loss(g, &scene, &inst, &referral, &schedule, &objective)?;
        Ok(loss)
    })
}
