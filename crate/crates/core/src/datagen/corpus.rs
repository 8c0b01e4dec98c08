use std::collections::HashSet;

use rayon::prelude::*;

use super::referral::{generate_referral, Referral, TemplateKind};
use super::rng::{derive_seed, rng_for};
use super::scene::{generate_scene, GenConfig, Scene};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const TEMPLATE_ATTEMPTS: u64 = 8;

/// Scenes plus referrals; `referrals[i].scene_id` indexes `scenes`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub referrals: Vec<Referral>,
}

impl Corpus {
    /// Referral indices grouped by scene, in scene order.
    pub fn by_scene(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.scenes.len()];
        for (i, r) in self.referrals.iter().enumerate() {
            groups[r.scene_id].push(i);
        }
        groups
            .into_iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .collect()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (i, s) in self.scenes.iter().enumerate() {
            if s.id != i {
                return Err(Error::Invalid(format!("scene {i} carries id {}", s.id)));
            }
        }
        for r in &self.referrals {
            let scene = self
                .scenes
                .get(r.scene_id)
                .ok_or_else(|| Error::Invalid(format!("missing scene {}", r.scene_id)))?;
            vocab.check(&r.tokens)?;
            if r.target >= scene.num_instances() {
                return Err(Error::TargetOutOfRange {
                    target: r.target,
                    count: scene.num_instances(),
                });
            }
            if r.span.len() != r.tokens.len() || !r.span.iter().any(|&b| b) {
                return Err(Error::Invalid("span must be non-empty and token aligned".into()));
            }
        }
        Ok(())
    }
}

fn pick_template(mix: &[f64; 3], rng: &mut impl rand::Rng) -> TemplateKind {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (kind, w) in TemplateKind::ALL.iter().zip(mix) {
        if u < *w {
            return *kind;
        }
        u -= w;
    }
    TemplateKind::Attribute
}

fn scene_with_referrals(
    config: &GenConfig,
    vocab: &Vocabulary,
    seed: u64,
    index: usize,
) -> Result<(Scene, Vec<Referral>)> {
    let mut scene = generate_scene(config, derive_seed(seed, "corpus-scene", index as u64))?;
    scene.id = index;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for j in 0..config.referrals_per_scene as u64 {
        let item = ((index as u64) << 20) | j;
        let mut rng = rng_for(seed, "corpus-template", item);
        for attempt in 0..TEMPLATE_ATTEMPTS {
            let kind = pick_template(&config.template_mix, &mut rng);
            let rseed = derive_seed(seed, "corpus-referral", (item << 4) | attempt);
            match generate_referral(&scene, vocab, kind, config, rseed) {
                Ok(r) => {
                    if seen.insert(r.tokens.clone()) {
                        out.push(r);
                    }
                    break;
                }
                Err(Error::Ambiguous(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((scene, out))
}

/// Generates `count` referrals over as many scenes as needed. The result is
/// a pure function of `(config, seed, count)`; scenes are built in parallel.
pub fn generate_corpus(
    config: &GenConfig,
    vocab: &Vocabulary,
    seed: u64,
    count: usize,
) -> Result<Corpus> {
    config.validate()?;
    let per_scene = config.referrals_per_scene.max(1);
    let mut corpus = Corpus::default();
    let mut next = 0usize;
    while corpus.referrals.len() < count {
        let window = (count - corpus.referrals.len()).div_ceil(per_scene).max(1);
        let built: Vec<(Scene, Vec<Referral>)> = (next..next + window)
            .into_par_iter()
            .map(|i| scene_with_referrals(config, vocab, seed, i))
            .collect::<Result<_>>()?;
        next += window;
        for (mut scene, refs) in built {
            if corpus.referrals.len() >= count {
                break;
            }
            if refs.is_empty() {
                continue;
            }
            let id = corpus.scenes.len();
            scene.id = id;
            for mut r in refs.into_iter().take(count - corpus.referrals.len()) {
                r.scene_id = id;
                corpus.referrals.push(r);
            }
            corpus.scenes.push(scene);
        }
        if next > count * 10 + 100 {
            return Err(Error::Infeasible(
                "generator keeps producing scenes without valid referrals".into(),
            ));
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::referral::{resolve, split_labels};

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = GenConfig::default();
        let vocab = Vocabulary::new();
        let a = generate_corpus(&cfg, &vocab, 17, 300).unwrap();
        let b = generate_corpus(&cfg, &vocab, 17, 300).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.referrals.len(), 300);
        a.validate(&vocab).unwrap();
        for r in &a.referrals {
            let scene = &a.scenes[r.scene_id];
            assert_eq!(resolve(scene, &vocab, &r.tokens).unwrap(), r.target);
            assert_eq!(split_labels(r, scene, &vocab), (r.difficulty, r.view_dependent));
            assert_eq!(r.n_distractors, scene.distractors(r.target));
        }
    }

    #[test]
    fn corpus_mixes_templates_and_difficulties() {
        let vocab = Vocabulary::new();
        let c = generate_corpus(&GenConfig::default(), &vocab, 5, 600).unwrap();
        let vdep = c.referrals.iter().filter(|r| r.view_dependent).count();
        let hard = c
            .referrals
            .iter()
            .filter(|r| r.difficulty == crate::datagen::Difficulty::Hard)
            .count();
        assert!(vdep > 60, "{vdep}");
        assert!(hard > 150 && hard < 450, "{hard}");
    }
}
