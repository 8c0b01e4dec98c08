use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rng::rng_for;
use super::scene::{Difficulty, GenConfig, Scene};
use super::vocab::{Vocabulary, CLASSES, COLORS, MASK};
use crate::error::{Error, Result};

/// Two candidates closer than this (meters) under a predicate are a tie.
pub const TIE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// "the red chair"
    Attribute,
    /// "the chair near the door"
    Relation,
    /// "facing the door the chair on the left"
    ViewDependent,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [
        TemplateKind::Attribute,
        TemplateKind::Relation,
        TemplateKind::ViewDependent,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Referral {
    pub scene_id: usize,
    pub tokens: Vec<u32>,
    pub span: Vec<bool>,
    pub target: usize,
    pub difficulty: Difficulty,
    pub view_dependent: bool,
    pub n_distractors: usize,
}

impl Referral {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Instances of `class` ordered by distance to `anchor`'s centroid.
pub fn nearest_to(scene: &Scene, class: usize, anchor: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = (0..scene.num_instances())
        .filter(|&i| i != anchor && scene.instance_class[i] == class)
        .map(|i| (i, dist(scene.centroids[i], scene.centroids[anchor])))
        .collect();
    c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    c
}

/// Signed lateral offset of every `class` instance for a viewer standing at
/// the candidates' mean position and facing `anchor`. Positive is left.
pub fn lateral_offsets(scene: &Scene, class: usize, anchor: usize) -> Option<Vec<(usize, f64)>> {
    let cands: Vec<usize> = (0..scene.num_instances())
        .filter(|&i| i != anchor && scene.instance_class[i] == class)
        .collect();
    if cands.is_empty() {
        return None;
    }
    let n = cands.len() as f64;
    let mx = cands.iter().map(|&i| scene.centroids[i][0]).sum::<f64>() / n;
    let my = cands.iter().map(|&i| scene.centroids[i][1]).sum::<f64>() / n;
    let a = scene.centroids[anchor];
    let (fx, fy) = (a[0] - mx, a[1] - my);
    let norm = fx.hypot(fy);
    if norm < TIE_TOLERANCE {
        return None;
    }
    let (fx, fy) = (fx / norm, fy / norm);
    Some(
        cands
            .iter()
            .map(|&i| {
                let (ox, oy) = (scene.centroids[i][0] - mx, scene.centroids[i][1] - my);
                (i, fx * oy - fy * ox)
            })
            .collect(),
    )
}

/// Picks the extreme lateral candidate for `side` given precomputed offsets.
pub fn pick_side(offsets: &[(usize, f64)], side: Side) -> Option<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = offsets
        .iter()
        .map(|&(i, l)| (i, if side == Side::Left { l } else { -l }))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let gap = if v.len() > 1 { v[0].1 - v[1].1 } else { f64::INFINITY };
    Some((v.first()?.0, gap))
}

fn unique_anchors(scene: &Scene, class: usize) -> Vec<usize> {
    (0..scene.num_instances())
        .filter(|&i| scene.instance_class[i] != class && scene.distractors(i) == 0)
        .collect()
}

/// Emits a referral for one of the scene's most frequent class.
///
/// The returned referral is double-checked by [`resolve`], which re-derives
/// the target from the tokens and the scene geometry.
pub fn generate_referral(
    scene: &Scene,
    vocab: &Vocabulary,
    kind: TemplateKind,
    config: &GenConfig,
    seed: u64,
) -> Result<Referral> {
    let mut rng = rng_for(seed, "referral", 0);
    let class = scene.primary_class();
    let noun = vocab.class_noun(class);
    let the = vocab.id("the");
    let gap_needed = config.min_gap.max(TIE_TOLERANCE);
    let (tokens, span, target): (Vec<u32>, Vec<bool>, usize) = match kind {
        TemplateKind::Attribute => {
            let members: Vec<usize> = (0..scene.num_instances())
                .filter(|&i| scene.instance_class[i] == class)
                .collect();
            let unique: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| {
                    members
                        .iter()
                        .filter(|&&j| scene.instance_color[j] == scene.instance_color[i])
                        .count()
                        == 1
                })
                .collect();
            let &target = unique
                .choose(&mut rng)
                .ok_or_else(|| Error::Ambiguous("no instance with a unique color".into()))?;
            let color = vocab.color_word(scene.instance_color[target]);
            if members.len() == 1 && rng.gen_bool(0.5) {
                (vec![the, noun], vec![false, true], target)
            } else if rng.gen_bool(0.5) {
                (vec![the, color, noun], vec![false, true, true], target)
            } else {
                let t = vec![the, noun, vocab.id("that"), vocab.id("is"), color];
                (t, vec![false, true, false, false, true], target)
            }
        }
        TemplateKind::Relation => {
            let mut anchors = unique_anchors(scene, class);
            anchors.shuffle(&mut rng);
            let found = anchors.iter().find_map(|&a| {
                let order = nearest_to(scene, class, a);
                let gap = if order.len() > 1 { order[1].1 - order[0].1 } else { f64::INFINITY };
                (gap >= gap_needed).then_some((a, order[0].0))
            });
            let (anchor, target) = found.ok_or_else(|| {
                Error::Ambiguous("no anchor with a clear nearest instance".into())
            })?;
            let a_noun = vocab.class_noun(scene.instance_class[anchor]);
            let mut t = vec![the, noun];
            match rng.gen_range(0..3) {
                0 => t.push(vocab.id("near")),
                1 => t.extend([vocab.id("next"), vocab.id("to")]),
                _ => t.extend([vocab.id("closest"), vocab.id("to")]),
            }
            t.extend([the, a_noun]);
            let mut span = vec![false; t.len()];
            span[1] = true;
            (t, span, target)
        }
        TemplateKind::ViewDependent => {
            let mut anchors = unique_anchors(scene, class);
            anchors.shuffle(&mut rng);
            let mut sides = [Side::Left, Side::Right];
            sides.shuffle(&mut rng);
            let found = anchors.iter().find_map(|&a| {
                let offs = lateral_offsets(scene, class, a)?;
                if offs.len() < 2 {
                    return None;
                }
                sides.iter().find_map(|&side| {
                    let (t, gap) = pick_side(&offs, side)?;
                    (gap >= gap_needed).then_some((a, side, t))
                })
            });
            let (anchor, side, target) = found.ok_or_else(|| {
                Error::Ambiguous("no facing anchor with a clear extreme instance".into())
            })?;
            let a_noun = vocab.class_noun(scene.instance_class[anchor]);
            let side_word = vocab.id(if side == Side::Left { "left" } else { "right" });
            let on = vocab.id("on");
            let facing = vocab.id("facing");
            let (t, noun_pos) = if rng.gen_bool(0.5) {
                (vec![facing, the, a_noun, the, noun, on, the, side_word], 4)
            } else {
                let t = vec![
                    the, noun, on, the, side_word, vocab.id("when"), vocab.id("you"),
                    vocab.id("are"), facing, the, a_noun,
                ];
                (t, 1)
            };
            let mut span = vec![false; t.len()];
            span[noun_pos] = true;
            (t, span, target)
        }
    };
    let n_distractors = scene.distractors(target);
    let referral = Referral {
        scene_id: scene.id,
        tokens,
        span,
        target,
        difficulty: Difficulty::from_distractors(n_distractors),
        view_dependent: kind == TemplateKind::ViewDependent,
        n_distractors,
    };
    let resolved = resolve(scene, vocab, &referral.tokens)?;
    if resolved != target {
        return Err(Error::Ambiguous(format!(
            "predicate resolves to {resolved}, generator chose {target}"
        )));
    }
    Ok(referral)
}

/// Recomputes `(difficulty, view_dependent)` from the scene's class counts
/// and the presence of a facing clause.
pub fn split_labels(referral: &Referral, scene: &Scene, vocab: &Vocabulary) -> (Difficulty, bool) {
    let distractors = scene.distractors(referral.target);
    let view_dependent = referral
        .tokens
        .iter()
        .any(|&t| vocab.synonyms(vocab.id("facing")).contains(&t));
    (Difficulty::from_distractors(distractors), view_dependent)
}

/// Independent predicate evaluator: parses a referral and returns the unique
/// instance satisfying it, or an error if zero or several instances do.
pub fn resolve(scene: &Scene, vocab: &Vocabulary, tokens: &[u32]) -> Result<usize> {
    let words: Vec<&str> = tokens
        .iter()
        .map(|&t| vocab.word(t))
        .collect::<Result<_>>()?;
    let class_of = |w: &str| CLASSES.iter().position(|c| c.nouns.contains(&w));
    let color_of = |w: &str| COLORS.iter().position(|c| c.words.contains(&w));
    let nouns: Vec<(usize, usize)> = words
        .iter()
        .enumerate()
        .filter_map(|(p, w)| class_of(w).map(|c| (p, c)))
        .collect();
    let facing_at = words.iter().position(|w| ["facing", "viewing"].contains(w));
    let side = words.iter().find_map(|w| match *w {
        "left" => Some(Side::Left),
        "right" => Some(Side::Right),
        _ => None,
    });
    let relational = words
        .iter()
        .any(|w| ["near", "beside", "by", "next", "closest"].contains(w));
    let find_unique = |class: usize| -> Result<usize> {
        let hits: Vec<usize> = (0..scene.num_instances())
            .filter(|&i| scene.instance_class[i] == class)
            .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Ambiguous(format!("{} instances of anchor class", hits.len()))),
        }
    };
    if let Some(fpos) = facing_at {
        // the anchor is the noun right after "facing the"; the target is the other noun
        let (anchor_pos, anchor_class) = *nouns
            .iter()
            .find(|(p, _)| *p > fpos)
            .ok_or_else(|| Error::Ambiguous("facing clause without anchor".into()))?;
        let (_, class) = *nouns
            .iter()
            .find(|(p, _)| *p != anchor_pos)
            .ok_or_else(|| Error::Ambiguous("no target noun".into()))?;
        let anchor = find_unique(anchor_class)?;
        let side = side.ok_or_else(|| Error::Ambiguous("no side word".into()))?;
        let offs = lateral_offsets(scene, class, anchor)
            .ok_or_else(|| Error::Ambiguous("degenerate facing direction".into()))?;
        let (t, gap) = pick_side(&offs, side).ok_or_else(|| Error::Ambiguous("empty".into()))?;
        if gap < TIE_TOLERANCE {
            return Err(Error::Ambiguous("lateral tie".into()));
        }
        return Ok(t);
    }
    if relational {
        let [(_, class), (_, anchor_class)] = nouns[..] else {
            return Err(Error::Ambiguous("relation needs two nouns".into()));
        };
        let anchor = find_unique(anchor_class)?;
        let order = nearest_to(scene, class, anchor);
        return match order.as_slice() {
            [] => Err(Error::Ambiguous("no candidate".into())),
            [(i, _)] => Ok(*i),
            [(i, d0), (_, d1), ..] if d1 - d0 >= TIE_TOLERANCE => Ok(*i),
            _ => Err(Error::Ambiguous("distance tie".into())),
        };
    }
    let [(_, class)] = nouns[..] else {
        return Err(Error::Ambiguous("attribute referral needs one noun".into()));
    };
    let color = words.iter().find_map(|w| color_of(w));
    let hits: Vec<usize> = (0..scene.num_instances())
        .filter(|&i| scene.instance_class[i] == class)
        .filter(|&i| color.is_none_or(|c| nearest_color(scene.mean_colors[i]) == c))
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::Ambiguous(format!("{} instances match", hits.len()))),
    }
}

/// Palette entry closest to a measured mean color.
pub fn nearest_color(rgb: [f64; 3]) -> usize {
    let d = |c: &[f64; 3]| (0..3).map(|a| (c[a] - rgb[a]).powi(2)).sum::<f64>();
    (0..COLORS.len())
        .min_by(|&a, &b| d(&COLORS[a].rgb).total_cmp(&d(&COLORS[b].rgb)))
        .unwrap_or(0)
}

/// Text augmentation probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mask_noun_p: f64,
    pub synonym_p: f64,
}

/// With probability `mask_noun_p` replaces every target noun by `[MASK]`;
/// independently replaces each word that has synonyms by a different member
/// of its group with probability `synonym_p`. Span bits stay in place.
pub fn augment_text(
    referral: &Referral,
    vocab: &Vocabulary,
    probs: AugmentConfig,
    seed: u64,
) -> Referral {
    let mut rng = rng_for(seed, "augment", 0);
    let mut out = referral.clone();
    let mask_nouns = rng.gen_bool(probs.mask_noun_p.clamp(0.0, 1.0));
    for (pos, tok) in out.tokens.iter_mut().enumerate() {
        if mask_nouns && referral.span[pos] && vocab.is_class_noun(*tok) {
            *tok = MASK;
            continue;
        }
        let group = vocab.synonyms(*tok);
        if group.len() > 1 && rng.gen_bool(probs.synonym_p.clamp(0.0, 1.0)) {
            let others: Vec<u32> = group.iter().copied().filter(|&g| g != *tok).collect();
            *tok = others[rng.gen_range(0..others.len())];
        }
    }
    out
}
