//! Run configuration.
//!
//! A config file is a flat TOML or JSON table whose keys mirror
//! [`RunConfig`]. The optional `profile` key (`"desk"` or `"paper"`) picks
//! the defaults that the remaining keys override; unknown keys are errors.
//! Radii are numbers or the string `"inf"`.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::vocab::CLASSES;
use crate::datagen::{AugmentConfig, GenConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{RadiusSchedule, ScheduleOrder};
use crate::losses::{LossWeights, OffsetReduction};
use crate::model::{Architecture, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small and fast: d = 32, 50 epochs, 2000 training referrals.
    Desk,
    /// Full-size model: d = 128, 300 epochs.
    Paper,
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    Cosine,
}

/// Which sentence-side auxiliary loss `use_span` turns on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageLoss {
    Span,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    // architecture
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub ffn_mult: usize,
    #[serde(serialize_with = "ser_radii", deserialize_with = "de_radii")]
    pub radii: Vec<f64>,
    pub schedule: ScheduleOrder,

    // objective and ablation switches
    pub use_offset: bool,
    pub use_tba_bidirectional: bool,
    pub use_span: bool,
    pub span_vs_cls: LanguageLoss,
    pub weight_selection: f64,
    pub weight_offset: f64,
    pub weight_span: f64,
    pub offset_reduction: OffsetReduction,

    // optimization
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Optimizer steps of linear warm-up before `lr_schedule` takes over.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_cap: usize,
    pub mask_noun_p: f64,
    pub synonym_p: f64,
    /// Rotate every training scene by a random angle about the vertical axis.
    pub rotate_scenes: bool,
    /// Half-width (m) of a uniform random horizontal shift of training scenes.
    pub translate_max: f64,

    // data
    pub train_referrals: usize,
    pub eval_referrals: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub hard_ratio: f64,
    pub max_distractors: usize,
    pub room_radius: f64,
    pub points_per_instance: usize,
    pub background_points: usize,
    pub point_jitter: f64,
    pub color_jitter: f64,
    pub clearance: f64,
    pub min_gap: f64,
    pub referrals_per_scene: usize,
    pub template_mix: [f64; 3],

    // evaluation
    pub mve_views: usize,
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        let g = GenConfig::default();
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            d: 32,
            blocks: 3,
            heads: 2,
            lang_layers: 2,
            ffn_mult: 4,
            radii: vec![f64::INFINITY, 2.5, 1.0],
            schedule: ScheduleOrder::TopDown,
            use_offset: true,
            use_tba_bidirectional: true,
            use_span: true,
            span_vs_cls: LanguageLoss::Span,
            weight_selection: 1.0,
            weight_offset: 1.0,
            weight_span: 1.0,
            offset_reduction: OffsetReduction::Mean,
            lr: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 50,
            batch_cap: 64,
            mask_noun_p: 0.2,
            synonym_p: 0.3,
            rotate_scenes: true,
            translate_max: 0.0,
            train_referrals: 2000,
            eval_referrals: 500,
            k_min: g.k_min,
            k_max: g.k_max,
            hard_ratio: g.hard_ratio,
            max_distractors: g.max_distractors,
            room_radius: g.room_radius,
            points_per_instance: g.points_per_instance,
            background_points: g.background_points,
            point_jitter: g.point_jitter,
            color_jitter: g.color_jitter,
            clearance: g.clearance,
            min_gap: g.min_gap,
            referrals_per_scene: g.referrals_per_scene,
            template_mix: g.template_mix,
            mve_views: 9,
            ablation_seeds: 3,
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            d: 128,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            epochs: 300,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses a flat TOML or JSON document on top of its profile defaults.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let doc: serde_json::Value = if json {
            serde_json::from_str(text)?
        } else {
            let t: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            serde_json::to_value(t)?
        };
        let serde_json::Value::Object(overrides) = doc else {
            return Err(Error::Config("config must be a table of keys".into()));
        };
        let profile = match overrides.get("profile") {
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let serde_json::Value::Object(mut merged) = serde_json::to_value(Self::for_profile(profile))?
        else {
            unreachable!("RunConfig serializes to an object");
        };
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        let cfg: RunConfig = serde_json::from_value(serde_json::Value::Object(merged))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mask_noun_p", self.mask_noun_p),
            ("synonym_p", self.synonym_p),
            ("hard_ratio", self.hard_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.radii.len() != self.blocks {
            return Err(Error::Config(format!(
                "{} radii for {} blocks",
                self.radii.len(),
                self.blocks
            )));
        }
        self.radius_schedule()?;
        self.architecture().validate()?;
        self.objective().weights.validate()?;
        self.gen_config().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("optimizer moments must lie in [0, 1) with eps > 0".into()));
        }
        if !(self.translate_max >= 0.0 && self.translate_max.is_finite()) {
            return Err(Error::Config(format!("translate_max = {}", self.translate_max)));
        }
        if self.batch_cap == 0 || self.mve_views == 0 {
            return Err(Error::Config("batch_cap and mve_views must be positive".into()));
        }
        Ok(())
    }

    pub fn radius_schedule(&self) -> Result<RadiusSchedule> {
        RadiusSchedule::new(self.radii.clone(), self.schedule)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d: self.d,
            blocks: self.blocks,
            heads: self.heads,
            lang_layers: self.lang_layers,
            ffn_mult: self.ffn_mult,
            vocab_size: Vocabulary::new().len(),
            num_classes: CLASSES.len(),
            bidirectional: self.use_tba_bidirectional,
        }
    }

    /// Loss weights after applying the ablation switches.
    pub fn objective(&self) -> Objective {
        let lang = if self.use_span { self.weight_span } else { 0.0 };
        let (span, cls) = match self.span_vs_cls {
            LanguageLoss::Span => (lang, 0.0),
            LanguageLoss::Cls => (0.0, lang),
        };
        Objective {
            weights: LossWeights {
                selection: self.weight_selection,
                offset: if self.use_offset { self.weight_offset } else { 0.0 },
                span,
                cls,
            },
            reduction: self.offset_reduction,
        }
    }

    /// Learning rate of optimizer step `step` out of `total`.
    ///
    /// The first `warmup_steps` steps ramp linearly up to `lr`; the schedule
    /// then runs over the remaining steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1);
                let t = (step - self.warmup_steps) as f64 / span as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            mask_noun_p: self.mask_noun_p,
            synonym_p: self.synonym_p,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            k_min: self.k_min,
            k_max: self.k_max,
            hard_ratio: self.hard_ratio,
            max_distractors: self.max_distractors,
            room_radius: self.room_radius,
            points_per_instance: self.points_per_instance,
            background_points: self.background_points,
            point_jitter: self.point_jitter,
            color_jitter: self.color_jitter,
            clearance: self.clearance,
            min_gap: self.min_gap,
            referrals_per_scene: self.referrals_per_scene,
            template_mix: self.template_mix,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RadiusRepr {
    Meters(f64),
    Text(String),
}

fn ser_radii<S: Serializer>(radii: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let reprs: Vec<RadiusRepr> = radii
        .iter()
        .map(|&r| {
            if r.is_infinite() {
                RadiusRepr::Text("inf".into())
            } else {
                RadiusRepr::Meters(r)
            }
        })
        .collect();
    reprs.serialize(s)
}

fn de_radii<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let reprs = Vec::<RadiusRepr>::deserialize(d)?;
    reprs
        .into_iter()
        .map(|r| match r {
            RadiusRepr::Meters(v) => Ok(v),
            RadiusRepr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(f64::INFINITY)
            }
            RadiusRepr::Text(t) => Err(serde::de::Error::custom(format!("bad radius {t:?}"))),
        })
        .collect()
}
