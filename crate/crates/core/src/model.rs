//! The full grounding network: encoders, fusion stack and heads.

use serde::{Deserialize, Serialize};

use crate::datagen::rng::rng_for;
use crate::datagen::vocab::{CLASSES, PAD};
use crate::datagen::{Referral, Scene};
use crate::encoders::{encode_scene, InstanceTokens, PointEncoder, WordEncoder, WordTokens};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionOutput, RadiusSchedule};
use crate::losses::{
    cls_loss, combine, offset_loss, selection_loss, span_loss, LossReport, LossTerms, LossWeights,
    OffsetReduction,
};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Var};

/// Shape of the network; everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Point feature width; tokens are `d + 6` wide.
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub lang_layers: usize,
    /// Feed-forward hidden width as a multiple of the token width.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub bidirectional: bool,
}

impl Architecture {
    pub fn token_dim(&self) -> usize {
        self.d + 6
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.blocks == 0 || self.ffn_mult == 0 || self.vocab_size < 2 {
            return Err(Error::Config(format!("degenerate architecture: {self:?}")));
        }
        if self.heads == 0 || self.token_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide token width {}",
                self.heads,
                self.token_dim()
            )));
        }
        Ok(())
    }
}

/// What the model is trained against for one referral.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub reduction: OffsetReduction,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
    points: PointEncoder,
    words: WordEncoder,
    fusion: Fusion,
    cls_head: Linear,
}

impl Model {
    /// Fresh parameters drawn from `seed`. The parameter layout depends only
    /// on the architecture.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, "init", 0);
        let mut params = ParamStore::new();
        let dim = arch.token_dim();
        let ffn = dim * arch.ffn_mult;
        let points = PointEncoder::new(&mut params, arch.d, &mut rng);
        let words = WordEncoder::new(
            &mut params,
            arch.vocab_size,
            dim,
            arch.lang_layers,
            arch.heads,
            ffn,
            &mut rng,
        )?;
        let fusion = Fusion::new(
            &mut params,
            dim,
            arch.blocks,
            arch.heads,
            ffn,
            arch.bidirectional,
            &mut rng,
        )?;
        let cls_head = Linear::new(&mut params, "cls_head", dim, arch.num_classes, &mut rng);
        Ok(Model {
            arch,
            params,
            points,
            words,
            fusion,
            cls_head,
        })
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }

    pub fn encode_scene(&self, g: &mut Graph, scene: &Scene) -> Result<InstanceTokens> {
        encode_scene(g, &self.points, scene)
    }

    pub fn encode_words(&self, g: &mut Graph, tokens: &[u32]) -> Result<WordTokens> {
        let pad: Vec<bool> = tokens.iter().map(|&t| t == PAD).collect();
        self.words.encode_words(g, tokens, &pad)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        instances: &InstanceTokens,
        tokens: &[u32],
        schedule: &RadiusSchedule,
    ) -> Result<(WordTokens, FusionOutput)> {
        let words = self.encode_words(g, tokens)?;
        let out = self.fusion.run_tba(g, instances, &words, schedule)?;
        Ok((words, out))
    }

    /// Weighted training loss of one referral on an encoded scene.
    pub fn referral_loss(
        &self,
        g: &mut Graph,
        scene: &Scene,
        instances: &InstanceTokens,
        referral: &Referral,
        schedule: &RadiusSchedule,
        objective: &Objective,
    ) -> Result<(Var, LossReport)> {
        let (words, out) = self.forward(g, instances, &referral.tokens, schedule)?;
        let selection = selection_loss(g, out.selection_logits, referral.target)?;
        let offsets = out
            .offsets
            .iter()
            .map(|&o| offset_loss(g, o, &instances.centroids, referral.target, objective.reduction))
            .collect::<Result<Vec<_>>>()?;
        let span = span_loss(g, out.span_logits, &referral.span, &words.pad)?;
        let cls = if objective.weights.cls > 0.0 {
            let class = scene.instance_class[referral.target];
            Some(cls_loss(g, out.words, &words.pad, &self.cls_head, class)?)
        } else {
            None
        };
        let terms = LossTerms {
            selection,
            offsets,
            span: Some(span),
            cls,
        };
        combine(g, &terms, &objective.weights)
    }
}

/// Default class count of the synthetic grammar.
pub fn default_num_classes() -> usize {
    CLASSES.len()
}
