//! Top-down bidirectional attentive fusion.
//!
//! Each block runs spherically masked instance self-attention, instance-to-word
//! cross-attention, optionally word-to-instance cross-attention, and
//! feed-forward layers on both streams, then regresses a per-instance offset.
//! Block masks are always built from the input centroids.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::rng::Rng;
use crate::encoders::{InstanceTokens, WordTokens};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, Attention, FeedForward, LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var, MASK_NEG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleOrder {
    /// Radii shrink from block to block (global context first).
    TopDown,
    /// Radii grow from block to block.
    BottomUp,
}

/// Per-block spherical radii in meters; `f64::INFINITY` means global attention.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusSchedule {
    radii: Vec<f64>,
    order: ScheduleOrder,
}

impl RadiusSchedule {
    pub fn new(radii: Vec<f64>, order: ScheduleOrder) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::Config("radius schedule needs at least one block".into()));
        }
        if radii.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(Error::Config(format!("radii must be positive: {radii:?}")));
        }
        let ok = radii.windows(2).all(|w| match order {
            ScheduleOrder::TopDown => w[1] <= w[0],
            ScheduleOrder::BottomUp => w[1] >= w[0],
        });
        if !ok {
            return match order {
                ScheduleOrder::TopDown => Err(Error::IncreasingSchedule(radii)),
                ScheduleOrder::BottomUp => Err(Error::Config(format!(
                    "bottom-up schedule must be non-decreasing: {radii:?}"
                ))),
            };
        }
        Ok(RadiusSchedule { radii, order })
    }

    pub fn top_down(radii: Vec<f64>) -> Result<Self> {
        Self::new(radii, ScheduleOrder::TopDown)
    }

    /// The default three-block schedule `[inf, 2.5, 1.0]`.
    pub fn standard() -> Self {
        Self::top_down(vec![f64::INFINITY, 2.5, 1.0]).expect("valid schedule")
    }

    /// Same radii in reverse order, with the order flipped accordingly.
    pub fn reversed(&self) -> Self {
        let order = match self.order {
            ScheduleOrder::TopDown => ScheduleOrder::BottomUp,
            ScheduleOrder::BottomUp => ScheduleOrder::TopDown,
        };
        RadiusSchedule {
            radii: self.radii.iter().rev().copied().collect(),
            order,
        }
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn order(&self) -> ScheduleOrder {
        self.order
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

/// Additive `K x K` mask: 0 where `||c_i - c_j|| < r`, `MASK_NEG` elsewhere.
pub fn spherical_mask(centroids: &[[f64; 3]], r: f64) -> Tensor {
    let k = centroids.len();
    let mut data = vec![0.0; k * k];
    if r.is_finite() {
        for (i, a) in centroids.iter().enumerate() {
            for (j, b) in centroids.iter().enumerate() {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2.sqrt() >= r {
                    data[i * k + j] = MASK_NEG;
                }
            }
        }
    }
    Tensor::matrix(k, k, data)
}

#[derive(Clone, Debug)]
pub struct TbaBlock {
    self_attn: Attention,
    self_norm: LayerNorm,
    inst_cross: Attention,
    inst_cross_norm: LayerNorm,
    word_cross: Attention,
    word_cross_norm: LayerNorm,
    inst_ffn: FeedForward,
    inst_ffn_norm: LayerNorm,
    word_ffn: FeedForward,
    word_ffn_norm: LayerNorm,
    pub offset_head: Linear,
}

pub struct BlockOutput {
    pub instances: Var,
    pub words: Var,
    /// `K x 3` offset predictions of this block.
    pub offsets: Var,
}

impl TbaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let p = |s: &str| format!("{name}.{s}");
        Ok(TbaBlock {
            self_attn: Attention::new(store, &p("self_attn"), dim, heads, rng)?,
            self_norm: LayerNorm::new(store, &p("self_norm"), dim),
            inst_cross: Attention::new(store, &p("inst_cross"), dim, heads, rng)?,
            inst_cross_norm: LayerNorm::new(store, &p("inst_cross_norm"), dim),
            word_cross: Attention::new(store, &p("word_cross"), dim, heads, rng)?,
            word_cross_norm: LayerNorm::new(store, &p("word_cross_norm"), dim),
            inst_ffn: FeedForward::new(store, &p("inst_ffn"), dim, ffn_dim, rng),
            inst_ffn_norm: LayerNorm::new(store, &p("inst_ffn_norm"), dim),
            word_ffn: FeedForward::new(store, &p("word_ffn"), dim, ffn_dim, rng),
            word_ffn_norm: LayerNorm::new(store, &p("word_ffn_norm"), dim),
            offset_head: Linear::new(store, &p("offset_head"), dim, 3, rng),
        })
    }

    /// One fusion block. `mask` restricts instance self-attention (`None`
    /// means unrestricted); `word_mask` hides padded words from instances.
    pub fn forward(
        &self,
        g: &mut Graph,
        instances: Var,
        words: Var,
        mask: Option<&Tensor>,
        word_mask: Option<&Tensor>,
        bidirectional: bool,
    ) -> Result<BlockOutput> {
        let a = self.self_attn.forward(g, instances, instances, mask)?;
        let x = residual_norm(g, instances, a.out, &self.self_norm)?;
        let a = self.inst_cross.forward(g, x, words, word_mask)?;
        let x = residual_norm(g, x, a.out, &self.inst_cross_norm)?;
        let mut w = words;
        if bidirectional {
            let a = self.word_cross.forward(g, w, x, None)?;
            w = residual_norm(g, w, a.out, &self.word_cross_norm)?;
        }
        let f = self.inst_ffn.forward(g, x)?;
        let x = residual_norm(g, x, f, &self.inst_ffn_norm)?;
        let f = self.word_ffn.forward(g, w)?;
        let w = residual_norm(g, w, f, &self.word_ffn_norm)?;
        let offsets = self.offset_head.forward(g, x)?;
        Ok(BlockOutput { instances: x, words: w, offsets })
    }
}

/// The block stack with its selection and span heads.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub blocks: Vec<TbaBlock>,
    pub selection_head: Linear,
    pub span_head: Linear,
    pub bidirectional: bool,
}

pub struct FusionOutput {
    /// `K x 1` selection logits.
    pub selection_logits: Var,
    /// One `K x 3` offset matrix per block.
    pub offsets: Vec<Var>,
    /// `|W| x 1` span logits.
    pub span_logits: Var,
    pub instances: Var,
    pub words: Var,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        blocks: usize,
        heads: usize,
        ffn_dim: usize,
        bidirectional: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|b| TbaBlock::new(store, &format!("tba{b}"), dim, heads, ffn_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Fusion {
            blocks,
            selection_head: Linear::new(store, "selection_head", dim, 1, rng),
            span_head: Linear::new(store, "span_head", dim, 1, rng),
            bidirectional,
        })
    }

    pub fn run_tba(
        &self,
        g: &mut Graph,
        instances: &InstanceTokens,
        words: &WordTokens,
        schedule: &RadiusSchedule,
    ) -> Result<FusionOutput> {
        if schedule.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "{} radii for {} blocks",
                schedule.len(),
                self.blocks.len()
            )));
        }
        self.run(g, instances, words, Some(schedule))
    }

    /// The same stack with every spherical mask removed.
    pub fn run_unmasked(
        &self,
        g: &mut Graph,
        instances: &InstanceTokens,
        words: &WordTokens,
    ) -> Result<FusionOutput> {
        self.run(g, instances, words, None)
    }

    fn run(
        &self,
        g: &mut Graph,
        instances: &InstanceTokens,
        words: &WordTokens,
        schedule: Option<&RadiusSchedule>,
    ) -> Result<FusionOutput> {
        let k = instances.centroids.len();
        let word_mask = words.key_mask(k);
        let (mut x, mut w) = (instances.embeddings, words.embeddings);
        let mut offsets = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let mask = schedule.map(|s| spherical_mask(&instances.centroids, s.radii[b]));
            let out = block.forward(g, x, w, mask.as_ref(), word_mask.as_ref(), self.bidirectional)?;
            x = out.instances;
            w = out.words;
            offsets.push(out.offsets);
        }
        Ok(FusionOutput {
            selection_logits: self.selection_head.forward(g, x)?,
            offsets,
            span_logits: self.span_head.forward(g, w)?,
            instances: x,
            words: w,
        })
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Offset rows for CSV export, keyed by scene and referral.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetRecord {
    pub scene_id: usize,
    pub referral_id: usize,
    pub block: usize,
    pub instance: usize,
    pub offset: [f64; 3],
}

pub fn offset_records(
    g: &Graph,
    out: &FusionOutput,
    scene_id: usize,
    referral_id: usize,
) -> Vec<OffsetRecord> {
    let mut rows = Vec::new();
    for (block, &o) in out.offsets.iter().enumerate() {
        let t = g.value(o);
        for instance in 0..t.rows() {
            let r = t.row(instance);
            rows.push(OffsetRecord {
                scene_id,
                referral_id,
                block,
                instance,
                offset: [r[0], r[1], r[2]],
            });
        }
    }
    rows
}

pub fn write_offsets_csv<W: Write>(mut w: W, records: &[OffsetRecord]) -> Result<()> {
    writeln!(w, "scene_id,referral_id,block,instance,ox,oy,oz")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.scene_id, r.referral_id, r.block, r.instance, r.offset[0], r.offset[1], r.offset[2]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
