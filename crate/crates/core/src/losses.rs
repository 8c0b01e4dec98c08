//! Selection, offset, span and sentence-class objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Reduction over instances for the offset loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub selection: f64,
    pub offset: f64,
    pub span: f64,
    /// Weight of the sentence-level class loss (zero unless it replaces the
    /// span loss).
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            selection: 1.0,
            offset: 1.0,
            span: 1.0,
            cls: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.selection, self.offset, self.span, self.cls];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every loss term of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub selection: f64,
    pub offset_blocks: Vec<f64>,
    pub offset: f64,
    pub span: f64,
    pub cls: f64,
}

impl LossReport {
    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let blocks = reports.first().map_or(0, |r| r.offset_blocks.len());
        let mut out = LossReport {
            offset_blocks: vec![0.0; blocks],
            ..Default::default()
        };
        for r in reports {
            out.total += r.total / n;
            out.selection += r.selection / n;
            out.offset += r.offset / n;
            out.span += r.span / n;
            out.cls += r.cls / n;
            for (o, v) in out.offset_blocks.iter_mut().zip(&r.offset_blocks) {
                *o += v / n;
            }
        }
        out
    }
}

/// Cross-entropy of `softmax(u)` against the target instance.
pub fn selection_loss(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    g.cross_entropy(logits, target)
}

/// `reduce_i ||o_i - (c_i - c_target)||` for one block of `K x 3` offsets.
pub fn offset_loss(
    g: &mut Graph,
    offsets: Var,
    centroids: &[[f64; 3]],
    target: usize,
    reduction: OffsetReduction,
) -> Result<Var> {
    let k = centroids.len();
    if target >= k {
        return Err(Error::TargetOutOfRange { target, count: k });
    }
    if g.value(offsets).shape() != [k, 3] {
        return Err(Error::Shape {
            op: "offset_loss",
            detail: format!("offsets {:?} for {k} centroids", g.value(offsets).shape()),
        });
    }
    let gt = centroids[target];
    let wanted: Vec<f64> = centroids
        .iter()
        .flat_map(|c| [c[0] - gt[0], c[1] - gt[1], c[2] - gt[2]])
        .collect();
    let wanted = g.constant(Tensor::matrix(k, 3, wanted));
    let diff = g.sub(offsets, wanted)?;
    let norms = g.l2_norm_rows(diff);
    Ok(match reduction {
        OffsetReduction::Mean => g.mean(norms),
        OffsetReduction::Sum => g.sum(norms),
    })
}

/// Binary cross-entropy with logits, averaged over non-padded tokens.
pub fn span_loss(g: &mut Graph, logits: Var, labels: &[bool], pad: &[bool]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
    let w: Vec<f64> = pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    g.bce_with_logits(logits, &y, &w)
}

/// Sentence-level class loss: mean of the non-padded word rows, a linear
/// classifier and cross-entropy against the target class.
pub fn cls_loss(
    g: &mut Graph,
    words: Var,
    pad: &[bool],
    classifier: &crate::nn::Linear,
    class: usize,
) -> Result<Var> {
    let keep: Vec<usize> = (0..pad.len()).filter(|&i| !pad[i]).collect();
    if keep.is_empty() {
        return Err(Error::AllPadding);
    }
    let rows = if keep.len() == pad.len() {
        words
    } else {
        g.gather_rows(words, &keep)?
    };
    let pooled = g.mean_pool_rows(rows)?;
    let logits = classifier.forward(g, pooled)?;
    g.cross_entropy(logits, class)
}

/// Loss nodes of one forward pass.
pub struct LossTerms {
    pub selection: Var,
    pub offsets: Vec<Var>,
    pub span: Option<Var>,
    pub cls: Option<Var>,
}

/// `w_sel * sel + w_o * sum_b offset_b + w_sp * span + w_cls * cls`.
/// Terms with zero weight are reported but left out of the returned node.
pub fn combine(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        selection: g.value(terms.selection).item(),
        offset_blocks: terms.offsets.iter().map(|&o| g.value(o).item()).collect(),
        span: terms.span.map_or(0.0, |s| g.value(s).item()),
        cls: terms.cls.map_or(0.0, |c| g.value(c).item()),
        ..Default::default()
    };
    report.offset = report.offset_blocks.iter().sum();

    let mut parts: Vec<(f64, Var)> = vec![(weights.selection, terms.selection)];
    parts.extend(terms.offsets.iter().map(|&o| (weights.offset, o)));
    parts.extend(terms.span.map(|s| (weights.span, s)));
    parts.extend(terms.cls.map(|c| (weights.cls, c)));

    let mut total: Option<Var> = None;
    for (w, v) in parts {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, w) };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    report.total = g.value(total).item();
    Ok((total, report))
}
