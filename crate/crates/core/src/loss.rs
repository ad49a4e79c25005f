//! Training objective: classification plus cross-modal alignment and
//! routing-consistency regularizers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    #[default]
    MulticlassCe,
    MultilabelBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub classification_mode: ClassificationMode,
    /// Use `KL(p‖q) + KL(q‖p)` for the consistency term.
    pub symmetric_kl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            classification_mode: ClassificationMode::MulticlassCe,
            symmetric_kl: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Dense target matrix for a batch, validating every label against `C`.
pub fn label_targets(labels: &[&Label], num_classes: usize, mode: ClassificationMode) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, l) in labels.iter().enumerate() {
        match (l, mode) {
            (Label::Class(c), ClassificationMode::MulticlassCe) => {
                if *c >= num_classes {
                    return Err(Error::invalid(format!("label {c} out of range for {num_classes} classes")));
                }
                t.set(i, *c, 1.0);
            }
            (Label::Multi(bits), ClassificationMode::MultilabelBce) => {
                if bits.len() != num_classes || bits.iter().any(|&b| b > 1) {
                    return Err(Error::invalid(format!(
                        "multilabel target must be {num_classes} binary entries"
                    )));
                }
                for (j, &b) in bits.iter().enumerate() {
                    t.set(i, j, b as f64);
                }
            }
            _ => return Err(Error::invalid("label kind does not match the classification mode")),
        }
    }
    Ok(t)
}

/// Batch-mean cross-entropy, or batch-and-class-mean BCE with logits.
/// `logits` is `[B, C]`.
pub fn classification_loss<'g>(logits: Var<'g>, labels: &[&Label], mode: ClassificationMode) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::shape(
            "classification_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let targets = label_targets(labels, shape[1], mode)?;
    Ok(match mode {
        ClassificationMode::MulticlassCe => {
            let idx: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => *c,
                    Label::Multi(_) => unreachable!("checked by label_targets"),
                })
                .collect();
            logits.log_softmax_rows().pick_per_row(&idx).mean().neg()
        }
        ClassificationMode::MultilabelBce => logits.bce_with_logits(&targets).mean(),
    })
}

/// Mean of `1 − cos(q_v, q_t)` over the given pairs, which must come from
/// modality-complete samples. Zero when there are none.
pub fn alignment_loss<'g>(g: &'g Graph, pairs: &[(Var<'g>, Var<'g>)]) -> Result<Var<'g>> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var<'g>> = None;
    for (q_v, q_t) in pairs {
        if q_v.value().norm() == 0.0 || q_t.value().norm() == 0.0 {
            return Err(Error::NonFinite("alignment loss of a zero-norm query".into()));
        }
        let term = q_v.cosine(q_t).neg();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term),
        });
    }
    let n = pairs.len() as f64;
    let mean_neg_cos = total.expect("non-empty").scale(1.0 / n);
    Ok(mean_neg_cos.add(&g.constant(Tensor::scalar(1.0))))
}

/// `Σ_c p_c (log p_c − log q_c)` for row-vector logits, summed over rows.
fn kl_rows<'g>(p_logits: Var<'g>, q_logits: Var<'g>) -> Var<'g> {
    let lp = p_logits.log_softmax_rows();
    let lq = q_logits.log_softmax_rows();
    lp.exp().mul(&lp.sub(&lq)).sum()
}

/// Batch-mean `KL(softmax(true) ‖ softmax(proxy))` over complete samples;
/// gradients flow through both passes. Zero when the batch has none.
pub fn consistency_loss<'g>(
    g: &'g Graph,
    true_logits: &[Var<'g>],
    proxy_logits: &[Var<'g>],
    symmetric: bool,
) -> Result<Var<'g>> {
    if true_logits.len() != proxy_logits.len() {
        return Err(Error::shape(
            "consistency_loss",
            format!("{} true vs {} proxy outputs", true_logits.len(), proxy_logits.len()),
        ));
    }
    if true_logits.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let p = Var::concat_rows(true_logits);
    let q = Var::concat_rows(proxy_logits);
    if p.shape() != q.shape() {
        return Err(Error::shape("consistency_loss", format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    if !p.value().is_finite() || !q.value().is_finite() {
        return Err(Error::NonFinite("consistency loss inputs".into()));
    }
    let mut kl = kl_rows(p, q);
    if symmetric {
        kl = kl.add(&kl_rows(q, p));
    }
    Ok(kl.scale(1.0 / true_logits.len() as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossComponents<'g> {
    pub classification: Var<'g>,
    pub alignment: Var<'g>,
    pub consistency: Var<'g>,
}

/// `L_c + λ1·L_align + λ2·L_con`.
pub fn total_loss<'g>(c: &LossComponents<'g>, cfg: &LossConfig) -> Var<'g> {
    c.classification
        .add(&c.alignment.scale(cfg.lambda1))
        .add(&c.consistency.scale(cfg.lambda2))
}
