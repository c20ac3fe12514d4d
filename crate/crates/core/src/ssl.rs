//! Client-side semi-supervised training.
//!
//! The broadcast global head acts as a frozen teacher for the duration of
//! a client round: its per-pixel argmax predictions become training
//! targets wherever its confidence clears the threshold, and the student
//! (a copy of the same head) trains on those pseudo-labels, optionally
//! anchored to the broadcast weights by a proximal term.

use crate::error::{Error, Result};
use crate::moe::TaskHead;
use crate::tensor::{argmax_channel, Graph, Optimizer, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Client-side training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSLConfig {
    /// Minimum teacher max-probability for a pixel to become a target.
    pub confidence_threshold: f64,
    /// Weight of the unsupervised loss.
    pub unsup_weight: f64,
    /// FedProx proximal coefficient; 0 disables the term.
    pub prox_mu: f64,
    pub local_epochs: u32,
}

impl Default for SSLConfig {
    fn default() -> Self {
        SSLConfig { confidence_threshold: 0.9, unsup_weight: 4.0, prox_mu: 0.0, local_epochs: 1 }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "ssl.confidence_threshold must be in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.unsup_weight < 0.0 || self.prox_mu < 0.0 {
            return Err(Error::Config("ssl weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Confidence-thresholded per-pixel pseudo-labels from a frozen teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    /// Teacher argmax class per pixel.
    pub targets: Vec<u8>,
    /// True where the teacher's max probability reached the threshold.
    pub mask: Vec<bool>,
    /// Fraction of masked-in pixels; exactly `mean(mask)`.
    pub coverage: f64,
}

/// Run the teacher over one feature map and keep its confident pixels.
///
/// The threshold is compared as `max_prob >= threshold`, so 0 keeps every
/// pixel and anything above 1 keeps none; the [0, 1] range is enforced on
/// [`SSLConfig`], not here, so threshold sweeps can probe the endpoints.
pub fn generate_pseudo_labels(
    teacher: &TaskHead,
    features: &Tensor,
    threshold: f64,
    domain_id: Option<u32>,
) -> Result<PseudoLabelBatch> {
    if threshold.is_nan() {
        return Err(Error::invalid("generate_pseudo_labels", "threshold must not be NaN"));
    }
    let mut g = Graph::new();
    let x = g.constant(features);
    let bound = teacher.bind(&mut g, false)?;
    let logits = bound.forward(&mut g, x, 1, domain_id)?;
    let probs = g.softmax_channel(logits);
    let probs = g.value(probs);
    let targets_usize = argmax_channel(&probs);
    let pixels = targets_usize.len();
    let classes = probs.shape()[0];
    let mut targets = Vec::with_capacity(pixels);
    let mut mask = Vec::with_capacity(pixels);
    let mut masked = 0usize;
    for (p, &t) in targets_usize.iter().enumerate() {
        let _ = classes;
        let max_prob = probs.data()[t * pixels + p];
        let keep = max_prob >= threshold;
        masked += usize::from(keep);
        targets.push(t as u8);
        mask.push(keep);
    }
    Ok(PseudoLabelBatch { targets, mask, coverage: masked as f64 / pixels as f64 })
}

/// `unsup_weight * mean cross-entropy` of the student over masked-in
/// pixels; exactly zero when nothing is masked in.
pub fn unsupervised_loss(
    g: &mut Graph,
    student_logits: Var,
    batch: &PseudoLabelBatch,
    unsup_weight: f64,
) -> Result<Var> {
    let probs = g.softmax_channel(student_logits);
    let ce = g.cross_entropy_masked(probs, &batch.targets, &batch.mask)?;
    Ok(g.scale(ce, unsup_weight))
}

/// What a client round did, for the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientTrainReport {
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_coverage: f64,
    pub warning: Option<String>,
}

/// One client's local round: pseudo-label every sample with the frozen
/// broadcast head, train a copy on the masked cross-entropy (plus the
/// proximal pull when `prox_mu > 0`), and return the updated copy. The
/// broadcast head itself is never modified.
pub fn client_local_train(
    global_head: &TaskHead,
    features: &[Tensor],
    domain_id: u32,
    cfg: &SSLConfig,
    opt: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<(TaskHead, ClientTrainReport)> {
    if features.is_empty() {
        return Ok((
            global_head.clone(),
            ClientTrainReport {
                steps: 0,
                mean_loss: 0.0,
                mean_coverage: 0.0,
                warning: Some("client dataset is empty; returning the broadcast head".into()),
            },
        ));
    }
    let mut student = global_head.clone();
    let mut step: u64 = 0;
    let mut loss_sum = 0.0;
    let mut coverage_sum = 0.0;
    let mut coverage_batches = 0u64;
    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(rng);
        for idx in order {
            let feats = &features[idx];
            let batch =
                generate_pseudo_labels(global_head, feats, cfg.confidence_threshold, Some(domain_id))?;
            coverage_sum += batch.coverage;
            coverage_batches += 1;

            let mut g = Graph::new();
            let x = g.constant(feats);
            let bound = student.bind(&mut g, true)?;
            let logits = bound.forward(&mut g, x, step, Some(domain_id))?;
            let mut loss = unsupervised_loss(&mut g, logits, &batch, cfg.unsup_weight)?;
            if cfg.prox_mu > 0.0 {
                let prox = bound.proximal_term(&mut g, global_head)?;
                let scaled = g.scale(prox, cfg.prox_mu);
                loss = g.add(loss, scaled)?;
            }
            loss_sum += g.data(loss)[0];
            g.backward(loss)?;
            student.apply_grads(&g.param_grads())?;
            opt.step(&mut student.parameters_mut())?;
            student.zero_grad();
            step += 1;
        }
    }
    let report = ClientTrainReport {
        steps: step,
        mean_loss: if step > 0 { loss_sum / step as f64 } else { 0.0 },
        mean_coverage: if coverage_batches > 0 {
            coverage_sum / coverage_batches as f64
        } else {
            0.0
        },
        warning: None,
    };
    Ok((student, report))
}
