//! Exact bits-per-token objective for the causal model: position l's logits
//! predict token l+1, scored over the L-1 transitions of each row. The first
//! token has no prefix and is not scored.

use crate::model::{forward, Binding, ModelConfig, ModelError, ModelWeights};
use crate::tensor::{Graph, Scalar, TensorId};

pub type Result<T> = std::result::Result<T, ModelError>;

pub const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct ArLossReport {
    pub bpt: f64,
    pub token_count: usize,
    pub nats_total: f64,
}

impl ArLossReport {
    pub fn from_mean_nats(mean_nats: f64, token_count: usize) -> Self {
        ArLossReport {
            bpt: mean_nats / LN_2,
            token_count,
            nats_total: mean_nats * token_count as f64,
        }
    }
}

/// Differentiable teacher-forced loss: mean nats over the `batch * (L-1)`
/// predicted tokens. Returns the loss tensor and the predicted-token count.
pub fn ar_loss<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    bind: &Binding,
    tokens: &[u32],
    batch: usize,
) -> Result<(TensorId, usize)> {
    if !cfg.causal {
        return Err(ModelError::Contract(
            "autoregressive loss requires a causal config".into(),
        ));
    }
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(ModelError::Contract(format!(
            "token count {} not divisible into {batch} rows",
            tokens.len()
        )));
    }
    let len = tokens.len() / batch;
    if len < 2 {
        return Err(ModelError::Contract(
            "rows must hold at least two tokens to score a transition".into(),
        ));
    }

    let logits = forward(g, cfg, bind, tokens, batch, None)?;
    let rows = batch * len;
    let predicted = batch * (len - 1);
    let mut targets = vec![0u32; rows];
    let mut weights = vec![S::zero(); rows];
    let w = S::one() / S::from_f64(predicted as f64);
    for b in 0..batch {
        for l in 0..len - 1 {
            targets[b * len + l] = tokens[b * len + l + 1];
            weights[b * len + l] = w;
        }
    }
    let loss = g.xent_wsum(logits, &targets, &weights)?;
    Ok((loss, predicted))
}

/// Evaluation-only bits-per-token on one batch.
pub fn ar_bpt<S: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
    tokens: &[u32],
    batch: usize,
) -> Result<ArLossReport> {
    let mut g: Graph<S> = Graph::new();
    let bind = Binding::new(&mut g, weights);
    let (loss, count) = ar_loss(&mut g, cfg, &bind, tokens, batch)?;
    Ok(ArLossReport::from_mean_nats(
        g.scalar_value(loss).to_f64(),
        count,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    #[test]
    fn uniform_logits_score_log2_vocab() {
        // zeroing the output head forces exactly uniform logits
        let mut cfg = tiny_config(5, true);
        cfg.vocab_size = 256;
        let mut w: ModelWeights<f64> = ModelWeights::init(&cfg, 0).unwrap();
        for v in w.get_mut("head").unwrap().data.iter_mut() {
            *v = 0.0;
        }
        let report = ar_bpt(&cfg, &w, &[1, 2, 3, 4, 5, 6], 2).unwrap();
        assert!((report.bpt - 8.0).abs() < 1e-12, "bpt {}", report.bpt);
        assert_eq!(report.token_count, 4);
    }

    #[test]
    fn two_transition_row_with_half_and_quarter_probabilities() {
        // hand logits: transition probabilities 0.5 and 0.25 -> (1+2)/2 bits
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(
            vec![0.0, 0.0, (1.0f64 / 3.0).ln(), 0.0],
            vec![2, 2],
        );
        let loss = g.softmax_cross_entropy(logits, &[0, 0], None).unwrap();
        let report = ArLossReport::from_mean_nats(g.scalar_value(loss), 2);
        assert!((report.bpt - 1.5).abs() < 1e-12, "bpt {}", report.bpt);
        assert!((report.nats_total - 1.5 * LN_2 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_causal_config_is_rejected() {
        let cfg = tiny_config(5, false);
        let w: ModelWeights<f64> = ModelWeights::init(&cfg, 0).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bind = Binding::new(&mut g, &w);
        assert!(matches!(
            ar_loss(&mut g, &cfg, &bind, &[0, 1], 1),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn bpt_invariant_to_row_permutation() {
        let cfg = tiny_config(5, true);
        let w: ModelWeights<f64> = ModelWeights::init(&cfg, 4).unwrap();
        let a = ar_bpt(&cfg, &w, &[1, 2, 3, 0, 4, 2], 2).unwrap();
        let b = ar_bpt(&cfg, &w, &[0, 4, 2, 1, 2, 3], 2).unwrap();
        assert!((a.bpt - b.bpt).abs() < 1e-12);
    }
}
