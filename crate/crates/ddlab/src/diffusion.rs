//! Absorbing-state forward process and the variational bound trained against
//! it. Each token independently transitions to the mask category with
//! probability beta_t = 1/(T-t+1) per step, so the marginal mask probability
//! after t steps is t/T and everything is masked at t = T.
//!
//! The learned reverse step is x0-parameterized: the model predicts the
//! clean token and the reverse distribution is the posterior mixture over
//! that prediction, which forces carry-over on unmasked tokens.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{forward, Binding, ModelConfig, ModelError, ModelWeights};
use crate::tensor::{Graph, Scalar, TensorError, TensorId};
use crate::text::{sample_batch, Split, TokenStore};

pub const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// The fixed corruption schedule: T steps, beta_t = 1/(T-t+1), cumulative
/// survival probabilities, and the mask category index |V|.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    t_max: usize,
    beta: Vec<f64>,
    survival: Vec<f64>,
    pub mask_id: u32,
    pub vocab_size: usize,
}

impl DiffusionSchedule {
    pub fn new(t_max: usize, vocab_size: usize) -> Result<Self> {
        if t_max == 0 || vocab_size == 0 {
            return Err(DiffusionError::Invalid(
                "schedule needs T >= 1 and a non-empty vocabulary".into(),
            ));
        }
        let mut beta = vec![f64::NAN; t_max + 1];
        let mut survival = vec![f64::NAN; t_max + 1];
        let mut surv = 1.0;
        for t in 1..=t_max {
            beta[t] = 1.0 / (t_max - t + 1) as f64;
            surv *= 1.0 - beta[t];
            survival[t] = surv;
        }
        Ok(DiffusionSchedule {
            t_max,
            beta,
            survival,
            mask_id: vocab_size as u32,
            vocab_size,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Per-step mask probability, t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Probability a token is still clean after t steps.
    pub fn survival(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.survival[t]
        }
    }

    /// Marginal mask probability after t steps (the telescoped t/T).
    pub fn mask_prob(&self, t: usize) -> f64 {
        1.0 - self.survival(t)
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(DiffusionError::Contract(format!(
                "timestep {t} outside [{lo}, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// One application of the stepwise forward kernel to a single token.
pub fn step_kernel(token: u32, beta_t: f64, mask_id: u32, rng: &mut ChaCha8Rng) -> u32 {
    if token == mask_id {
        token // absorbing
    } else if rng.gen::<f64>() < beta_t {
        mask_id
    } else {
        token
    }
}

/// Clean rows plus their corrupted counterparts at per-row timesteps.
#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub xt: Vec<u32>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

/// Corrupt `rows` rows of `x0` at per-row timesteps using the single-shot
/// marginal. Equivalence with the stepwise kernel is a tested invariant.
pub fn corrupt(
    x0: &[u32],
    rows: usize,
    t: &[usize],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptedBatch> {
    if rows == 0 || x0.len() % rows != 0 || t.len() != rows {
        return Err(DiffusionError::Contract(format!(
            "{} tokens, {rows} rows, {} timesteps",
            x0.len(),
            t.len()
        )));
    }
    let cols = x0.len() / rows;
    let mut xt = x0.to_vec();
    let mut mask = vec![false; x0.len()];
    for r in 0..rows {
        schedule.check_t(t[r], 1)?;
        let p = schedule.mask_prob(t[r]);
        for c in 0..cols {
            if rng.gen::<f64>() < p {
                xt[r * cols + c] = schedule.mask_id;
                mask[r * cols + c] = true;
            }
        }
    }
    Ok(CorruptedBatch {
        xt,
        mask,
        rows,
        cols,
    })
}

/// Exact one-step reversal of the forward kernel given the clean token:
/// probabilities on {x0, mask} for x^(t-1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorDist {
    pub on_x0: f64,
    pub on_mask: f64,
}

pub fn posterior(
    x0: u32,
    xt: u32,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<PosteriorDist> {
    schedule.check_t(t, 2)?;
    if xt == x0 {
        // the forward process cannot unmask, so a clean token stays put
        Ok(PosteriorDist {
            on_x0: 1.0,
            on_mask: 0.0,
        })
    } else if xt == schedule.mask_id {
        let t = t as f64;
        Ok(PosteriorDist {
            on_x0: 1.0 / t,
            on_mask: (t - 1.0) / t,
        })
    } else {
        Err(DiffusionError::Contract(format!(
            "inconsistent pair: x0 {x0}, xt {xt}"
        )))
    }
}

/// x0-parameterized reverse step for one position: mixture of posteriors
/// weighted by the model's clean-token probabilities. Returns a distribution
/// over the K = |V| + 1 categories (mask last). Unmasked tokens collapse to
/// a point mass on themselves regardless of the prediction.
pub fn reverse_distribution(
    x0_probs: &[f64],
    xt: u32,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check_t(t, 2)?;
    if x0_probs.len() != schedule.vocab_size {
        return Err(DiffusionError::Contract(format!(
            "{} probabilities for vocab {}",
            x0_probs.len(),
            schedule.vocab_size
        )));
    }
    let k = schedule.vocab_size + 1;
    let mut out = vec![0.0; k];
    if xt == schedule.mask_id {
        let t = t as f64;
        for (v, &p) in x0_probs.iter().enumerate() {
            out[v] = p / t;
        }
        out[k - 1] = (t - 1.0) / t;
    } else {
        out[xt as usize] = 1.0;
    }
    Ok(out)
}

/// Monte-Carlo bound terms evaluated from x0 logits. For a row sampled at
/// t = 1 the term is the reconstruction cross-entropy on masked positions;
/// for t >= 2 each masked position's KL collapses to (1/t) times the
/// clean-token negative log probability. Both are scaled by T, making the
/// per-row estimate unbiased for the summed bound; values are nats per
/// token, averaged over the batch.
pub struct ElboParts {
    pub total: TensorId,
    pub reconstruction: TensorId,
    pub kl: TensorId,
}

pub fn elbo_parts_from_logits<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    x0: &[u32],
    corrupted: &CorruptedBatch,
    t: &[usize],
    schedule: &DiffusionSchedule,
) -> Result<ElboParts> {
    let rows = corrupted.rows;
    let cols = corrupted.cols;
    if x0.len() != rows * cols || t.len() != rows {
        return Err(DiffusionError::Contract("batch geometry mismatch".into()));
    }
    let t_max = schedule.t_max as f64;
    let norm = (rows * cols) as f64;
    let mut w_recon = vec![S::zero(); rows * cols];
    let mut w_kl = vec![S::zero(); rows * cols];
    for r in 0..rows {
        schedule.check_t(t[r], 1)?;
        for c in 0..cols {
            let i = r * cols + c;
            if !corrupted.mask[i] {
                continue;
            }
            if t[r] == 1 {
                w_recon[i] = S::from_f64(t_max / norm);
            } else {
                w_kl[i] = S::from_f64(t_max / (t[r] as f64 * norm));
            }
        }
    }
    let reconstruction = g.xent_wsum(logits, x0, &w_recon)?;
    let kl = g.xent_wsum(logits, x0, &w_kl)?;
    let total = g.add(reconstruction, kl)?;
    Ok(ElboParts {
        total,
        reconstruction,
        kl,
    })
}

/// One bound estimate with its decomposition, in bits per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub bound_bits_per_token: f64,
    pub reconstruction_term: f64,
    pub kl_term: f64,
    pub ce_aux_term: f64,
    pub t_sampled: Vec<usize>,
}

/// Anything that produces x0 logits for a corrupted batch. The transformer
/// is the real implementation; the uniform and constant stubs below serve
/// the verification suites.
pub trait Denoiser<S: Scalar> {
    fn vocab_size(&self) -> usize;
    fn x0_logits(
        &self,
        g: &mut Graph<S>,
        xt: &[u32],
        batch: usize,
        t: &[usize],
    ) -> Result<TensorId>;
}

/// Evaluation-only wrapper around config + weights (fresh binding per call).
pub struct ModelEval<'a, S: Scalar> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a ModelWeights<S>,
}

impl<'a, S: Scalar> Denoiser<S> for ModelEval<'a, S> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }
    fn x0_logits(
        &self,
        g: &mut Graph<S>,
        xt: &[u32],
        batch: usize,
        t: &[usize],
    ) -> Result<TensorId> {
        check_diffusion_config(self.cfg)?;
        Ok(forward(g, self.cfg, &bind_fresh(g, self.weights), xt, batch, Some(t))?)
    }
}

fn bind_fresh<S: Scalar>(g: &mut Graph<S>, w: &ModelWeights<S>) -> Binding {
    Binding::new(g, w)
}

/// Maximum-entropy stub: equal probability on every vocabulary token.
pub struct UniformDenoiser {
    pub vocab_size: usize,
}

impl<S: Scalar> Denoiser<S> for UniformDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn x0_logits(
        &self,
        g: &mut Graph<S>,
        xt: &[u32],
        _batch: usize,
        _t: &[usize],
    ) -> Result<TensorId> {
        Ok(g.constant(
            vec![S::zero(); xt.len() * self.vocab_size],
            vec![xt.len(), self.vocab_size],
        ))
    }
}

/// Stub that always predicts one fixed token with overwhelming confidence;
/// on a constant corpus this is an oracle denoiser.
pub struct ConstantDenoiser {
    pub token: u32,
    pub vocab_size: usize,
    pub gain: f64,
}

impl<S: Scalar> Denoiser<S> for ConstantDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn x0_logits(
        &self,
        g: &mut Graph<S>,
        xt: &[u32],
        _batch: usize,
        _t: &[usize],
    ) -> Result<TensorId> {
        let mut data = vec![S::zero(); xt.len() * self.vocab_size];
        for r in 0..xt.len() {
            data[r * self.vocab_size + self.token as usize] = S::from_f64(self.gain);
        }
        Ok(g.constant(data, vec![xt.len(), self.vocab_size]))
    }
}

/// Oracle for one known batch: overwhelming logit on the true clean token.
pub struct BatchOracleDenoiser {
    pub x0: Vec<u32>,
    pub vocab_size: usize,
    pub gain: f64,
}

impl<S: Scalar> Denoiser<S> for BatchOracleDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn x0_logits(
        &self,
        g: &mut Graph<S>,
        xt: &[u32],
        _batch: usize,
        _t: &[usize],
    ) -> Result<TensorId> {
        if xt.len() != self.x0.len() {
            return Err(DiffusionError::Contract("oracle batch mismatch".into()));
        }
        let mut data = vec![S::zero(); xt.len() * self.vocab_size];
        for (r, &tok) in self.x0.iter().enumerate() {
            data[r * self.vocab_size + tok as usize] = S::from_f64(self.gain);
        }
        Ok(g.constant(data, vec![xt.len(), self.vocab_size]))
    }
}

fn check_diffusion_config(cfg: &ModelConfig) -> Result<()> {
    if cfg.causal || !cfg.timestep_conditioning {
        return Err(DiffusionError::Contract(
            "diffusion objective requires a non-causal, timestep-conditioned config".into(),
        ));
    }
    Ok(())
}

fn check_schedule_vocab(vocab: usize, schedule: &DiffusionSchedule) -> Result<()> {
    if vocab != schedule.vocab_size {
        return Err(DiffusionError::Contract(format!(
            "denoiser vocab {vocab} vs schedule vocab {}",
            schedule.vocab_size
        )));
    }
    Ok(())
}

/// Draw one timestep per row, corrupt, and estimate the bound. Returns the
/// differentiable loss (nats per token) and the report in bits.
pub fn elbo_mc_with<S: Scalar, D: Denoiser<S>>(
    g: &mut Graph<S>,
    den: &D,
    x0: &[u32],
    rows: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, ElboReport)> {
    check_schedule_vocab(den.vocab_size(), schedule)?;
    if rows == 0 || x0.len() % rows != 0 {
        return Err(DiffusionError::Contract("bad batch geometry".into()));
    }
    let t: Vec<usize> = (0..rows)
        .map(|_| rng.gen_range(1..=schedule.t_max))
        .collect();
    let corrupted = corrupt(x0, rows, &t, schedule, rng)?;
    let logits = den.x0_logits(g, &corrupted.xt, rows, &t)?;
    let parts = elbo_parts_from_logits(g, logits, x0, &corrupted, &t, schedule)?;
    let report = ElboReport {
        bound_bits_per_token: g.scalar_value(parts.total).to_f64() / LN_2,
        reconstruction_term: g.scalar_value(parts.reconstruction).to_f64() / LN_2,
        kl_term: g.scalar_value(parts.kl).to_f64() / LN_2,
        ce_aux_term: 0.0,
        t_sampled: t,
    };
    Ok((parts.total, report))
}

/// Training objective on a bound graph: bound estimate plus the
/// lambda-weighted cross-entropy of the x0 prediction on masked positions.
pub fn hybrid_loss<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    bind: &Binding,
    x0: &[u32],
    rows: usize,
    schedule: &DiffusionSchedule,
    lambda_ce: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, ElboReport)> {
    check_diffusion_config(cfg)?;
    check_schedule_vocab(cfg.vocab_size, schedule)?;
    if lambda_ce < 0.0 {
        return Err(DiffusionError::Contract(format!(
            "negative CE weight {lambda_ce}"
        )));
    }
    if rows == 0 || x0.len() % rows != 0 {
        return Err(DiffusionError::Contract("bad batch geometry".into()));
    }
    let t: Vec<usize> = (0..rows)
        .map(|_| rng.gen_range(1..=schedule.t_max))
        .collect();
    let corrupted = corrupt(x0, rows, &t, schedule, rng)?;
    let logits = forward(g, cfg, bind, &corrupted.xt, rows, Some(&t))?;
    let parts = elbo_parts_from_logits(g, logits, x0, &corrupted, &t, schedule)?;

    // per-token auxiliary CE, masked positions only
    let norm = S::from_f64(x0.len() as f64);
    let w_ce: Vec<S> = corrupted
        .mask
        .iter()
        .map(|&m| if m { S::one() / norm } else { S::zero() })
        .collect();
    let ce = g.xent_wsum(logits, x0, &w_ce)?;
    let ce_scaled = g.scale(ce, S::from_f64(lambda_ce))?;
    let loss = g.add(parts.total, ce_scaled)?;

    let report = ElboReport {
        bound_bits_per_token: g.scalar_value(parts.total).to_f64() / LN_2,
        reconstruction_term: g.scalar_value(parts.reconstruction).to_f64() / LN_2,
        kl_term: g.scalar_value(parts.kl).to_f64() / LN_2,
        ce_aux_term: g.scalar_value(ce_scaled).to_f64() / LN_2,
        t_sampled: t,
    };
    Ok((loss, report))
}

/// Low-variance validation estimate: mean bound over `n_batches` freshly
/// sampled validation batches, with its standard error.
pub fn validate_bound_with<S: Scalar, D: Denoiser<S>>(
    den: &D,
    store: &TokenStore,
    schedule: &DiffusionSchedule,
    seq_len: usize,
    batch_size: usize,
    n_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if store.validation.is_empty() {
        return Err(DiffusionError::Contract("empty validation split".into()));
    }
    if n_batches == 0 {
        return Err(DiffusionError::Contract("zero validation batches".into()));
    }
    let mut estimates = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let batch = sample_batch(store.split(Split::Validation), seq_len, batch_size, rng, true)
            .map_err(|e| DiffusionError::Invalid(e.to_string()))?;
        let mut g: Graph<S> = Graph::new();
        let (_, report) = elbo_mc_with(&mut g, den, &batch.tokens, batch.rows, schedule, rng)?;
        estimates.push(report.bound_bits_per_token);
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let stderr = if estimates.len() < 2 {
        0.0
    } else {
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok((mean, stderr))
}

/// Validation with the real model.
pub fn validate_bound<S: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
    store: &TokenStore,
    schedule: &DiffusionSchedule,
    seq_len: usize,
    batch_size: usize,
    n_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    check_diffusion_config(cfg)?;
    let den = ModelEval { cfg, weights };
    validate_bound_with(&den, store, schedule, seq_len, batch_size, n_batches, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_identities_hold_exactly() {
        for t_max in [3usize, 8, 1000] {
            let s = DiffusionSchedule::new(t_max, 5).unwrap();
            assert_eq!(s.beta(t_max), 1.0, "beta_T must be 1 at T={t_max}");
            assert_eq!(s.survival(t_max), 0.0);
            for t in 1..=t_max {
                let expect = (t_max - t) as f64 / t_max as f64;
                assert!(
                    (s.survival(t) - expect).abs() <= 1e-12,
                    "survival({t}) at T={t_max}"
                );
                let mask = t as f64 / t_max as f64;
                assert!((s.mask_prob(t) - mask).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn corrupt_masks_everything_at_t_max() {
        let s = DiffusionSchedule::new(16, 5).unwrap();
        let x0 = vec![1u32; 64];
        let c = corrupt(&x0, 4, &[16, 16, 16, 16], &s, &mut rng(0)).unwrap();
        assert!(c.mask.iter().all(|&m| m));
        assert!(c.xt.iter().all(|&x| x == s.mask_id));
    }

    #[test]
    fn corrupt_rejects_t_zero() {
        let s = DiffusionSchedule::new(16, 5).unwrap();
        assert!(corrupt(&[1, 2], 1, &[0], &s, &mut rng(0)).is_err());
    }

    #[test]
    fn corrupt_mask_fraction_tracks_marginal() {
        // T=10, t=4 over 1e5 positions: fraction 0.4 within 3 binomial sigmas
        let s = DiffusionSchedule::new(10, 5).unwrap();
        let n = 100_000usize;
        let x0 = vec![0u32; n];
        let c = corrupt(&x0, 1, &[4], &s, &mut rng(11)).unwrap();
        let frac = c.mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        let sigma = (0.4 * 0.6 / n as f64).sqrt();
        assert!(
            (frac - 0.4).abs() < 3.0 * sigma,
            "fraction {frac} vs 0.4 +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn small_t_mask_fraction_is_t_over_t_max() {
        let s = DiffusionSchedule::new(1000, 5).unwrap();
        assert!((s.mask_prob(1) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn posterior_point_mass_on_unmasked() {
        let s = DiffusionSchedule::new(8, 5).unwrap();
        let p = posterior(3, 3, 5, &s).unwrap();
        assert_eq!(p, PosteriorDist { on_x0: 1.0, on_mask: 0.0 });
    }

    #[test]
    fn posterior_masked_splits_one_over_t() {
        // T=4, t=3: (x0: 1/3, mask: 2/3), frozen from the Bayes enumeration
        let s = DiffusionSchedule::new(4, 5).unwrap();
        let p = posterior(2, s.mask_id, 3, &s).unwrap();
        assert!((p.on_x0 - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.on_mask - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.on_x0 + p.on_mask - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_contract_errors() {
        let s = DiffusionSchedule::new(8, 5).unwrap();
        assert!(posterior(1, 2, 3, &s).is_err(), "inconsistent pair");
        assert!(posterior(1, 1, 1, &s).is_err(), "t below 2");
    }

    #[test]
    fn reverse_distribution_carry_over() {
        let s = DiffusionSchedule::new(8, 3).unwrap();
        let probs = vec![0.2, 0.5, 0.3];
        let d = reverse_distribution(&probs, 1, 5, &s).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reverse_distribution_uniform_prediction() {
        // masked, uniform x0 prediction, t=5: (t-1)/t on mask, 1/(t |V|) each
        let s = DiffusionSchedule::new(8, 4).unwrap();
        let probs = vec![0.25; 4];
        let d = reverse_distribution(&probs, s.mask_id, 5, &s).unwrap();
        for v in 0..4 {
            assert!((d[v] - 0.05).abs() < 1e-15);
        }
        assert!((d[4] - 0.8).abs() < 1e-15);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reverse_distribution_delta_prediction_matches_posterior() {
        let s = DiffusionSchedule::new(8, 4).unwrap();
        let mut probs = vec![0.0; 4];
        probs[2] = 1.0;
        let d = reverse_distribution(&probs, s.mask_id, 6, &s).unwrap();
        let p = posterior(2, s.mask_id, 6, &s).unwrap();
        assert!((d[2] - p.on_x0).abs() < 1e-15);
        assert!((d[4] - p.on_mask).abs() < 1e-15);
    }

    #[test]
    fn oracle_denoiser_bound_is_zero_for_every_t() {
        let s = DiffusionSchedule::new(6, 4).unwrap();
        let x0 = vec![1u32, 3, 0, 2];
        let den = BatchOracleDenoiser {
            x0: x0.clone(),
            vocab_size: 4,
            gain: 60.0,
        };
        for seed in 0..6 {
            let mut g: Graph<f64> = Graph::new();
            let (_, report) =
                elbo_mc_with(&mut g, &den, &x0, 1, &s, &mut rng(seed)).unwrap();
            assert!(
                report.bound_bits_per_token.abs() < 1e-9,
                "t={:?} bound {}",
                report.t_sampled,
                report.bound_bits_per_token
            );
        }
    }

    #[test]
    fn elbo_terms_are_nonnegative() {
        let s = DiffusionSchedule::new(6, 4).unwrap();
        let den = UniformDenoiser { vocab_size: 4 };
        for seed in 0..10 {
            let mut g: Graph<f64> = Graph::new();
            let x0 = vec![1u32, 3, 0, 2, 2, 1];
            let (_, report) = elbo_mc_with(&mut g, &den, &x0, 2, &s, &mut rng(seed)).unwrap();
            assert!(report.reconstruction_term >= -1e-9);
            assert!(report.kl_term >= -1e-9);
            assert!(report.bound_bits_per_token >= -1e-9);
        }
    }

    #[test]
    fn hybrid_with_zero_lambda_equals_elbo() {
        use crate::model::tiny_config;
        let cfg = tiny_config(5, false);
        let w: ModelWeights<f64> = ModelWeights::init(&cfg, 3).unwrap();
        let s = DiffusionSchedule::new(6, 5).unwrap();
        let x0 = vec![1u32, 3, 0, 2];

        let mut g1: Graph<f64> = Graph::new();
        let b1 = Binding::new(&mut g1, &w);
        let (loss1, rep1) = hybrid_loss(&mut g1, &cfg, &b1, &x0, 1, &s, 0.0, &mut rng(5)).unwrap();

        let mut g2: Graph<f64> = Graph::new();
        let den = ModelEval { cfg: &cfg, weights: &w };
        let (loss2, rep2) = elbo_mc_with(&mut g2, &den, &x0, 1, &s, &mut rng(5)).unwrap();

        assert_eq!(rep1.t_sampled, rep2.t_sampled);
        assert!((g1.scalar_value(loss1) - g2.scalar_value(loss2)).abs() < 1e-12);
        assert_eq!(rep1.ce_aux_term, 0.0);
        assert!((rep1.bound_bits_per_token - rep2.bound_bits_per_token).abs() < 1e-12);
    }

    #[test]
    fn validate_bound_uniform_denoiser_hits_log2_vocab() {
        use crate::text::{build_store, Tokenizer};
        let corpus: String = std::iter::repeat("ab").take(400).collect();
        let (store, _) = build_store(&corpus, &Tokenizer::Bytes, 0.5).unwrap();
        let s = DiffusionSchedule::new(16, 256).unwrap();
        let den = UniformDenoiser { vocab_size: 256 };
        let (mean, stderr) =
            validate_bound_with::<f64, _>(&den, &store, &s, 16, 4, 50, &mut rng(2)).unwrap();
        assert!(
            (mean - 8.0).abs() <= 3.0 * stderr.max(1e-9),
            "uniform bound {mean} +- {stderr}"
        );
    }

    #[test]
    fn validate_bound_oracle_is_zero_with_zero_stderr() {
        use crate::text::{build_store, Tokenizer};
        let corpus = "a".repeat(512);
        let (store, _) = build_store(&corpus, &Tokenizer::Bytes, 0.5).unwrap();
        let s = DiffusionSchedule::new(16, 256).unwrap();
        let den = ConstantDenoiser {
            token: b'a' as u32,
            vocab_size: 256,
            gain: 60.0,
        };
        let (mean, stderr) =
            validate_bound_with::<f64, _>(&den, &store, &s, 16, 4, 20, &mut rng(2)).unwrap();
        assert!(mean.abs() < 1e-9);
        assert!(stderr.abs() < 1e-9);
    }

    #[test]
    fn stepwise_kernel_is_absorbing() {
        let s = DiffusionSchedule::new(8, 5).unwrap();
        let mut r = rng(9);
        // simulate trajectories; once masked, always masked
        for _ in 0..200 {
            let mut tok = 3u32;
            let mut masked_at: Option<usize> = None;
            for t in 1..=8 {
                tok = step_kernel(tok, s.beta(t), s.mask_id, &mut r);
                if tok == s.mask_id && masked_at.is_none() {
                    masked_at = Some(t);
                }
                if let Some(_) = masked_at {
                    assert_eq!(tok, s.mask_id, "token escaped the absorbing state");
                }
            }
            // beta_T = 1: everything is masked by the end
            assert_eq!(tok, s.mask_id);
        }
    }
}
