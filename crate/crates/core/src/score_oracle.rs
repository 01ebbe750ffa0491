//! A categorical policy with a known reward table.
//!
//! Everything here can be computed exactly by summing over the `K`
//! outcomes, which makes it the reference environment for unbiasedness and
//! variance checks of the score-function estimators.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::error::{ClientId, Error, Result};
use crate::estimators::{self, ClientGradSet, CvConfig, Flavor};
use crate::numeric::{self, GradVec, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    logits: GradVec,
    probs: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(logits: GradVec) -> Result<Self> {
        if logits.dim() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a categorical policy needs at least 2 outcomes, got {}",
                logits.dim()
            )));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs = exp.into_iter().map(|e| e / z).collect();
        Ok(Self { logits, probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(GradVec::new(logits.to_vec())?)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn logits(&self) -> &GradVec {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `∇ log p(k) = onehot(k) - p`.
    pub fn score(&self, k: usize) -> GradVec {
        let mut v: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        v[k] += 1.0;
        GradVec::new(v).expect("probabilities are finite")
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        WeightedIndex::new(&self.probs)
            .expect("softmax weights are positive")
            .sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    rewards: Vec<f64>,
}

impl RewardTable {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Empty);
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rewards })
    }

    pub fn get(&self, k: usize) -> f64 {
        self.rewards[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rewards
    }

    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.rewards.iter().map(|r| r + c).collect())
    }
}

fn check_k(policy: &CategoricalPolicy, rewards: &RewardTable) -> Result<()> {
    if policy.k() != rewards.rewards.len() {
        return Err(Error::LengthMismatch {
            expected: policy.k(),
            got: rewards.rewards.len(),
        });
    }
    Ok(())
}

/// `Σ_k p_k l_k`.
pub fn expected_reward(policy: &CategoricalPolicy, rewards: &RewardTable) -> Result<f64> {
    check_k(policy, rewards)?;
    Ok(policy.probs.iter().zip(&rewards.rewards).map(|(p, l)| p * l).sum())
}

/// `Σ_k p_k l_k (onehot(k) - p)`, the gradient of the expected reward in the logits.
pub fn exact_gradient(policy: &CategoricalPolicy, rewards: &RewardTable) -> Result<GradVec> {
    check_k(policy, rewards)?;
    let mut g = GradVec::zeros(policy.k());
    for k in 0..policy.k() {
        g.add_scaled(policy.probs[k] * rewards.rewards[k], &policy.score(k));
    }
    Ok(g)
}

/// `n` independent `(outcome, reward)` draws.
pub fn draw(
    policy: &CategoricalPolicy,
    rewards: &RewardTable,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<(usize, f64)>> {
    check_k(policy, rewards)?;
    Ok((0..n)
        .map(|_| {
            let k = policy.sample(rng);
            (k, rewards.rewards[k])
        })
        .collect())
}

/// `l(x_i) (onehot(x_i) - p)` for `n` fresh draws.
pub fn reinforce_sample_grads(
    policy: &CategoricalPolicy,
    rewards: &RewardTable,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<GradVec>> {
    if n == 0 {
        return Err(Error::Empty);
    }
    Ok(draw(policy, rewards, n, rng)?
        .into_iter()
        .map(|(k, r)| policy.score(k).scaled(r))
        .collect())
}

fn grad_set(
    id: ClientId,
    policy: &CategoricalPolicy,
    draws: &[(usize, f64)],
) -> Result<ClientGradSet> {
    let scores = draws.iter().map(|(k, _)| policy.score(*k)).collect();
    let rewards = draws.iter().map(|(_, r)| *r).collect();
    ClientGradSet::with_rewards(id, scores, rewards)
}

/// `(1/n) Σ (l_i - α · mean_{j≠i} l_j) ∇ log p(x_i)`.
pub fn rloo_score_estimate(
    draws: &[(usize, f64)],
    policy: &CategoricalPolicy,
    alpha: f64,
) -> Result<GradVec> {
    if let Some((k, _)) = draws.iter().find(|(k, _)| *k >= policy.k()) {
        return Err(Error::IndexOutOfRange {
            index: *k,
            len: policy.k(),
        });
    }
    let set = grad_set(ClientId(0), policy, draws)?;
    numeric::mean(&estimators::client_reshape(&set, alpha)?)
}

/// `m` clients with `n` draws each, client `u` drawing from child stream `u`.
pub fn score_client_sets(
    policy: &CategoricalPolicy,
    rewards: &RewardTable,
    m: usize,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<ClientGradSet>> {
    if m == 0 {
        return Err(Error::Empty);
    }
    (0..m)
        .map(|u| {
            let mut r = rng.child(u as u64);
            let d = draw(policy, rewards, n, &mut r)?;
            grad_set(ClientId(u), policy, &d)
        })
        .collect()
}

/// One networked round in the score setting. Returns the estimate and the
/// client-reshaped per-sample terms it was built from.
pub fn federated_score_round(
    policy: &CategoricalPolicy,
    rewards: &RewardTable,
    m: usize,
    n: usize,
    cfg: &CvConfig,
    rng: &RngStream,
) -> Result<(GradVec, Vec<GradVec>)> {
    if n < 2 {
        return Err(Error::TooFewSamples {
            what: "score round",
            needed: 2,
            got: n,
        });
    }
    if cfg.flavor != Flavor::ScoreBaseline {
        return Err(Error::InvalidArgument(
            "score rounds need the score-baseline flavor".into(),
        ));
    }
    let sets = score_client_sets(policy, rewards, m, n, rng)?;
    let mut summands = Vec::with_capacity(m * n);
    for set in &sets {
        summands.extend(estimators::client_reshape(set, cfg.alpha_for(set.client_id)?)?);
    }
    let estimate = estimators::networked_estimate_direct(&sets, cfg)?;
    Ok((estimate, summands))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub mean: GradVec,
    pub variance_trace: f64,
    /// Per-component standard error of the mean.
    pub std_error: GradVec,
    pub trials: usize,
}

/// Runs `estimator` on `trials` independent child streams of `rng`.
///
/// Trials run in parallel; results are reduced in trial order, so the
/// summary does not depend on the thread count.
pub fn monte_carlo_bias_variance<F>(
    estimator: F,
    trials: usize,
    rng: &RngStream,
) -> Result<MonteCarloSummary>
where
    F: Fn(&mut RngStream) -> Result<GradVec> + Sync,
{
    if trials < 2 {
        return Err(Error::TooFewSamples {
            what: "Monte-Carlo summary",
            needed: 2,
            got: trials,
        });
    }
    let samples: Vec<GradVec> = (0..trials)
        .into_par_iter()
        .map(|t| estimator(&mut rng.child(t as u64)))
        .collect::<Result<_>>()?;
    let stats = numeric::sample_stats(&samples)?;
    let dim = stats.mean.dim();
    let mut var = vec![0.0; dim];
    for s in &samples {
        for (k, v) in var.iter_mut().enumerate() {
            let d = s[k] - stats.mean[k];
            *v += d * d;
        }
    }
    let std_error = var
        .iter()
        .map(|v| (v / (trials - 1) as f64 / trials as f64).sqrt())
        .collect();
    Ok(MonteCarloSummary {
        mean: stats.mean,
        variance_trace: stats.variance_trace,
        std_error: GradVec::new(std_error)?,
        trials,
    })
}

/// Plug-in and Monte-Carlo values of the networked-minus-client-only variance gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapComparison {
    pub plug_in: f64,
    pub monte_carlo: f64,
}

/// Compares the plug-in variance gap with a direct measurement.
///
/// Each replicate round draws `m` clients of `n` samples. For every slot
/// `(u, i)` the client-only term is the reshaped sample `s_i` and the
/// networked term is `s_i` minus the mean of every reshaped sample held by
/// the other clients. The Monte-Carlo gap is the difference of their
/// variance traces, pooled over all slots and rounds.
pub fn variance_gap_comparison(
    policy: &CategoricalPolicy,
    rewards: &RewardTable,
    m: usize,
    n: usize,
    alpha: f64,
    rounds: usize,
    rng: &RngStream,
) -> Result<GapComparison> {
    if m < 2 {
        return Err(Error::SingleClient);
    }
    if rounds < 2 {
        return Err(Error::TooFewSamples {
            what: "variance gap comparison",
            needed: 2,
            got: rounds,
        });
    }
    let replicates: Vec<Vec<ClientGradSet>> = (0..rounds)
        .into_par_iter()
        .map(|r| score_client_sets(policy, rewards, m, n, &rng.child(r as u64)))
        .collect::<Result<_>>()?;
    let plug_in = estimators::variance_gap_replicated(&replicates, alpha)?;

    let a = ((m - 1) * n) as f64;
    let mut networked = Vec::with_capacity(rounds * m * n);
    let mut single = Vec::with_capacity(rounds * m * n);
    for sets in &replicates {
        let reshaped: Vec<Vec<GradVec>> = sets
            .iter()
            .map(|s| estimators::client_reshape(s, alpha))
            .collect::<Result<_>>()?;
        let client_sums: Vec<GradVec> = reshaped
            .iter()
            .map(|r| numeric::sum(r))
            .collect::<Result<_>>()?;
        let total = numeric::sum(&client_sums)?;
        for (u, rows) in reshaped.iter().enumerate() {
            let others = total.minus_scaled(1.0, &client_sums[u]).scaled(1.0 / a);
            for s in rows {
                networked.push(s.minus_scaled(1.0, &others));
                single.push(s.clone());
            }
        }
    }
    let monte_carlo = numeric::sample_stats(&networked)?.variance_trace
        - numeric::sample_stats(&single)?.variance_trace;
    Ok(GapComparison {
        plug_in,
        monte_carlo,
    })
}
