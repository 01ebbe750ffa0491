//! Oracle suites behind the `verify` subcommand.
//!
//! Each suite returns one [`Check`] per property, with the measured value
//! and the threshold it was held to.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ClientId, Error, Result};
use crate::estimators::{self, ClientGradSet, CvConfig, Flavor};
use crate::numeric::{self, derive_stream, stream_key, GradVec, RngStream};
use crate::score_oracle::{self, CategoricalPolicy, RewardTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Identity,
    Unbiasedness,
    Variance,
    Alpha,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Identity, Suite::Unbiasedness, Suite::Variance, Suite::Alpha];
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Suite::Identity),
            "unbiasedness" => Ok(Suite::Unbiasedness),
            "variance" => Ok(Suite::Variance),
            "alpha" => Ok(Suite::Alpha),
            _ => Err("expected identity, unbiasedness, variance or alpha".into()),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Identity => "identity",
            Suite::Unbiasedness => "unbiasedness",
            Suite::Variance => "variance",
            Suite::Alpha => "alpha",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// `"<="` or `">="`, how `measured` is compared with `threshold`.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            relation: "<=",
            pass: measured <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            relation: ">=",
            pass: measured >= threshold,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {:.6e} {} {:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.relation,
            self.threshold
        )
    }
}

/// The pinned categorical environment: 5 outcomes, fixed logits and rewards.
pub fn pinned_score_fixture() -> (CategoricalPolicy, RewardTable) {
    (
        CategoricalPolicy::from_logits(&[0.2, -0.4, 0.9, 0.0, -1.1]).expect("valid logits"),
        RewardTable::new(vec![1.0, 0.3, 0.7, 1.5, 0.2]).expect("finite rewards"),
    )
}

/// Random gradient-baseline clients: 2 to 5 clients, 3 to 11 samples each,
/// dimension 2 to 7; each client's samples are `N(μ_u, I)` with `μ_u ~ N(0, 4 I)`.
pub fn random_gaussian_clients(rng: &mut RngStream) -> Vec<ClientGradSet> {
    let m = rng.random_range(2..6);
    let d = rng.random_range(2..8);
    (0..m)
        .map(|u| {
            let n_u = rng.random_range(3..12);
            let mu: Vec<f64> = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let rows = (0..n_u)
                .map(|_| {
                    GradVec::new(
                        mu.iter()
                            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    )
                    .expect("finite")
                })
                .collect();
            ClientGradSet::new(ClientId(u), rows)
        })
        .collect()
}

/// Random categorical environment: logits `N(0, 1)`, rewards `N(0, 1)` plus a
/// shared `N(0, 4)` offset.
pub fn random_score_env(k: usize, rng: &mut RngStream) -> Result<(CategoricalPolicy, RewardTable)> {
    let logits: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let offset: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
    let rewards = (0..k)
        .map(|_| offset + rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((CategoricalPolicy::from_logits(&logits)?, RewardTable::new(rewards)?))
}

fn rel_diff(a: &GradVec, b: &GradVec) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .filter(|r| r.is_finite())
        .fold(0.0, f64::max)
}

fn max_scaled_diff(a: &GradVec, b: &GradVec, scale: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale.max(1e-300)
}

fn suite_stream(seed: u64, suite: Suite, tag: u64) -> RngStream {
    derive_stream(seed, stream_key(&[100 + suite as u64, tag]))
}

fn identity_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = suite_stream(seed, Suite::Identity, 0);
    let (mut loo, mut reshape, mut degenerate, mut compose) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let sets = random_gaussian_clients(&mut rng);
        let alpha: f64 = rng.random_range(-2.0..2.0);
        for s in &sets {
            let full = numeric::mean(&s.per_sample)?;
            let loos = (0..s.n())
                .map(|i| estimators::loo_mean(&s.per_sample, i))
                .collect::<Result<Vec<_>>>()?;
            loo = loo.max(max_scaled_diff(&numeric::mean(&loos)?, &full, full.max_abs().max(1.0)));
            let r = numeric::mean(&estimators::client_reshape(s, alpha)?)?;
            reshape = reshape.max(max_scaled_diff(&r, &full.scaled(1.0 - alpha), full.max_abs().max(1.0)));
        }

        let n_eq = sets[0].n();
        let equal: Vec<ClientGradSet> = sets
            .iter()
            .map(|s| {
                let mut rows = s.per_sample.clone();
                rows.truncate(n_eq.min(s.n()));
                while rows.len() < n_eq {
                    rows.push(s.per_sample[rows.len() % s.n()].clone());
                }
                ClientGradSet::new(s.client_id, rows)
            })
            .collect();
        let ids = || equal.iter().map(|s| s.client_id);
        let scale = equal
            .iter()
            .flat_map(|s| s.per_sample.iter().map(|g| numeric::norm_sq(g).sqrt()))
            .fold(0.0, f64::max);
        let cfg = CvConfig::uniform(ids(), alpha, 1.0, Flavor::GradientBaseline);
        degenerate = degenerate.max(estimators::networked_estimate_direct(&equal, &cfg)?.max_abs() / scale);

        let cfg = CvConfig::uniform(sets.iter().map(|s| s.client_id), alpha, 0.0, Flavor::GradientBaseline);
        let direct = estimators::networked_estimate_direct(&sets, &cfg)?;
        let mut aggregates = Vec::new();
        let mut sizes = Vec::new();
        for s in &sets {
            aggregates.push(numeric::mean(&estimators::client_reshape(s, alpha)?)?);
            sizes.push(s.n() as f64);
        }
        compose = compose.max(rel_diff(&direct, &numeric::weighted_mean(&aggregates, &sizes)?));
    }
    Ok(vec![
        Check::at_most("leave-one-out means average to the mean (max rel err)", loo, 1e-10),
        Check::at_most("reshaped mean is (1-alpha) times the mean (max rel err)", reshape, 1e-10),
        Check::at_most("beta=1 with equal sizes gives zero (max |g| / input scale)", degenerate, 1e-9),
        Check::at_most("beta=0 composition equals weighted client mean (max rel err)", compose, 1e-12),
    ])
}

/// Largest `|mean - exact| / std_error` over components.
fn max_z(summary: &score_oracle::MonteCarloSummary, exact: &GradVec) -> f64 {
    summary
        .mean
        .iter()
        .zip(exact.iter())
        .zip(summary.std_error.iter())
        .map(|((m, e), se)| (m - e).abs() / se)
        .fold(0.0, f64::max)
}

/// Monte-Carlo summary of the networked estimate on the pinned fixture with
/// `m = 3` clients of `n = 4` draws and `β = 0`.
pub fn fixture_networked_summary(alpha: f64, trials: usize, rng: &RngStream) -> Result<score_oracle::MonteCarloSummary> {
    let (p, r) = pinned_score_fixture();
    let cfg = CvConfig::uniform((0..3).map(ClientId), alpha, 0.0, Flavor::ScoreBaseline);
    score_oracle::monte_carlo_bias_variance(
        |rng| Ok(score_oracle::federated_score_round(&p, &r, 3, 4, &cfg, rng)?.0),
        trials,
        rng,
    )
}

fn unbiasedness_suite(seed: u64) -> Result<Vec<Check>> {
    let (p, r) = pinned_score_fixture();
    let exact = score_oracle::exact_gradient(&p, &r)?;
    let mut checks = Vec::new();
    for (k, alpha) in [1.0, 0.5].into_iter().enumerate() {
        let s = fixture_networked_summary(alpha, 200_000, &suite_stream(seed, Suite::Unbiasedness, k as u64))?;
        checks.push(Check::at_most(
            format!("networked score estimate, alpha={alpha}, beta=0 (max |z| over components)"),
            max_z(&s, &exact),
            3.0,
        ));
    }
    Ok(checks)
}

/// Plug-in versus Monte-Carlo variance gap on `instances` random environments.
/// Returns `(instance, alpha, comparison)` triples.
pub fn gap_sign_instances(
    seed: u64,
    instances: usize,
    rounds: usize,
) -> Result<Vec<(usize, f64, score_oracle::GapComparison)>> {
    (0..instances)
        .map(|i| {
            let mut rng = derive_stream(seed, stream_key(&[200, i as u64]));
            let (p, r) = random_score_env(5, &mut rng)?;
            let alpha = [0.0, 0.5, 1.0][i % 3];
            let cmp = score_oracle::variance_gap_comparison(&p, &r, 3, 4, alpha, rounds, &rng.child(1))?;
            Ok((i, alpha, cmp))
        })
        .collect()
}

fn variance_suite(seed: u64) -> Result<Vec<Check>> {
    let rng = suite_stream(seed, Suite::Variance, 0);
    let plain = fixture_networked_summary(0.0, 10_000, &rng.child(0))?.variance_trace;
    let loo = fixture_networked_summary(1.0, 10_000, &rng.child(1))?.variance_trace;
    let mut checks = vec![Check::at_least(
        "variance reduction of alpha=1 over alpha=0 (fraction)",
        1.0 - loo / plain,
        0.2,
    )];
    let gaps = gap_sign_instances(seed, 10, 20_000)?;
    let disagreements = gaps
        .iter()
        .filter(|(_, _, g)| (g.plug_in > 0.0) != (g.monte_carlo > 0.0))
        .count();
    checks.push(Check::at_most(
        "variance-gap sign disagreements over 10 instances",
        disagreements as f64,
        0.0,
    ));
    Ok(checks)
}

/// Pooled per-sample variance trace of the identity-form summands.
pub fn identity_summand_variance(sets: &[ClientGradSet], alpha: f64) -> Result<f64> {
    Ok(numeric::sample_stats(&estimators::identity_form_summands(sets, alpha)?)?.variance_trace)
}

/// `(variance at closed-form α) / (grid minimum over [-2, 2] step 1e-3) - 1`.
pub fn alpha_excess(sets: &[ClientGradSet]) -> Result<f64> {
    let alpha = estimators::pooled_optimal_alpha(sets)?;
    let mut best = f64::INFINITY;
    for k in 0..=4000 {
        let a = -2.0 + k as f64 * 1e-3;
        best = best.min(identity_summand_variance(sets, a)?);
    }
    if !(best > 0.0) {
        return Err(Error::Degenerate("zero variance on the whole grid".into()));
    }
    Ok(identity_summand_variance(sets, alpha)? / best - 1.0)
}

fn alpha_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = suite_stream(seed, Suite::Alpha, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let sets = random_gaussian_clients(&mut rng);
        worst = worst.max(alpha_excess(&sets)?);
    }
    Ok(vec![Check::at_most(
        "closed-form alpha variance over grid minimum, 20 instances (max excess)",
        worst,
        0.05,
    )])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Identity => identity_suite(seed),
        Suite::Unbiasedness => unbiasedness_suite(seed),
        Suite::Variance => variance_suite(seed),
        Suite::Alpha => alpha_suite(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn check_lines() {
        let c = Check::at_most("x", 0.5, 1.0);
        assert!(c.pass);
        assert!(c.to_string().starts_with("PASS x: measured 5.000000e-1 <= 1.000000e0"));
        assert!(!Check::at_least("y", 0.1, 0.2).pass);
    }

    #[test]
    fn identity_suite_passes() {
        assert!(run_suite(Suite::Identity, 1).unwrap().iter().all(|c| c.pass));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = random_gaussian_clients(&mut derive_stream(3, 0));
        let b = random_gaussian_clients(&mut derive_stream(3, 0));
        assert_eq!(a, b);
        assert!(a.len() >= 2 && a.iter().all(|s| s.n() >= 3));
    }
}
