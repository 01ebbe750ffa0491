//! Control-variate machinery.
//!
//! Two levels of leave-one-out baselines are composed here:
//!
//! * client side, every per-sample gradient is reshaped as
//!   `g'_i = g_i - α_u · c_i` where `c_i` is the mean of the client's other
//!   samples ([`client_reshape`]);
//! * server side, every client aggregate is reshaped as
//!   `g'_u = g_u - β · c_u` where `c_u` is the size-weighted mean of the other
//!   clients' aggregates ([`server_control_variate`]).
//!
//! Two baseline flavors exist. [`Flavor::GradientBaseline`] applies the
//! baseline to gradient vectors directly. [`Flavor::ScoreBaseline`] is the
//! score-function form: the leave-one-out mean of scalar rewards multiplies
//! the sample's score vector, so each per-sample vector in a
//! [`ClientGradSet`] is `∇ log p(x_i)` and the rewards are carried alongside.

use std::collections::BTreeMap;

use crate::error::{ClientId, Error, Result};
use crate::numeric::{self, norm_sq, GradVec};

pub type ClientMap<T> = BTreeMap<ClientId, T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    GradientBaseline,
    ScoreBaseline,
}

/// Control-variate coefficients for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub alphas: ClientMap<f64>,
    /// Server control-variate coefficient.
    pub beta: f64,
    pub flavor: Flavor,
}

impl CvConfig {
    pub fn uniform(
        ids: impl IntoIterator<Item = ClientId>,
        alpha: f64,
        beta: f64,
        flavor: Flavor,
    ) -> Self {
        Self {
            alphas: ids.into_iter().map(|id| (id, alpha)).collect(),
            beta,
            flavor,
        }
    }

    pub fn alpha_for(&self, id: ClientId) -> Result<f64> {
        self.alphas.get(&id).copied().ok_or(Error::UnknownClient(id))
    }
}

/// One client's per-sample gradients for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientGradSet {
    pub client_id: ClientId,
    /// Gradients `g_i`, or score vectors `∇ log p(x_i)` for the score flavor.
    pub per_sample: Vec<GradVec>,
    /// Per-sample rewards; present exactly for the score flavor.
    pub rewards: Option<Vec<f64>>,
}

impl ClientGradSet {
    pub fn new(client_id: ClientId, per_sample: Vec<GradVec>) -> Self {
        Self {
            client_id,
            per_sample,
            rewards: None,
        }
    }

    pub fn with_rewards(
        client_id: ClientId,
        scores: Vec<GradVec>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if scores.len() != rewards.len() {
            return Err(Error::LengthMismatch {
                expected: scores.len(),
                got: rewards.len(),
            });
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            client_id,
            per_sample: scores,
            rewards: Some(rewards),
        })
    }

    pub fn n(&self) -> usize {
        self.per_sample.len()
    }

    pub fn flavor(&self) -> Flavor {
        if self.rewards.is_some() {
            Flavor::ScoreBaseline
        } else {
            Flavor::GradientBaseline
        }
    }

    /// Unreshaped per-sample gradient estimates (`r_i · s_i` for the score flavor).
    pub fn raw_gradients(&self) -> Vec<GradVec> {
        match &self.rewards {
            None => self.per_sample.clone(),
            Some(r) => self
                .per_sample
                .iter()
                .zip(r)
                .map(|(s, r)| s.scaled(*r))
                .collect(),
        }
    }
}

/// Mean of every entry except `i`.
pub fn loo_mean(grads: &[GradVec], i: usize) -> Result<GradVec> {
    if grads.len() < 2 {
        return Err(Error::TooFewSamples {
            what: "leave-one-out baseline",
            needed: 2,
            got: grads.len(),
        });
    }
    if i >= grads.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: grads.len(),
        });
    }
    let others: Vec<GradVec> = grads
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, g)| g.clone())
        .collect();
    numeric::mean(&others)
}

/// All leave-one-out means at once, `(S - g_i) / (n - 1)`.
pub fn loo_means(grads: &[GradVec]) -> Result<Vec<GradVec>> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            what: "leave-one-out baseline",
            needed: 2,
            got: n,
        });
    }
    let total = numeric::sum(grads)?;
    let inv = 1.0 / (n - 1) as f64;
    Ok(grads
        .iter()
        .map(|g| {
            let mut c = total.minus_scaled(1.0, g);
            c.scale(inv);
            c
        })
        .collect())
}

fn loo_scalar_means(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let total: f64 = values.iter().sum();
    values.iter().map(|v| (total - v) / (n - 1) as f64).collect()
}

/// Per-sample `(g_i, c_i)` pairs: the raw estimate and its leave-one-out baseline.
pub(crate) fn baseline_pairs(set: &ClientGradSet) -> Result<(Vec<GradVec>, Vec<GradVec>)> {
    match &set.rewards {
        None => {
            let c = loo_means(&set.per_sample)?;
            Ok((set.per_sample.clone(), c))
        }
        Some(rewards) => {
            if set.n() < 2 {
                return Err(Error::TooFewSamples {
                    what: "leave-one-out baseline",
                    needed: 2,
                    got: set.n(),
                });
            }
            let loo = loo_scalar_means(rewards);
            let g = set.raw_gradients();
            let c = set
                .per_sample
                .iter()
                .zip(&loo)
                .map(|(s, b)| s.scaled(*b))
                .collect();
            Ok((g, c))
        }
    }
}

/// `g'_i = g_i - α · c_i` for every sample of the client.
pub fn client_reshape(set: &ClientGradSet, alpha: f64) -> Result<Vec<GradVec>> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite);
    }
    let (g, c) = baseline_pairs(set)?;
    Ok(g.iter()
        .zip(&c)
        .map(|(g, c)| g.minus_scaled(alpha, c))
        .collect())
}

/// Reshaped gradients plus whether the client was too small to reshape.
#[derive(Debug, Clone, PartialEq)]
pub struct Reshaped {
    pub values: Vec<GradVec>,
    pub passthrough: bool,
}

/// Like [`client_reshape`], but a single-sample client passes through
/// unreshaped (its α is treated as 0) instead of failing.
pub fn reshape_or_passthrough(set: &ClientGradSet, alpha: f64) -> Result<Reshaped> {
    match set.n() {
        0 => Err(Error::Empty),
        1 => Ok(Reshaped {
            values: set.raw_gradients(),
            passthrough: true,
        }),
        _ => Ok(Reshaped {
            values: client_reshape(set, alpha)?,
            passthrough: false,
        }),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ClientWeighting<'a> {
    Uniform,
    /// Per-sample probabilities; must be non-negative and sum to 1.
    Sampling(&'a [f64]),
}

pub fn client_aggregate(reshaped: &[GradVec], weighting: ClientWeighting<'_>) -> Result<GradVec> {
    if reshaped.is_empty() {
        return Err(Error::Empty);
    }
    match weighting {
        ClientWeighting::Uniform => numeric::mean(reshaped),
        ClientWeighting::Sampling(w) => {
            if w.len() != reshaped.len() {
                return Err(Error::LengthMismatch {
                    expected: reshaped.len(),
                    got: w.len(),
                });
            }
            if w.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidWeights(
                    "sampling weights must be finite and non-negative".into(),
                ));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidWeights(format!(
                    "sampling weights sum to {total}, expected 1"
                )));
            }
            numeric::weighted_mean(reshaped, w)
        }
    }
}

fn check_server_inputs(aggregates: &ClientMap<GradVec>, sizes: &ClientMap<usize>) -> Result<usize> {
    if aggregates.is_empty() {
        return Err(Error::Empty);
    }
    if aggregates.len() != sizes.len() {
        return Err(Error::LengthMismatch {
            expected: aggregates.len(),
            got: sizes.len(),
        });
    }
    let dim = aggregates.values().next().map(GradVec::dim).unwrap_or(0);
    let mut n = 0usize;
    for (id, g) in aggregates {
        let size = *sizes.get(id).ok_or(Error::UnknownClient(*id))?;
        if size == 0 {
            return Err(Error::InvalidArgument(format!("{id} has zero samples")));
        }
        if g.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: g.dim(),
            });
        }
        n += size;
    }
    Ok(n)
}

/// `c_{V\u} = Σ_{v≠u} n_v / (n - n_u) · g_v`, evaluated term by term.
pub fn server_control_variate(
    aggregates: &ClientMap<GradVec>,
    sizes: &ClientMap<usize>,
    u: ClientId,
) -> Result<GradVec> {
    let n = check_server_inputs(aggregates, sizes)?;
    if aggregates.len() < 2 {
        return Err(Error::SingleClient);
    }
    let n_u = *sizes.get(&u).ok_or(Error::UnknownClient(u))?;
    let rest = (n - n_u) as f64;
    let dim = aggregates[&u].dim();
    let mut acc = GradVec::zeros(dim);
    for (v, g) in aggregates.iter().filter(|(v, _)| **v != u) {
        acc.add_scaled(sizes[v] as f64 / rest, g);
    }
    Ok(acc)
}

/// `Σ_u (n_u / n) · (g_u - β · c_{V\u})`, reduced in ascending client order.
pub fn server_aggregate(
    aggregates: &ClientMap<GradVec>,
    sizes: &ClientMap<usize>,
    beta: f64,
) -> Result<GradVec> {
    if !beta.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = check_server_inputs(aggregates, sizes)?;
    if beta != 0.0 && aggregates.len() < 2 {
        return Err(Error::SingleClient);
    }
    let dim = aggregates.values().next().map(GradVec::dim).unwrap_or(0);
    // Σ_v n_v g_v, so that c_u = (total - n_u g_u) / (n - n_u) in O(d).
    let mut total = GradVec::zeros(dim);
    for (id, g) in aggregates {
        total.add_scaled(sizes[id] as f64, g);
    }
    let nf = n as f64;
    let mut acc = GradVec::zeros(dim);
    for (id, g) in aggregates {
        let n_u = sizes[id] as f64;
        acc.add_scaled(n_u / nf, g);
        if beta != 0.0 {
            let mut cv = total.minus_scaled(n_u, g);
            cv.scale(1.0 / (nf - n_u));
            acc.add_scaled(-beta * n_u / nf, &cv);
        }
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(acc)
}

fn check_flavor(sets: &[ClientGradSet], flavor: Flavor) -> Result<()> {
    for s in sets {
        if s.flavor() != flavor {
            return Err(Error::InvalidArgument(format!(
                "{} carries {:?} data but the config asks for {:?}",
                s.client_id,
                s.flavor(),
                flavor
            )));
        }
    }
    Ok(())
}

fn unique_ids(sets: &[ClientGradSet]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for s in sets {
        if !seen.insert(s.client_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {}",
                s.client_id
            )));
        }
    }
    Ok(())
}

/// Client aggregates of reshaped gradients plus client sizes.
pub fn client_aggregates(
    sets: &[ClientGradSet],
    cfg: &CvConfig,
) -> Result<(ClientMap<GradVec>, ClientMap<usize>)> {
    check_flavor(sets, cfg.flavor)?;
    unique_ids(sets)?;
    let mut aggregates = ClientMap::new();
    let mut sizes = ClientMap::new();
    for set in sets {
        let reshaped = client_reshape(set, cfg.alpha_for(set.client_id)?)?;
        aggregates.insert(
            set.client_id,
            client_aggregate(&reshaped, ClientWeighting::Uniform)?,
        );
        sizes.insert(set.client_id, set.n());
    }
    Ok((aggregates, sizes))
}

/// Double control-variate estimate: client reshape, uniform client
/// aggregation, then server aggregation with `cfg.beta`.
pub fn networked_estimate_direct(sets: &[ClientGradSet], cfg: &CvConfig) -> Result<GradVec> {
    if sets.is_empty() {
        return Err(Error::Empty);
    }
    let (aggregates, sizes) = client_aggregates(sets, cfg)?;
    server_aggregate(&aggregates, &sizes, cfg.beta)
}

/// Pooled summands `g_i - α · c_{D_u\i}` over every sample of every client.
pub fn identity_form_summands(sets: &[ClientGradSet], alpha: f64) -> Result<Vec<GradVec>> {
    if sets.is_empty() {
        return Err(Error::Empty);
    }
    let mut out = Vec::with_capacity(sets.iter().map(ClientGradSet::n).sum());
    for set in sets {
        out.extend(client_reshape(set, alpha)?);
    }
    Ok(out)
}

/// `(1/n) Σ_i (g_i - α · c_{D_u\i})` with every sample weighted `1/n`.
pub fn identity_form_estimate(sets: &[ClientGradSet], alpha: f64) -> Result<GradVec> {
    numeric::mean(&identity_form_summands(sets, alpha)?)
}

/// Plug-in pieces of the closed-form coefficient for one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTerms {
    pub numerator: f64,
    pub denominator: f64,
    /// Same denominator evaluated on uncentered baselines; sets the degeneracy scale.
    pub raw_denominator: f64,
}

impl AlphaTerms {
    fn ratio(&self) -> Result<f64> {
        if !(self.denominator > 1e-20 * self.raw_denominator) || self.denominator <= 0.0 {
            return Err(Error::Degenerate(
                "baselines have no spread around their mean".into(),
            ));
        }
        let alpha = self.numerator / self.denominator;
        if !alpha.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(alpha)
    }
}

/// Closed-form plug-in terms for every client, in input order.
///
/// With `a = n - n_u`, client `u` contributes
///
/// ```text
///        2a² E_u[g·c] + Σ_{j∉u} g_j·c_j
///   α = --------------------------------
///        2a² E_u[c·c] + Σ_{j∉u} c_j·c_j
/// ```
///
/// Products are dot products and expectations are sample means. Both `g` and
/// `c` are centered on their pooled means first, so the baselines have zero
/// mean; that is also what removes the mean-difference term from the
/// stationarity condition.
pub fn alpha_terms(sets: &[ClientGradSet]) -> Result<Vec<AlphaTerms>> {
    if sets.len() < 2 {
        return Err(Error::SingleClient);
    }
    unique_ids(sets)?;
    let pairs: Vec<(Vec<GradVec>, Vec<GradVec>)> =
        sets.iter().map(baseline_pairs).collect::<Result<_>>()?;
    let n: usize = sets.iter().map(ClientGradSet::n).sum();
    let all_g: Vec<GradVec> = pairs.iter().flat_map(|(g, _)| g.iter().cloned()).collect();
    let all_c: Vec<GradVec> = pairs.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
    let g_bar = numeric::mean(&all_g)?;
    let c_bar = numeric::mean(&all_c)?;

    // (Σ g̃·c̃, Σ c̃·c̃, Σ c·c) per client
    let sums: Vec<(f64, f64, f64)> = pairs
        .iter()
        .map(|(g, c)| {
            g.iter().zip(c).fold((0.0, 0.0, 0.0), |(gc, cc, raw), (g, c)| {
                let gt = g.minus_scaled(1.0, &g_bar);
                let ct = c.minus_scaled(1.0, &c_bar);
                (gc + gt.dot(&ct), cc + ct.dot(&ct), raw + c.dot(c))
            })
        })
        .collect();
    let total_gc: f64 = sums.iter().map(|s| s.0).sum();
    let total_cc: f64 = sums.iter().map(|s| s.1).sum();
    let total_raw: f64 = sums.iter().map(|s| s.2).sum();

    Ok(sets
        .iter()
        .zip(&sums)
        .map(|(set, &(gc, cc, raw))| {
            let n_u = set.n() as f64;
            let a = (n - set.n()) as f64;
            let w = 2.0 * a * a;
            AlphaTerms {
                numerator: w * gc / n_u + (total_gc - gc),
                denominator: w * cc / n_u + (total_cc - cc),
                raw_denominator: w * raw / n_u + (total_raw - raw),
            }
        })
        .collect())
}

/// Closed-form variance-minimizing coefficient for client `u`.
pub fn optimal_alpha(sets: &[ClientGradSet], u: ClientId) -> Result<f64> {
    let idx = sets
        .iter()
        .position(|s| s.client_id == u)
        .ok_or(Error::UnknownClient(u))?;
    alpha_terms(sets)?[idx].ratio()
}

/// One coefficient for the whole round: the stationary point of the
/// size-weighted sum of the per-client objectives, i.e. the ratio of
/// size-weighted numerators to size-weighted denominators.
pub fn pooled_optimal_alpha(sets: &[ClientGradSet]) -> Result<f64> {
    let terms = alpha_terms(sets)?;
    let mut pooled = AlphaTerms {
        numerator: 0.0,
        denominator: 0.0,
        raw_denominator: 0.0,
    };
    for (set, t) in sets.iter().zip(&terms) {
        let w = set.n() as f64;
        pooled.numerator += w * t.numerator;
        pooled.denominator += w * t.denominator;
        pooled.raw_denominator += w * t.raw_denominator;
    }
    pooled.ratio()
}

/// Plug-in difference `Var[h(α)] - Var[h_s(α)]` between the networked
/// per-sample estimator and the client-only one, from a single round.
pub fn variance_gap(sets: &[ClientGradSet], alpha: f64) -> Result<f64> {
    variance_gap_replicated(std::slice::from_ref(&sets.to_vec()), alpha)
}

/// As [`variance_gap`], with each expectation averaged over independent
/// replicate rounds sharing one client layout.
///
/// Per client `u`, with `a = n - n_u`, `S_α = Σ_{j∉u} (g_j - α c_j)` and
/// `S_0 = Σ_{j∉u} g_j`:
///
/// ```text
///   gap_u = E[|S_α|²] / a² + 2 E[g_u]·E[S_0] / a - |E[S_0]|² / a²
/// ```
///
/// and the result is `Σ_u (n_u / n) gap_u`. Negative means the networked
/// form has the smaller variance. A single client gives 0.
pub fn variance_gap_replicated(rounds: &[Vec<ClientGradSet>], alpha: f64) -> Result<f64> {
    let first = rounds.first().ok_or(Error::Empty)?;
    if first.is_empty() {
        return Err(Error::Empty);
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite);
    }
    let layout: Vec<(ClientId, usize)> = first.iter().map(|s| (s.client_id, s.n())).collect();
    for round in rounds {
        let this: Vec<(ClientId, usize)> = round.iter().map(|s| (s.client_id, s.n())).collect();
        if this != layout {
            return Err(Error::InvalidArgument(
                "replicate rounds must share one client layout".into(),
            ));
        }
        unique_ids(round)?;
    }
    for set in first {
        if set.n() < 2 {
            return Err(Error::TooFewSamples {
                what: "variance gap",
                needed: 2,
                got: set.n(),
            });
        }
    }
    if layout.len() == 1 {
        return Ok(0.0);
    }

    let m = layout.len();
    let n: usize = layout.iter().map(|(_, k)| k).sum();
    let dim = first[0].per_sample.first().map(GradVec::dim).ok_or(Error::Empty)?;
    let mut mean_g = vec![GradVec::zeros(dim); m];
    let mut mean_s0 = vec![GradVec::zeros(dim); m];
    let mut mean_sq = vec![0.0; m];

    for round in rounds {
        let mut raw_sums = Vec::with_capacity(m);
        let mut reshaped_sums = Vec::with_capacity(m);
        for set in round {
            let (g, c) = baseline_pairs(set)?;
            let raw = numeric::sum(&g)?;
            let mut reshaped = raw.clone();
            reshaped.add_scaled(-alpha, &numeric::sum(&c)?);
            raw_sums.push(raw);
            reshaped_sums.push(reshaped);
        }
        let raw_total = numeric::sum(&raw_sums)?;
        let reshaped_total = numeric::sum(&reshaped_sums)?;
        for u in 0..m {
            let n_u = layout[u].1 as f64;
            mean_g[u].add_scaled(1.0 / n_u, &raw_sums[u]);
            mean_s0[u].add_scaled(1.0, &raw_total.minus_scaled(1.0, &raw_sums[u]));
            mean_sq[u] += norm_sq(&reshaped_total.minus_scaled(1.0, &reshaped_sums[u]));
        }
    }

    let r = rounds.len() as f64;
    let mut gap = 0.0;
    for u in 0..m {
        let n_u = layout[u].1 as f64;
        let a = n as f64 - n_u;
        let eg = mean_g[u].scaled(1.0 / r);
        let es0 = mean_s0[u].scaled(1.0 / r);
        let esq = mean_sq[u] / r;
        let gap_u = esq / (a * a) + 2.0 * eg.dot(&es0) / a - norm_sq(&es0) / (a * a);
        gap += n_u / n as f64 * gap_u;
    }
    if !gap.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(gap)
}

/// `clamp(α - γ · Δ, 0, 1)`.
pub fn alpha_descent_update(alpha_u: f64, gamma: f64, delta_norm_sq: f64) -> Result<f64> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {gamma}"
        )));
    }
    if !delta_norm_sq.is_finite() || !alpha_u.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok((alpha_u - gamma * delta_norm_sq).clamp(0.0, 1.0))
}

/// Central difference of `‖client_aggregate(client_reshape(set, α))‖²` in α.
pub fn aggregate_norm_sq_slope(set: &ClientGradSet, alpha: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let at = |a: f64| -> Result<f64> {
        let r = client_reshape(set, a)?;
        Ok(norm_sq(&client_aggregate(&r, ClientWeighting::Uniform)?))
    };
    let slope = (at(alpha + eps)? - at(alpha - eps)?) / (2.0 * eps);
    if !slope.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(slope)
}
