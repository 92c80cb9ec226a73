//! Exhaustive finite-support checks of the source-combination bound.
//!
//! Sources are distributions over a shared finite input set with per-input
//! label conditionals. The target is a `lambda`-mixture of the sources. The
//! combined predictor weights each source's optimal predictor by
//! `lambda_k Q_k(x) / sum_j lambda_j Q_j(x)`, and its expected loss on the
//! target is compared against every single source predictor.
//!
//! The bound is checked link by link:
//!
//! 1. `L(Q_T, theta_T) <= E_{Q_T} sum_i w_i(x) L(theta_i(x), y)` (convexity),
//! 2. that expectation equals `sum_i lambda_i L(Q_i, theta_i)`; this needs the
//!    sources to agree on `P(y|x)` wherever they overlap, and is only checked
//!    for such instances,
//! 3. `sum_i lambda_i L(Q_i, theta_i) <= sum_i lambda_i L(Q_i, theta_j)` for every `j`,
//! 4. `sum_i lambda_i L(Q_i, theta_j) = L(Q_T, theta_j)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::argmin;

/// Stand-in for an infinite expected loss.
pub const SATURATED_LOSS: f64 = 1e18;
pub const DEFAULT_SLACK: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `-ln p_y`
    #[default]
    CrossEntropy,
    /// `||p - e_y||^2`
    SquaredError,
}

impl Loss {
    /// Pointwise loss; `None` means infinite.
    pub fn eval(self, p: &[f64], y: usize) -> Option<f64> {
        match self {
            Loss::CrossEntropy => (p[y] > 0.0).then(|| -p[y].ln()),
            Loss::SquaredError => Some(
                p.iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let t = if k == y { 1.0 } else { 0.0 };
                        (v - t) * (v - t)
                    })
                    .sum(),
            ),
        }
    }
}

/// An expected loss, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub saturated: bool,
}

impl LossValue {
    fn finite(value: f64) -> Self {
        Self { value, saturated: false }
    }

    const INFINITE: Self = Self {
        value: SATURATED_LOSS,
        saturated: true,
    };

    /// `self <= other + slack`, treating saturated values as +inf.
    pub fn le(self, other: Self, slack: f64) -> bool {
        match (self.saturated, other.saturated) {
            (_, true) => true,
            (true, false) => false,
            _ => self.value <= other.value + slack,
        }
    }

    /// Strict `<` with saturated values as +inf.
    pub fn lt(self, other: Self) -> bool {
        match (self.saturated, other.saturated) {
            (false, true) => true,
            (true, _) => false,
            _ => self.value < other.value,
        }
    }

    pub fn approx_eq(self, other: Self, tol: f64) -> bool {
        match (self.saturated, other.saturated) {
            (true, true) => true,
            (false, false) => (self.value - other.value).abs() <= tol * self.value.abs().max(1.0),
            _ => false,
        }
    }

    /// Amount by which `self` exceeds `other` (0 when within bound or saturated).
    fn excess_over(self, other: Self) -> f64 {
        if self.saturated || other.saturated {
            0.0
        } else {
            (self.value - other.value).max(0.0)
        }
    }
}

fn on_simplex(row: &[f64]) -> bool {
    row.iter().all(|&v| v >= 0.0 && v.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

/// Finite joint distribution: input marginal and per-input label conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDomain {
    marginal: Vec<f64>,
    conditionals: Vec<Vec<f64>>,
}

impl DiscreteDomain {
    pub fn new(marginal: Vec<f64>, conditionals: Vec<Vec<f64>>) -> Result<Self> {
        if marginal.is_empty() || marginal.len() != conditionals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} marginal entries for {} conditional rows",
                marginal.len(),
                conditionals.len()
            )));
        }
        if !on_simplex(&marginal) {
            return Err(Error::InvalidArgument("input marginal is not a distribution".into()));
        }
        let k = conditionals[0].len();
        if k == 0 || conditionals.iter().any(|r| r.len() != k || !on_simplex(r)) {
            return Err(Error::InvalidArgument("conditional rows must be distributions of equal length".into()));
        }
        Ok(Self { marginal, conditionals })
    }

    pub fn support(&self) -> usize {
        self.marginal.len()
    }

    pub fn classes(&self) -> usize {
        self.conditionals[0].len()
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn conditionals(&self) -> &[Vec<f64>] {
        &self.conditionals
    }

    /// Joint probability of `(x, y)`.
    pub fn joint(&self, x: usize, y: usize) -> f64 {
        self.marginal[x] * self.conditionals[x][y]
    }
}

/// One prediction row per support point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPredictor {
    rows: Vec<Vec<f64>>,
}

impl TabularPredictor {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| !on_simplex(r)) {
            return Err(Error::InvalidArgument("predictor rows must be distributions".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }
}

fn uniform_row(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Minimizer of the expected cross-entropy (and of the squared error): the
/// true conditional on the support, uniform elsewhere.
pub fn optimal_predictor(domain: &DiscreteDomain) -> TabularPredictor {
    let k = domain.classes();
    let rows = domain
        .marginal
        .iter()
        .zip(&domain.conditionals)
        .map(|(&q, row)| if q > 0.0 { row.clone() } else { uniform_row(k) })
        .collect();
    TabularPredictor { rows }
}

/// `sum_x Q(x) sum_y P(y|x) L(theta(x), y)`.
pub fn expected_loss(domain: &DiscreteDomain, predictor: &TabularPredictor, loss: Loss) -> Result<LossValue> {
    if predictor.rows.len() != domain.support() || predictor.rows[0].len() != domain.classes() {
        return Err(Error::InvalidArgument("predictor does not match the domain".into()));
    }
    let mut total = 0.0;
    for x in 0..domain.support() {
        for y in 0..domain.classes() {
            let mass = domain.joint(x, y);
            if mass == 0.0 {
                continue;
            }
            match loss.eval(&predictor.rows[x], y) {
                Some(l) => total += mass * l,
                None => return Ok(LossValue::INFINITE),
            }
        }
    }
    Ok(LossValue::finite(total))
}

fn validate_family(domains: &[DiscreteDomain], lambda: &[f64]) -> Result<()> {
    let first = domains.first().ok_or(Error::Empty("source domains"))?;
    if lambda.len() != domains.len() {
        return Err(Error::InvalidArgument(format!("{} mixture weights for {} sources", lambda.len(), domains.len())));
    }
    if !on_simplex(lambda) {
        return Err(Error::InvalidArgument("mixture weights must lie on the simplex".into()));
    }
    if domains.iter().any(|d| d.support() != first.support() || d.classes() != first.classes()) {
        return Err(Error::InvalidArgument("all sources need the same support and class count".into()));
    }
    Ok(())
}

/// `Q_T = sum_k lambda_k Q_k`; rows off the target support are uniform.
pub fn mixture(domains: &[DiscreteDomain], lambda: &[f64]) -> Result<DiscreteDomain> {
    validate_family(domains, lambda)?;
    let (m, k) = (domains[0].support(), domains[0].classes());
    let mut marginal = vec![0.0; m];
    let mut conditionals = vec![vec![0.0; k]; m];
    for x in 0..m {
        for (d, &l) in domains.iter().zip(lambda) {
            marginal[x] += l * d.marginal[x];
            for (y, c) in conditionals[x].iter_mut().enumerate() {
                *c += l * d.joint(x, y);
            }
        }
        if marginal[x] > 0.0 {
            let total: f64 = conditionals[x].iter().sum();
            conditionals[x].iter_mut().for_each(|v| *v /= total);
        } else {
            conditionals[x] = uniform_row(k);
        }
    }
    let total: f64 = marginal.iter().sum();
    marginal.iter_mut().for_each(|v| *v /= total);
    DiscreteDomain::new(marginal, conditionals)
}

/// Per-input combination weights `lambda_k Q_k(x) / sum_j lambda_j Q_j(x)`;
/// `None` where no source with positive `lambda` has mass.
pub fn lemma_weights(domains: &[DiscreteDomain], lambda: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    validate_family(domains, lambda)?;
    Ok((0..domains[0].support())
        .map(|x| {
            let raw: Vec<f64> = domains.iter().zip(lambda).map(|(d, &l)| l * d.marginal[x]).collect();
            let total: f64 = raw.iter().sum();
            (total > 0.0).then(|| raw.iter().map(|v| v / total).collect())
        })
        .collect())
}

/// The density-ratio-weighted combination of the source predictors.
pub fn lemma_target_predictor(
    domains: &[DiscreteDomain],
    lambda: &[f64],
    predictors: &[TabularPredictor],
) -> Result<TabularPredictor> {
    if predictors.len() != domains.len() {
        return Err(Error::InvalidArgument("one predictor per source is required".into()));
    }
    let k = domains[0].classes();
    let rows = lemma_weights(domains, lambda)?
        .into_iter()
        .enumerate()
        .map(|(x, w)| match w {
            None => uniform_row(k),
            Some(w) => {
                let mut row = vec![0.0; k];
                for (p, &wk) in predictors.iter().zip(&w) {
                    for (o, &v) in row.iter_mut().zip(&p.rows[x]) {
                        *o += wk * v;
                    }
                }
                row
            }
        })
        .collect();
    Ok(TabularPredictor { rows })
}

/// Whether every pair of sources agrees on `P(y|x)` at inputs where both have mass.
pub fn shares_conditionals(domains: &[DiscreteDomain]) -> bool {
    let m = domains[0].support();
    (0..m).all(|x| {
        let rows: Vec<&Vec<f64>> = domains.iter().filter(|d| d.marginal[x] > 0.0).map(|d| &d.conditionals[x]).collect();
        rows.windows(2)
            .all(|w| w[0].iter().zip(w[1]).all(|(a, b)| (a - b).abs() <= 1e-15))
    })
}

/// Input-independent weights `lambda_k c_k / sum_j lambda_j c_j` obtained when
/// every source is uniform on the target support with scale `c_k`.
pub fn uniform_reduction(lambda: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != c.len() || lambda.is_empty() {
        return Err(Error::InvalidArgument("lambda and c must have the same nonzero length".into()));
    }
    if let Some(bad) = c.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("scaling factors must be positive, got {bad}")));
    }
    let raw: Vec<f64> = lambda.iter().zip(c).map(|(l, c)| l * c).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("mixture weights must not all be zero".into()));
    }
    Ok(raw.iter().map(|v| v / total).collect())
}

/// Sources that put mass `c_k` on each of the first `target_support` inputs
/// and the remainder on one private input each. Returns the family; inputs
/// `0..target_support` form the shared support.
pub fn uniform_marginal_family(target_support: usize, c: &[f64], conditionals: &[Vec<f64>]) -> Result<Vec<DiscreteDomain>> {
    let n = c.len();
    let m = target_support + n;
    if conditionals.len() != m {
        return Err(Error::InvalidArgument(format!("need {m} conditional rows")));
    }
    c.iter()
        .enumerate()
        .map(|(k, &ck)| {
            let rest = 1.0 - ck * target_support as f64;
            if !(ck > 0.0) || rest < -SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!("scale {ck} does not fit a distribution")));
            }
            let mut marginal = vec![ck; target_support];
            marginal.extend((0..n).map(|j| if j == k { rest.max(0.0) } else { 0.0 }));
            DiscreteDomain::new(marginal, conditionals.to_vec())
        })
        .collect()
}

/// Values computed for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    /// `L(Q_T, theta_T)`
    pub combined: LossValue,
    /// `L(Q_T, theta_j)` for each source predictor.
    pub per_source: Vec<LossValue>,
    /// Right-hand side of the convexity step.
    pub jensen_bound: LossValue,
    /// `sum_i lambda_i L(Q_i, theta_i)`.
    pub weighted_self_loss: LossValue,
    /// `sum_i lambda_i L(Q_i, theta_j)` for each `j`.
    pub weighted_cross_loss: Vec<LossValue>,
    pub best_source: usize,
    pub shares_conditionals: bool,
    pub strict_hypothesis: bool,
}

fn weighted_sum(lambda: &[f64], values: impl Iterator<Item = LossValue>) -> LossValue {
    let mut total = 0.0;
    for (&l, v) in lambda.iter().zip(values) {
        if l == 0.0 {
            continue;
        }
        if v.saturated {
            return LossValue::INFINITE;
        }
        total += l * v.value;
    }
    LossValue::finite(total)
}

/// Evaluates every quantity in the chain for one family. `target_override`
/// replaces the combined predictor (used to sanity-check the detector).
pub fn check_instance(
    domains: &[DiscreteDomain],
    lambda: &[f64],
    loss: Loss,
    target_override: Option<&TabularPredictor>,
) -> Result<InstanceCheck> {
    let predictors: Vec<TabularPredictor> = domains.iter().map(optimal_predictor).collect();
    let target = mixture(domains, lambda)?;
    let combined_predictor = match target_override {
        Some(p) => p.clone(),
        None => lemma_target_predictor(domains, lambda, &predictors)?,
    };
    let combined = expected_loss(&target, &combined_predictor, loss)?;
    let per_source = predictors
        .iter()
        .map(|p| expected_loss(&target, p, loss))
        .collect::<Result<Vec<_>>>()?;

    let weights = lemma_weights(domains, lambda)?;
    let mut jensen = 0.0;
    let mut jensen_saturated = false;
    'outer: for (x, w) in weights.iter().enumerate() {
        let Some(w) = w else { continue };
        for y in 0..target.classes() {
            let mass = target.joint(x, y);
            if mass == 0.0 {
                continue;
            }
            for (p, &wk) in predictors.iter().zip(w) {
                if wk == 0.0 {
                    continue;
                }
                match loss.eval(&p.rows[x], y) {
                    Some(l) => jensen += mass * wk * l,
                    None => {
                        jensen_saturated = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    let jensen_bound = if jensen_saturated {
        LossValue::INFINITE
    } else {
        LossValue::finite(jensen)
    };

    // cross[i][j] = L(Q_i, theta_j)
    let cross: Vec<Vec<LossValue>> = domains
        .iter()
        .map(|d| predictors.iter().map(|p| expected_loss(d, p, loss)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let weighted_self_loss = weighted_sum(lambda, (0..domains.len()).map(|i| cross[i][i]));
    let weighted_cross_loss = (0..domains.len())
        .map(|j| weighted_sum(lambda, (0..domains.len()).map(|i| cross[i][j])))
        .collect();

    let keys: Vec<f64> = per_source.iter().map(|v| v.value).collect();
    let best_source = argmin(&keys);
    let strict_hypothesis = lambda.iter().all(|&l| l > 0.0)
        && (0..domains.len()).any(|i| cross[i][i].lt(cross[i][best_source]) && strictly_below(cross[i][i], cross[i][best_source]));

    Ok(InstanceCheck {
        combined,
        per_source,
        jensen_bound,
        weighted_self_loss,
        weighted_cross_loss,
        best_source,
        shares_conditionals: shares_conditionals(domains),
        strict_hypothesis,
    })
}

/// Strict gap large enough not to be rounding noise.
fn strictly_below(a: LossValue, b: LossValue) -> bool {
    match (a.saturated, b.saturated) {
        (false, true) => true,
        (false, false) => b.value - a.value > 1e-12 * b.value.abs().max(1.0),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trial: usize,
    pub check: String,
    pub lhs: LossValue,
    pub rhs: LossValue,
    pub lambda: Vec<f64>,
    pub domains: Vec<DiscreteDomain>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Sources share `P(y|x)`; only the input marginals differ.
    CovariateShift,
    /// Each source draws its own conditionals.
    ConditionalShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_support: usize,
    pub max_classes: usize,
    pub max_sources: usize,
    pub loss: Loss,
    pub slack: f64,
    /// Replace the combined predictor by a deliberately bad one.
    #[serde(skip)]
    pub corrupt_combined: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            max_support: 6,
            max_classes: 3,
            max_sources: 4,
            loss: Loss::CrossEntropy,
            slack: DEFAULT_SLACK,
            corrupt_combined: false,
        }
    }
}

/// Summary of a randomized run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub violations: Vec<Violation>,
    pub max_slack_used: f64,
    pub strict_cases_checked: usize,
    /// Instances where the equality after the convexity step was checked.
    pub shared_conditional_cases: usize,
    pub covariate_shift_instances: usize,
    pub conditional_shift_instances: usize,
    pub loss: Loss,
    /// Parts of the claim this run does not cover.
    pub notes: Vec<String>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_simplex(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|v| v / total).collect()
}

fn random_conditionals(rng: &mut impl Rng, m: usize, k: usize, deterministic: bool) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            if deterministic {
                let mut row = vec![0.0; k];
                row[rng.random_range(0..k)] = 1.0;
                row
            } else {
                random_simplex(rng, k)
            }
        })
        .collect()
}

/// Draws one random family and mixture weights.
pub fn random_instance(rng: &mut impl Rng, cfg: &TrialConfig, family: Family) -> (Vec<DiscreteDomain>, Vec<f64>) {
    let m = rng.random_range(1..=cfg.max_support.max(1));
    let k = rng.random_range(2..=cfg.max_classes.max(2));
    let n = rng.random_range(1..=cfg.max_sources.max(1));
    let deterministic = rng.random_bool(0.25);
    let shared = random_conditionals(rng, m, k, deterministic);
    let domains = (0..n)
        .map(|_| {
            let mut keep: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
            if !keep.iter().any(|&b| b) {
                let i = rng.random_range(0..m);
                keep[i] = true;
            }
            let raw: Vec<f64> = keep.iter().map(|&b| if b { Exp1.sample(rng) } else { 0.0 }).collect();
            let total: f64 = raw.iter().sum();
            let marginal = raw.iter().map(|v| v / total).collect();
            let conditionals = match family {
                Family::CovariateShift => shared.clone(),
                Family::ConditionalShift => random_conditionals(rng, m, k, deterministic),
            };
            DiscreteDomain::new(marginal, conditionals).expect("generated rows are distributions")
        })
        .collect();
    let mut lambda = random_simplex(rng, n);
    if n > 1 && rng.random_bool(0.2) {
        lambda[rng.random_range(0..n)] = 0.0;
        let total: f64 = lambda.iter().sum();
        lambda.iter_mut().for_each(|v| *v /= total);
    }
    (domains, lambda)
}

/// Moves each row's mass toward the labels the target finds least likely.
fn corrupt(target: &DiscreteDomain) -> TabularPredictor {
    let rows = target
        .conditionals()
        .iter()
        .map(|row| {
            let raw: Vec<f64> = row.iter().map(|&p| 1.0 - p + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect();
    TabularPredictor { rows }
}

/// Checks every link of the chain on one family, appending failures.
fn audit(trial: usize, domains: &[DiscreteDomain], lambda: &[f64], cfg: &TrialConfig, report: &mut LemmaReport) -> Result<()> {
    let override_p = if cfg.corrupt_combined {
        Some(corrupt(&mixture(domains, lambda)?))
    } else {
        None
    };
    let c = check_instance(domains, lambda, cfg.loss, override_p.as_ref())?;
    let slack = cfg.slack;
    let mut fail = |check: &str, lhs: LossValue, rhs: LossValue| {
        report.violations.push(Violation {
            trial,
            check: check.to_string(),
            lhs,
            rhs,
            lambda: lambda.to_vec(),
            domains: domains.to_vec(),
        });
    };

    let best = c.per_source[c.best_source];
    if !c.combined.le(best, slack) {
        fail("combined <= best single source", c.combined, best);
    }
    let mut max_excess = c.combined.excess_over(best);

    if !c.combined.le(c.jensen_bound, slack) {
        fail("convexity step", c.combined, c.jensen_bound);
    }
    max_excess = max_excess.max(c.combined.excess_over(c.jensen_bound));

    if c.shares_conditionals {
        if !c.jensen_bound.approx_eq(c.weighted_self_loss, slack) {
            fail("mixture identity after convexity step", c.jensen_bound, c.weighted_self_loss);
        }
        if !c.combined.le(c.weighted_self_loss, slack) {
            fail("combined <= weighted own-source loss", c.combined, c.weighted_self_loss);
        }
        max_excess = max_excess.max(c.combined.excess_over(c.weighted_self_loss));
    }

    for (j, (&cross, &direct)) in c.weighted_cross_loss.iter().zip(&c.per_source).enumerate() {
        if !c.weighted_self_loss.le(cross, slack) {
            fail(&format!("source optimality vs predictor {j}"), c.weighted_self_loss, cross);
        }
        max_excess = max_excess.max(c.weighted_self_loss.excess_over(cross));
        if !cross.approx_eq(direct, slack) {
            fail(&format!("mixture linearity for predictor {j}"), cross, direct);
        }
    }

    if c.strict_hypothesis {
        report.strict_cases_checked += 1;
        if !c.combined.lt(best) {
            fail("strict improvement", c.combined, best);
        }
    }
    if c.shares_conditionals {
        report.shared_conditional_cases += 1;
    }
    report.max_slack_used = report.max_slack_used.max(max_excess);
    Ok(())
}

/// Runs `cfg.trials` random instances, alternating the two families.
pub fn verify_lemma(cfg: &TrialConfig) -> Result<LemmaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = LemmaReport {
        trials: cfg.trials,
        violations: Vec::new(),
        max_slack_used: 0.0,
        strict_cases_checked: 0,
        shared_conditional_cases: 0,
        covariate_shift_instances: 0,
        conditional_shift_instances: 0,
        loss: cfg.loss,
        notes: vec!["pseudo-label loss half of the claim is not checked; only the supervised chain is".into()],
    };
    for trial in 0..cfg.trials {
        let family = if trial % 2 == 0 {
            report.covariate_shift_instances += 1;
            Family::CovariateShift
        } else {
            report.conditional_shift_instances += 1;
            Family::ConditionalShift
        };
        let (domains, lambda) = random_instance(&mut rng, cfg, family);
        audit(trial, &domains, &lambda, cfg, &mut report)?;
    }
    Ok(report)
}

/// Checks a caller-supplied family.
pub fn verify_family(domains: &[DiscreteDomain], lambda: &[f64], cfg: &TrialConfig) -> Result<LemmaReport> {
    let mut report = LemmaReport {
        trials: 1,
        violations: Vec::new(),
        max_slack_used: 0.0,
        strict_cases_checked: 0,
        shared_conditional_cases: 0,
        covariate_shift_instances: 0,
        conditional_shift_instances: 0,
        loss: cfg.loss,
        notes: Vec::new(),
    };
    audit(0, domains, lambda, cfg, &mut report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(marginal: &[f64], cond: &[&[f64]]) -> DiscreteDomain {
        DiscreteDomain::new(marginal.to_vec(), cond.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn optimal_predictor_rows() {
        let d = dom(&[0.5, 0.5, 0.0], &[&[1.0, 0.0], &[0.7, 0.3], &[0.0, 1.0]]);
        let p = optimal_predictor(&d);
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert_eq!(p.row(1), &[0.7, 0.3]);
        assert_eq!(p.row(2), &[0.5, 0.5]);
    }

    /// Golden-section minimization of `q -> E[-ln]` over the 2-class simplex.
    fn golden_section(f: impl Fn(f64) -> f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (1e-12, 1.0 - 1e-12);
        while b - a > 1e-10 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    }

    #[test]
    fn optimal_rows_match_one_dimensional_search() {
        let d = dom(&[0.2, 0.3, 0.5], &[&[0.7, 0.3], &[0.15, 0.85], &[0.5, 0.5]]);
        let p = optimal_predictor(&d);
        for x in 0..3 {
            let c = d.conditionals()[x].clone();
            for loss in [Loss::CrossEntropy, Loss::SquaredError] {
                let q = golden_section(|q| {
                    let row = [q, 1.0 - q];
                    c[0] * loss.eval(&row, 0).unwrap() + c[1] * loss.eval(&row, 1).unwrap()
                });
                assert!((q - p.row(x)[0]).abs() < 1e-6, "x={x} {loss:?}: {q}");
            }
        }
    }

    #[test]
    fn optimal_predictor_is_locally_minimal() {
        let d = dom(&[0.1, 0.6, 0.3], &[&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], &[0.3, 0.3, 0.4]]);
        let p = optimal_predictor(&d);
        for loss in [Loss::CrossEntropy, Loss::SquaredError] {
            let base = expected_loss(&d, &p, loss).unwrap().value;
            for x in 0..3 {
                for a in 0..3 {
                    for b in 0..3 {
                        if a == b {
                            continue;
                        }
                        let mut rows = p.rows().to_vec();
                        rows[x][a] += 1e-3;
                        rows[x][b] -= 1e-3;
                        let moved = TabularPredictor::new(rows).unwrap();
                        assert!(expected_loss(&d, &moved, loss).unwrap().value >= base);
                    }
                }
            }
        }
    }

    #[test]
    fn expected_loss_closed_forms() {
        let d = dom(&[0.4, 0.6], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let perfect = optimal_predictor(&d);
        assert_eq!(expected_loss(&d, &perfect, Loss::CrossEntropy).unwrap().value, 0.0);
        let uniform = TabularPredictor::new(vec![vec![0.5, 0.5]; 2]).unwrap();
        assert!((expected_loss(&d, &uniform, Loss::CrossEntropy).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let wrong = TabularPredictor::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let v = expected_loss(&d, &wrong, Loss::CrossEntropy).unwrap();
        assert!(v.saturated);
        assert_eq!(v.value, SATURATED_LOSS);
    }

    #[test]
    fn lemma_predictor_special_cases() {
        let a = dom(&[0.5, 0.5, 0.0, 0.0], &[&[1.0, 0.0], &[0.3, 0.7], &[0.5, 0.5], &[0.5, 0.5]]);
        let b = dom(&[0.0, 0.0, 0.25, 0.75], &[&[0.5, 0.5], &[0.5, 0.5], &[0.9, 0.1], &[0.0, 1.0]]);
        let preds = vec![optimal_predictor(&a), optimal_predictor(&b)];
        let t = lemma_target_predictor(&[a.clone(), b.clone()], &[0.4, 0.6], &preds).unwrap();
        // disjoint supports: each source owns its inputs
        assert_eq!(t.row(0), preds[0].row(0));
        assert_eq!(t.row(1), preds[0].row(1));
        assert_eq!(t.row(2), preds[1].row(2));
        assert_eq!(t.row(3), preds[1].row(3));

        let single = lemma_target_predictor(std::slice::from_ref(&a), &[1.0], &preds[..1]).unwrap();
        assert_eq!(single, preds[0]);

        // identical marginals: weights are lambda itself
        let c = dom(&[0.5, 0.5, 0.0, 0.0], &[&[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5], &[0.5, 0.5]]);
        let w = lemma_weights(&[a, c], &[0.3, 0.7]).unwrap();
        for wx in &w[..2] {
            let wx = wx.as_ref().unwrap();
            assert!((wx[0] - 0.3).abs() < 1e-15 && (wx[1] - 0.7).abs() < 1e-15);
        }
        assert!(w[2].is_none());
    }

    #[test]
    fn degenerate_families_hold_with_equality() {
        let a = dom(&[0.3, 0.7], &[&[0.6, 0.4], &[0.1, 0.9]]);
        let check = check_instance(std::slice::from_ref(&a), &[1.0], Loss::CrossEntropy, None).unwrap();
        assert_eq!(check.combined, check.per_source[0]);

        let check = check_instance(&[a.clone(), a.clone()], &[0.5, 0.5], Loss::CrossEntropy, None).unwrap();
        assert!(check.combined.approx_eq(check.per_source[0], 1e-15));
        assert!(!check.strict_hypothesis);
    }

    #[test]
    fn conditional_shift_breaks_only_the_mixture_identity() {
        // Same input, opposite deterministic labels.
        let a = dom(&[1.0], &[&[1.0, 0.0]]);
        let b = dom(&[1.0], &[&[0.0, 1.0]]);
        let c = check_instance(&[a, b], &[0.5, 0.5], Loss::CrossEntropy, None).unwrap();
        assert!(!c.shares_conditionals);
        assert!((c.combined.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(c.weighted_self_loss.value, 0.0);
        assert!(c.per_source.iter().all(|v| v.saturated));
        assert!(c.strict_hypothesis);
        assert!(c.combined.lt(c.per_source[c.best_source]));
    }

    #[test]
    fn uniform_reduction_values() {
        assert_eq!(uniform_reduction(&[0.2, 0.8], &[3.0, 3.0]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(uniform_reduction(&[0.5, 0.5], &[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert!(uniform_reduction(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn small_randomized_run_is_clean() {
        let cfg = TrialConfig {
            trials: 200,
            ..TrialConfig::default()
        };
        let r = verify_lemma(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.violations.first());
        assert!(r.strict_cases_checked > 0);
    }

    #[test]
    fn squared_error_run_is_clean() {
        let cfg = TrialConfig {
            trials: 200,
            seed: 3,
            loss: Loss::SquaredError,
            ..TrialConfig::default()
        };
        let r = verify_lemma(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.violations.first());
    }

    #[test]
    fn corrupted_predictor_is_caught() {
        let cfg = TrialConfig {
            trials: 50,
            corrupt_combined: true,
            ..TrialConfig::default()
        };
        assert!(!verify_lemma(&cfg).unwrap().passed());
    }

    #[test]
    fn zero_trials_is_an_empty_pass() {
        let r = verify_lemma(&TrialConfig {
            trials: 0,
            ..TrialConfig::default()
        })
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.strict_cases_checked, 0);
    }
}
