//! Condition comparison statistics: Mann–Whitney U with average ranks for
//! ties, two-sided p-values, and the common-language effect size.
//!
//! `U` is always the statistic of the first group: the number of
//! cross-group pairs in which the first group's value is larger, with ties
//! counted as one half. The common-language effect size is `U / (n1 * n2)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::telemetry::{Condition, EngagementRecord};

/// Samples with at most this many pooled values get an exact p-value in `Auto` mode.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("U = {u} outside [0, {max}]")]
    URangeViolation { u: f64, max: f64 },
    #[error("ranking holds {ranked} values but n1 + n2 = {expected}")]
    SizeMismatch { ranked: usize, expected: usize },
    #[error("exact null distribution too large to count")]
    TooLargeForExact,
    #[error("no records for condition {0}")]
    MissingCondition(Condition),
}

/// Average ranks (1-based) aligned with the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub values: Vec<f64>,
    pub ranks: Vec<f64>,
    /// Sizes of groups of equal values, in ascending value order (singletons included).
    pub tie_group_sizes: Vec<usize>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `Σ (t³ − t)` over tie groups.
    pub fn tie_term(&self) -> f64 {
        self.tie_group_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum()
    }

    pub fn all_tied(&self) -> bool {
        self.tie_group_sizes.len() == 1
    }
}

pub fn rank_with_ties(pooled: &[f64]) -> Result<Ranking, StatsError> {
    if pooled.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if let Some(&bad) = pooled.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFiniteValue(bad));
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));

    let mut ranks = vec![0.0; pooled.len()];
    let mut tie_group_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        tie_group_sizes.push(j - i);
        i = j;
    }
    Ok(Ranking {
        values: pooled.to_vec(),
        ranks,
        tie_group_sizes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UStatistic {
    pub u_a: f64,
    pub u_b: f64,
    /// Pooled ranking, `a` first then `b`.
    pub ranking: Ranking,
}

pub fn u_statistic(a: &[f64], b: &[f64]) -> Result<UStatistic, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranking = rank_with_ties(&pooled)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let rank_sum_a: f64 = ranking.ranks[..a.len()].iter().sum();
    let u_a = rank_sum_a - na * (na + 1.0) / 2.0;
    Ok(UStatistic {
        u_a,
        u_b: na * nb - u_a,
        ranking,
    })
}

/// `(U_a, U_b)`; the two always sum to `n_a * n_b`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    u_statistic(a, b).map(|u| (u.u_a, u.u_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PMode {
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
    /// Every pooled value identical; p is 1 by definition.
    DegenerateVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub p: f64,
    pub method: PMethod,
    /// Standardized statistic, for the normal approximation.
    pub z: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct POptions {
    pub mode: PMode,
    /// Subtract 0.5 from |U − μ| before standardizing.
    pub continuity_correction: bool,
}

fn check_u(u: f64, n1: usize, n2: usize) -> Result<(), StatsError> {
    if n1 == 0 || n2 == 0 {
        return Err(StatsError::EmptySample);
    }
    let max = (n1 * n2) as f64;
    if !(0.0..=max).contains(&u) {
        return Err(StatsError::URangeViolation { u, max });
    }
    Ok(())
}

/// Two-sided p-value for `U` under the rank null distribution of `ranking`.
pub fn p_two_sided(u: f64, n1: usize, n2: usize, ranking: &Ranking, opts: POptions) -> Result<PValue, StatsError> {
    check_u(u, n1, n2)?;
    if ranking.len() != n1 + n2 {
        return Err(StatsError::SizeMismatch {
            ranked: ranking.len(),
            expected: n1 + n2,
        });
    }
    if ranking.all_tied() {
        return Ok(PValue {
            p: 1.0,
            method: PMethod::DegenerateVariance,
            z: None,
        });
    }
    let exact = match opts.mode {
        PMode::Exact => true,
        PMode::Normal => false,
        PMode::Auto => n1 + n2 <= EXACT_MAX_N,
    };
    if exact {
        exact_p(u, n1, n2, ranking)
    } else {
        Ok(normal_p(u, n1, n2, ranking.tie_term(), opts.continuity_correction))
    }
}

/// Normal approximation with tie-corrected variance.
pub fn normal_p(u: f64, n1: usize, n2: usize, tie_term: f64, continuity_correction: bool) -> PValue {
    let (f1, f2) = (n1 as f64, n2 as f64);
    let n = f1 + f2;
    let mu = f1 * f2 / 2.0;
    let variance = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(variance > 0.0) {
        return PValue {
            p: 1.0,
            method: PMethod::DegenerateVariance,
            z: None,
        };
    }
    let sigma = variance.sqrt();
    let mut dev = u - mu;
    if continuity_correction {
        dev = dev.signum() * (dev.abs() - 0.5).max(0.0);
    }
    let z = dev / sigma;
    PValue {
        p: erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0),
        method: PMethod::NormalApprox,
        z: Some(z),
    }
}

/// Exact permutation p-value.
///
/// Counts, over all `C(n1 + n2, n1)` ways to draw the first group from the
/// pooled ranks, those whose U is at least as far from `n1 * n2 / 2` as the
/// observed one. Ranks are multiples of ½, so the count runs over doubled
/// rank sums with a subset-size DP instead of listing subsets.
pub fn exact_p(u: f64, n1: usize, n2: usize, ranking: &Ranking) -> Result<PValue, StatsError> {
    let doubled: Vec<usize> = ranking.ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0u128; max_sum + 1]; n1 + 1];
    ways[0][0] = 1;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0 {
                    ways[k][s] = ways[k][s].checked_add(add).ok_or(StatsError::TooLargeForExact)?;
                }
            }
        }
    }
    // doubled U' = S2 − n1(n1+1); distance from the centre, doubled: |S2 − n1(n1+1) − n1 n2|
    let offset = (n1 * (n1 + 1)) as f64;
    let centre2 = (n1 * n2) as f64;
    let observed = (2.0 * u - centre2).abs();
    let (mut extreme, mut total) = (0u128, 0u128);
    for (s, &count) in ways[n1].iter().enumerate() {
        if count == 0 {
            continue;
        }
        total = total.checked_add(count).ok_or(StatsError::TooLargeForExact)?;
        if (s as f64 - offset - centre2).abs() >= observed - 1e-9 {
            extreme += count;
        }
    }
    Ok(PValue {
        p: (extreme as f64 / total as f64).min(1.0),
        method: PMethod::Exact,
        z: None,
    })
}

/// Common-language effect size: the chance a random first-group value beats
/// a random second-group value, ties counting half.
pub fn cles(u: f64, n1: usize, n2: usize) -> Result<f64, StatsError> {
    check_u(u, n1, n2)?;
    Ok(u / (n1 * n2) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); `None` below two values.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 0 {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    } else {
        sorted[n / 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PracticeTime,
    Attempts,
}

impl Metric {
    pub fn value(self, r: &EngagementRecord) -> f64 {
        match self {
            Metric::PracticeTime => r.practice_minutes,
            Metric::Attempts => r.attempts as f64,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::PracticeTime => "practice_time (minutes)",
            Metric::Attempts => "attempts",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "practice_time" => Ok(Metric::PracticeTime),
            "attempts" => Ok(Metric::Attempts),
            other => Err(format!("unknown metric `{other}` (expected practice_time or attempts)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub condition: Condition,
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub median: f64,
}

impl GroupSummary {
    fn of(condition: Condition, values: &[f64]) -> Self {
        GroupSummary {
            condition,
            n: values.len(),
            mean: mean(values),
            sd: sample_sd(values),
            median: median(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub metric: Metric,
    /// PC first, then CC.
    pub groups: Vec<GroupSummary>,
    pub u: f64,
    pub u_complement: f64,
    pub p_two_sided: f64,
    pub method: PMethod,
    pub z: Option<f64>,
    pub cles: f64,
}

/// Compares PC against CC on one metric.
pub fn condition_report(records: &[EngagementRecord], metric: Metric) -> Result<StatReport, StatsError> {
    let values = |c: Condition| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.condition == c)
            .map(|r| metric.value(r))
            .collect()
    };
    let (pc, cc) = (values(Condition::PC), values(Condition::CC));
    if pc.is_empty() {
        return Err(StatsError::MissingCondition(Condition::PC));
    }
    if cc.is_empty() {
        return Err(StatsError::MissingCondition(Condition::CC));
    }
    let stat = u_statistic(&pc, &cc)?;
    let p = p_two_sided(stat.u_a, pc.len(), cc.len(), &stat.ranking, POptions::default())?;
    Ok(StatReport {
        metric,
        groups: vec![GroupSummary::of(Condition::PC, &pc), GroupSummary::of(Condition::CC, &cc)],
        cles: cles(stat.u_a, pc.len(), cc.len())?,
        u: stat.u_a,
        u_complement: stat.u_b,
        p_two_sided: p.p,
        method: p.method,
        z: p.z,
    })
}

/// `.649`, `< .001`, `1.000`.
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "< .001".into()
    } else {
        strip_leading_zero(format!("{p:.3}"))
    }
}

/// `.69`, `1.00`.
pub fn format_cles(c: f64) -> String {
    strip_leading_zero(format!("{c:.2}"))
}

fn strip_leading_zero(s: String) -> String {
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

impl StatReport {
    /// `U = 2368.0, p < .001, CLES = .69`
    pub fn comparison_line(&self) -> String {
        let p = format_p(self.p_two_sided);
        let p = if p.starts_with('<') { format!("p {p}") } else { format!("p = {p}") };
        format!("U = {:.1}, {p}, CLES = {}", self.u, format_cles(self.cles))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric: {}", self.metric.label());
        let _ = writeln!(out, "{:<10} {:>5} {:>8} {:>8} {:>8}", "condition", "n", "M", "SD", "Median");
        for g in &self.groups {
            let sd = g.sd.map_or_else(|| "n/a".to_string(), |s| format!("{s:.1}"));
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>8.1} {:>8} {:>8.1}",
                g.condition.as_str(),
                g.n,
                g.mean,
                sd,
                g.median
            );
        }
        let method = match self.method {
            PMethod::Exact => "exact",
            PMethod::NormalApprox => "normal approximation",
            PMethod::DegenerateVariance => "all values tied",
        };
        let _ = writeln!(out, "{} ({method})", self.comparison_line());
        out
    }
}
