//! One-sided Wilcoxon signed-rank test for paired differences.

use serde::Serialize;
use statrs::function::erf::erfc;

use super::metrics::midranks;
use crate::error::{Result, VlaadError};

/// Largest effective sample size evaluated by full sign enumeration.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    NormalCc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    #[serde(rename = "W")]
    pub w: f64,
    /// Number of non-zero differences.
    #[serde(rename = "n")]
    pub n_effective: usize,
    /// `P(W_null >= W)` under the symmetric null.
    #[serde(rename = "p")]
    pub p_one_sided: f64,
    pub method: WilcoxonMethod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonOptions {
    pub exact_max_n: usize,
    pub continuity_correction: bool,
}

impl Default for WilcoxonOptions {
    fn default() -> Self {
        Self {
            exact_max_n: EXACT_MAX_N,
            continuity_correction: true,
        }
    }
}

pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(deltas, WilcoxonOptions::default())
}

pub fn wilcoxon_signed_rank_with(deltas: &[f64], opts: WilcoxonOptions) -> Result<WilcoxonResult> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(VlaadError::NonFinite("paired differences"));
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(VlaadError::invalid("all paired differences are zero"));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w: f64 = ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();

    if n <= opts.exact_max_n {
        // Midranks are multiples of 1/2, so doubled ranks are exact integers.
        let doubled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
        let p = exact_upper_tail(&doubled, (w * 2.0).round() as u64);
        return Ok(WilcoxonResult {
            w,
            n_effective: n,
            p_one_sided: p,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups(&abs).map(|t| (t * t * t - t) / 48.0).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let cc = if opts.continuity_correction { 0.5 } else { 0.0 };
    let z = (w - mean - cc) / var.sqrt();
    Ok(WilcoxonResult {
        w,
        n_effective: n,
        p_one_sided: 0.5 * erfc(z / std::f64::consts::SQRT_2),
        method: if opts.continuity_correction {
            WilcoxonMethod::NormalCc
        } else {
            WilcoxonMethod::Normal
        },
    })
}

fn tie_groups(values: &[f64]) -> impl Iterator<Item = f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        groups.push((j - i) as f64);
        i = j;
    }
    groups.into_iter()
}

/// Fraction of the `2^n` sign patterns whose positive-rank sum is at least
/// `threshold`. Patterns are visited in Gray-code order so each step
/// changes the running sum by one rank.
pub fn exact_upper_tail(ranks: &[u64], threshold: u64) -> f64 {
    let n = ranks.len();
    assert!(n < 64, "sign enumeration over {n} ranks");
    let total: u64 = 1 << n;
    let mut sum: u64 = 0;
    let mut hits: u64 = u64::from(threshold == 0);
    let mut signs: u64 = 0;
    for i in 1..total {
        let bit = i.trailing_zeros() as usize;
        signs ^= 1 << bit;
        if signs & (1 << bit) != 0 {
            sum += ranks[bit];
        } else {
            sum -= ranks[bit];
        }
        if sum >= threshold {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Exact one-sided p-value for an untied sample of size `n` with statistic `w`.
pub fn exact_p_value(n: usize, w: u64) -> f64 {
    let ranks: Vec<u64> = (1..=n as u64).collect();
    exact_upper_tail(&ranks, w)
}
