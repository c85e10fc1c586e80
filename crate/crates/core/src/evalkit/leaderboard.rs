//! CARLA leaderboard route scoring.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VlaadError};

pub const COLLISION_PEDESTRIAN: &str = "collisions_pedestrian";
pub const COLLISION_VEHICLE: &str = "collisions_vehicle";
pub const COLLISION_LAYOUT: &str = "collisions_layout";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeaderboardVersion {
    #[serde(rename = "v20")]
    V20,
    #[serde(rename = "v21")]
    V21,
}

/// Severity coefficients of the additive 2.1 penalty for collision types.
pub fn default_v21_coefficients() -> BTreeMap<String, f64> {
    [
        (COLLISION_PEDESTRIAN, 1.0),
        (COLLISION_VEHICLE, 0.70),
        (COLLISION_LAYOUT, 0.60),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Multiplicative 2.0 penalty factors (public leaderboard values).
pub fn default_v20_penalties() -> BTreeMap<String, f64> {
    [
        (COLLISION_PEDESTRIAN, 0.50),
        (COLLISION_VEHICLE, 0.60),
        (COLLISION_LAYOUT, 0.65),
        ("red_light", 0.70),
        ("stop_infraction", 0.80),
        ("scenario_timeout", 0.70),
        ("yield_emergency_vehicle_infraction", 0.70),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyParams {
    /// Per-type factors `p_j` in (0, 1].
    V20(BTreeMap<String, f64>),
    /// Per-type coefficients `c_j >= 0`.
    V21(BTreeMap<String, f64>),
}

impl PenaltyParams {
    pub fn defaults(version: LeaderboardVersion) -> Self {
        match version {
            LeaderboardVersion::V20 => PenaltyParams::V20(default_v20_penalties()),
            LeaderboardVersion::V21 => PenaltyParams::V21(default_v21_coefficients()),
        }
    }
}

/// `prod_j p_j^n_j` (2.0) or `1 / (1 + sum_j c_j n_j)` (2.1).
pub fn infraction_penalty(counts: &BTreeMap<String, i64>, params: &PenaltyParams) -> Result<f64> {
    if let Some((k, n)) = counts.iter().find(|(_, &n)| n < 0) {
        return Err(VlaadError::invalid(format!("negative infraction count {n} for {k}")));
    }
    let lookup = |table: &BTreeMap<String, f64>, key: &str| {
        table
            .get(key)
            .copied()
            .ok_or_else(|| VlaadError::invalid(format!("no penalty parameter for infraction type '{key}'")))
    };
    match params {
        PenaltyParams::V20(p) => {
            let mut prod = 1.0;
            for (k, &n) in counts.iter().filter(|(_, &n)| n > 0) {
                let pj = lookup(p, k)?;
                if !(pj > 0.0 && pj <= 1.0) {
                    return Err(VlaadError::invalid(format!("penalty factor for {k} must lie in (0, 1]")));
                }
                prod *= pj.powi(n as i32);
            }
            Ok(prod)
        }
        PenaltyParams::V21(c) => {
            let mut sum = 0.0;
            for (k, &n) in counts.iter().filter(|(_, &n)| n > 0) {
                let cj = lookup(c, k)?;
                if !(cj >= 0.0) {
                    return Err(VlaadError::invalid(format!("coefficient for {k} must be >= 0")));
                }
                sum += cj * n as f64;
            }
            Ok(1.0 / (1.0 + sum))
        }
    }
}

/// One route evaluation as logged by a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingRunRecord {
    pub route_id: String,
    pub km: f64,
    /// Percentage of the route completed, 0 to 100.
    pub route_completion: f64,
    #[serde(default)]
    pub infractions: BTreeMap<String, i64>,
    /// Overrides of the 2.1 coefficients.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub coefficients: BTreeMap<String, f64>,
    /// Overrides of the 2.0 factors.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub penalties: BTreeMap<String, f64>,
}

impl DrivingRunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.km >= 0.0) || !self.km.is_finite() {
            return Err(VlaadError::invalid(format!("route {}: km must be >= 0", self.route_id)));
        }
        if !(0.0..=100.0).contains(&self.route_completion) {
            return Err(VlaadError::invalid(format!(
                "route {}: route_completion must lie in [0, 100]",
                self.route_id
            )));
        }
        Ok(())
    }

    pub fn penalty_params(&self, version: LeaderboardVersion) -> PenaltyParams {
        match version {
            LeaderboardVersion::V20 => {
                let mut p = default_v20_penalties();
                p.extend(self.penalties.clone());
                PenaltyParams::V20(p)
            }
            LeaderboardVersion::V21 => {
                let mut c = default_v21_coefficients();
                c.extend(self.coefficients.clone());
                PenaltyParams::V21(c)
            }
        }
    }

    pub fn collisions(&self) -> i64 {
        self.infractions
            .iter()
            .filter(|(k, _)| k.starts_with("collisions_"))
            .map(|(_, &n)| n)
            .sum()
    }
}

/// Reads JSON Lines run records; blank lines are skipped.
pub fn read_run_records<R: BufRead>(r: R) -> Result<Vec<DrivingRunRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrivingRunRecord = serde_json::from_str(&line)
            .map_err(|e| VlaadError::Format(format!("run records line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| VlaadError::Format(format!("run records line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub route_id: String,
    #[serde(rename = "RC")]
    pub route_completion: f64,
    #[serde(rename = "IS")]
    pub infraction_score: f64,
    #[serde(rename = "DS")]
    pub driving_score: f64,
    #[serde(rename = "Col_per_km")]
    pub collisions_per_km: f64,
}

pub fn summarize_run(record: &DrivingRunRecord, version: LeaderboardVersion) -> Result<RunSummary> {
    record.validate()?;
    let p = infraction_penalty(&record.infractions, &record.penalty_params(version))?;
    let collisions = record.collisions();
    let per_km = if record.km > 0.0 {
        collisions as f64 / record.km
    } else if collisions == 0 {
        0.0
    } else {
        return Err(VlaadError::invalid(format!(
            "route {}: {collisions} collisions over 0 km",
            record.route_id
        )));
    };
    Ok(RunSummary {
        route_id: record.route_id.clone(),
        route_completion: record.route_completion,
        infraction_score: p,
        driving_score: record.route_completion * p,
        collisions_per_km: per_km,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn zero_infractions_is_ideal() {
        for v in [LeaderboardVersion::V20, LeaderboardVersion::V21] {
            assert_eq!(infraction_penalty(&counts(&[]), &PenaltyParams::defaults(v)).unwrap(), 1.0);
            let zero = counts(&[(COLLISION_VEHICLE, 0)]);
            assert_eq!(infraction_penalty(&zero, &PenaltyParams::defaults(v)).unwrap(), 1.0);
        }
    }

    #[test]
    fn v21_reference_values() {
        let p = PenaltyParams::defaults(LeaderboardVersion::V21);
        assert_eq!(infraction_penalty(&counts(&[(COLLISION_PEDESTRIAN, 1)]), &p).unwrap(), 0.5);
        let v = infraction_penalty(&counts(&[(COLLISION_VEHICLE, 2), (COLLISION_PEDESTRIAN, 1)]), &p).unwrap();
        assert!((v - 1.0 / 3.4).abs() < 1e-12);
    }

    #[test]
    fn v20_product() {
        let p = PenaltyParams::V20(counts_f(&[("x", 0.5)]));
        assert_eq!(infraction_penalty(&counts(&[("x", 2)]), &p).unwrap(), 0.25);
    }

    fn counts_f(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn negative_and_unknown_rejected() {
        let p = PenaltyParams::defaults(LeaderboardVersion::V21);
        assert!(infraction_penalty(&counts(&[(COLLISION_VEHICLE, -1)]), &p).is_err());
        assert!(infraction_penalty(&counts(&[("red_light", 1)]), &p).is_err());
    }

    fn run(rc: f64, km: f64, inf: &[(&str, i64)]) -> DrivingRunRecord {
        DrivingRunRecord {
            route_id: "r".into(),
            km,
            route_completion: rc,
            infractions: counts(inf),
            coefficients: BTreeMap::new(),
            penalties: BTreeMap::new(),
        }
    }

    #[test]
    fn run_summaries() {
        let s = summarize_run(&run(50.0, 1.0, &[(COLLISION_PEDESTRIAN, 1)]), LeaderboardVersion::V21).unwrap();
        assert_eq!(s.driving_score, 25.0);
        let s = summarize_run(&run(100.0, 3.0, &[]), LeaderboardVersion::V21).unwrap();
        assert_eq!(s.driving_score, 100.0);
        let mut r = run(80.0, 10.0, &[(COLLISION_VEHICLE, 10), (COLLISION_LAYOUT, 6)]);
        r.coefficients.insert("unused".into(), 0.1);
        let s = summarize_run(&r, LeaderboardVersion::V21).unwrap();
        assert!((s.collisions_per_km - 1.6).abs() < 1e-12);
    }

    #[test]
    fn zero_km_rules() {
        assert_eq!(
            summarize_run(&run(0.0, 0.0, &[]), LeaderboardVersion::V21).unwrap().collisions_per_km,
            0.0
        );
        assert!(summarize_run(&run(0.0, 0.0, &[(COLLISION_VEHICLE, 1)]), LeaderboardVersion::V21).is_err());
    }
}
