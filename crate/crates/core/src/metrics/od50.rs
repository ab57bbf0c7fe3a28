//! Distance at which AP falls to 0.5, and its bootstrap spread.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{ap_from_matches, mean, APCurve, ApPoint, ImageMatches, SceneRecord};
use crate::error::{Error, Result};

pub const OD50_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Od50Method {
    Interpolated,
    Extrapolated,
    BelowRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OD50Result {
    pub od50_m: f64,
    pub method: Od50Method,
    /// False unless the curve itself crosses 0.5.
    pub reliable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_std_m: Option<f64>,
}

/// OD50 of a curve sorted by distance.
///
/// The first descending crossing of 0.5 is interpolated linearly. A curve
/// that stays above 0.5 is extrapolated along its last segment; if that
/// segment does not descend, the last distance is returned as a lower bound.
/// A curve already below 0.5 at the nearest distance is `below_range` there.
pub fn od50(curve: &APCurve) -> Result<OD50Result> {
    od50_points(&curve.points)
}

pub fn od50_points(points: &[ApPoint]) -> Result<OD50Result> {
    if points.len() < 2 {
        return Err(Error::Data(format!("OD50 needs at least 2 points, got {}", points.len())));
    }
    let result = |d: f64, method: Od50Method| OD50Result {
        od50_m: d,
        method,
        reliable: method == Od50Method::Interpolated,
        bootstrap_std_m: None,
    };
    if points[0].ap < OD50_LEVEL {
        return Ok(result(points[0].distance_m, Od50Method::BelowRange));
    }
    for (i, p) in points.iter().enumerate() {
        if p.ap == OD50_LEVEL {
            return Ok(result(p.distance_m, Od50Method::Interpolated));
        }
        if let Some(q) = points.get(i + 1) {
            if p.ap > OD50_LEVEL && q.ap < OD50_LEVEL {
                let d = p.distance_m + (q.distance_m - p.distance_m) * (p.ap - OD50_LEVEL) / (p.ap - q.ap);
                return Ok(result(d, Od50Method::Interpolated));
            }
        }
    }
    let (a, b) = (&points[points.len() - 2], &points[points.len() - 1]);
    let slope = (b.ap - a.ap) / (b.distance_m - a.distance_m);
    let d = if slope < 0.0 {
        b.distance_m + (OD50_LEVEL - b.ap) / slope
    } else {
        b.distance_m
    };
    Ok(result(d, Od50Method::Extrapolated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Sample standard deviation of the interpolated replicate OD50s.
    pub std_m: f64,
    pub mean_m: f64,
    pub replicates: usize,
    /// Replicates whose OD50 was not interpolated.
    pub excluded: usize,
    /// Per-replicate OD50, `None` where excluded.
    pub values: Vec<Option<f64>>,
}

/// Resamples scenes with replacement within each distance and recomputes
/// the OD50. Replicate `b` draws from ChaCha8 stream `b` of `seed`.
pub fn bootstrap_od50(records: &[SceneRecord], n_thresholds: usize, replicates: usize, seed: u64) -> Result<BootstrapResult> {
    if replicates < 2 {
        return Err(Error::Config(format!("bootstrap needs B >= 2, got {replicates}")));
    }
    let mut groups: BTreeMap<u64, (f64, Vec<&ImageMatches>)> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.distance_m.to_bits())
            .or_insert_with(|| (r.distance_m, Vec::new()))
            .1
            .push(&r.matches);
    }
    let mut groups: Vec<(f64, Vec<&ImageMatches>)> = groups.into_values().collect();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, g) in &mut groups {
        g.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }

    let values: Vec<Option<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|b| -> Result<Option<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let mut points = Vec::with_capacity(groups.len());
            for (d, scenes) in &groups {
                let mut pick: Vec<usize> = (0..scenes.len()).map(|_| rng.gen_range(0..scenes.len())).collect();
                pick.sort_unstable();
                let sample: Vec<&ImageMatches> = pick.iter().map(|&i| scenes[i]).collect();
                let ap = match ap_from_matches(&sample, n_thresholds) {
                    Ok(per) => mean(&per),
                    // a resample without any objects has no defined AP
                    Err(Error::UndefinedAp(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                points.push(ApPoint {
                    distance_m: *d,
                    ap,
                    n_scenes: sample.len(),
                });
            }
            let r = od50_points(&points)?;
            Ok((r.method == Od50Method::Interpolated).then_some(r.od50_m))
        })
        .collect::<Result<_>>()?;

    let used: Vec<f64> = values.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::Data(format!("all {replicates} bootstrap replicates were not interpolated")));
    }
    let mean_m = mean(&used);
    let all_equal = used.iter().all(|v| *v == used[0]);
    let std_m = if all_equal || used.len() < 2 {
        0.0
    } else {
        (used.iter().map(|v| (v - mean_m).powi(2)).sum::<f64>() / (used.len() - 1) as f64).sqrt()
    };
    Ok(BootstrapResult {
        std_m,
        mean_m: if all_equal { used[0] } else { mean_m },
        replicates,
        excluded: replicates - used.len(),
        values,
    })
}
