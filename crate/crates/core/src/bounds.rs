//! Cluster-count bounds from TEMI cluster utilization.
//!
//! The utilization ratio `r_C = C^u / C` is the fraction of the `C` output
//! clusters that receive at least one sample. The upper bound doubles `C`
//! until `r_C <= alpha`, then grid-searches between the last passing and the
//! first failing probe; `C_max` is the largest probed `C` with `r_C > alpha`.
//! The lower bound trains once with `gamma = 1` at a large `C` and reports
//! how many clusters survive.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureSet, NeighborSets};
use crate::error::{Error, Result};
use crate::kmeans::ClusterAssignment;
use crate::rng;
use crate::temi::{temi_assign, temi_fit, TemiConfig};

/// `C^u / C`.
pub fn utilization_ratio(a: &ClusterAssignment) -> f64 {
    a.utilized as f64 / a.c as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSearchConfig {
    pub alpha: f64,
    #[serde(rename = "C_start")]
    pub c_start: usize,
    pub max_doublings: usize,
    /// Grid step of the refinement phase; `None` means
    /// `max(1, last_passing_C / 8)`.
    pub refine_step: Option<usize>,
    /// TEMI settings for every probe; `C` and `seed` are overridden.
    pub temi: TemiConfig,
    pub seed: u64,
}

impl Default for BoundSearchConfig {
    fn default() -> Self {
        Self {
            alpha: 0.96,
            c_start: 2,
            max_doublings: 16,
            refine_step: None,
            temi: TemiConfig::default(),
            seed: 0,
        }
    }
}

impl BoundSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::param(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.c_start < 2 {
            return Err(Error::param(format!("C_start must be at least 2, got {}", self.c_start)));
        }
        if self.refine_step == Some(0) {
            return Err(Error::param("refine_step must be positive"));
        }
        Ok(())
    }

    /// The probe's TEMI configuration at `c` clusters.
    pub fn probe_config(&self, c: usize) -> TemiConfig {
        TemiConfig {
            c,
            seed: rng::derive_seed(self.seed, c as u64),
            ..self.temi.clone()
        }
    }
}

/// One trained probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    #[serde(rename = "C")]
    pub c: usize,
    /// Number of utilized clusters `C^u`.
    pub utilized: usize,
    pub r_c: f64,
    pub passed: bool,
    /// Seconds spent training the probe. Not serialized to JSON so that
    /// reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
    /// Whether the probe belongs to the doubling phase.
    pub doubling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    #[serde(rename = "C_big")]
    pub c_big: usize,
    /// Utilized clusters after `gamma = 1` training.
    pub utilized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub alpha: f64,
    /// Probes in increasing `C`.
    pub probes: Vec<Probe>,
    #[serde(rename = "C_max")]
    pub c_max: usize,
    #[serde(rename = "C_lower")]
    pub c_lower: Option<LowerBound>,
    /// Set when even `C_start` fails the threshold.
    pub warning: Option<String>,
}

impl BoundReport {
    pub fn doubling_probes(&self) -> usize {
        self.probes.iter().filter(|p| p.doubling).count()
    }

    pub fn probe(&self, c: usize) -> Option<&Probe> {
        self.probes.iter().find(|p| p.c == c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad bound report: {e}")))
    }

    /// `C,r_C,passed` rows in increasing `C`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("C,r_C,passed\n");
        for p in &self.probes {
            out.push_str(&format!("{},{},{}\n", p.c, p.r_c, p.passed));
        }
        out
    }

    /// `C,wall_time` rows; kept apart from [`Self::to_csv`] because timings
    /// differ between otherwise identical runs.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("C,wall_time\n");
        for p in &self.probes {
            out.push_str(&format!("{},{:.3}\n", p.c, p.wall_time));
        }
        out
    }
}

/// Runs the doubling-then-grid search with an arbitrary probe function
/// returning the clustering obtained at a given `C`.
pub fn search_upper_bound(
    cfg: &BoundSearchConfig,
    mut probe: impl FnMut(usize) -> Result<ClusterAssignment>,
) -> Result<BoundReport> {
    cfg.validate()?;
    let mut probes = Vec::new();
    let mut run = |c: usize, doubling: bool| -> Result<bool> {
        let start = Instant::now();
        let a = probe(c)?;
        if a.c != c {
            return Err(Error::param(format!("probe at C={c} returned C={}", a.c)));
        }
        let r_c = utilization_ratio(&a);
        let passed = r_c > cfg.alpha;
        log::info!("bound probe C={c}: {}/{c} utilized, r_C={r_c:.4}", a.utilized);
        probes.push(Probe {
            c,
            utilized: a.utilized,
            r_c,
            passed,
            wall_time: start.elapsed().as_secs_f64(),
            doubling,
        });
        Ok(passed)
    };

    let mut c = cfg.c_start;
    let mut last_pass = None;
    let mut doublings = 0;
    let first_fail = loop {
        if !run(c, true)? {
            break c;
        }
        last_pass = Some(c);
        if doublings == cfg.max_doublings {
            return Err(Error::BoundNotFound(format!(
                "r_C still above {} at C={c} after {doublings} doublings",
                cfg.alpha
            )));
        }
        c = c.checked_mul(2).ok_or_else(|| Error::param("cluster count overflow"))?;
        doublings += 1;
    };

    let mut warning = None;
    match last_pass {
        None => {
            let msg = format!("r_C <= {} already at C_start={}", cfg.alpha, cfg.c_start);
            log::warn!("{msg}");
            warning = Some(msg);
        }
        Some(pass) => {
            let step = cfg.refine_step.unwrap_or((pass / 8).max(1));
            let mut c = pass + step;
            while c < first_fail {
                run(c, false)?;
                c += step;
            }
        }
    }
    probes.sort_by_key(|p| p.c);
    let c_max = probes
        .iter()
        .filter(|p| p.passed)
        .map(|p| p.c)
        .max()
        .unwrap_or(cfg.c_start);
    Ok(BoundReport {
        alpha: cfg.alpha,
        probes,
        c_max,
        c_lower: None,
        warning,
    })
}

/// Trains TEMI at `c` clusters with the probe settings and assigns every
/// sample.
pub fn temi_probe(fs: &FeatureSet, neighbors: &NeighborSets, cfg: &TemiConfig) -> Result<ClusterAssignment> {
    let (model, _) = temi_fit(fs, neighbors, cfg)?;
    temi_assign(&model, fs)
}

/// Upper cluster bound from independent TEMI probes.
pub fn find_upper_bound(fs: &FeatureSet, neighbors: &NeighborSets, cfg: &BoundSearchConfig) -> Result<BoundReport> {
    if cfg.c_start >= fs.n() {
        return Err(Error::param(format!("C_start={} must be below N={}", cfg.c_start, fs.n())));
    }
    search_upper_bound(cfg, |c| temi_probe(fs, neighbors, &cfg.probe_config(c)))
}

/// Utilized clusters after training with `gamma = 1` at `c_big` clusters.
pub fn find_lower_bound(
    fs: &FeatureSet,
    neighbors: &NeighborSets,
    c_big: usize,
    cfg: &BoundSearchConfig,
) -> Result<LowerBound> {
    let temi = TemiConfig {
        gamma: 1.0,
        ..cfg.probe_config(c_big)
    };
    let a = temi_probe(fs, neighbors, &temi)?;
    Ok(LowerBound {
        c_big,
        utilized: a.utilized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::Method;

    fn assignment(ids: Vec<u32>, c: usize) -> ClusterAssignment {
        ClusterAssignment::new(Method::Temi, ids, c).unwrap()
    }

    /// Fake probe that fills `min(C, k)` clusters.
    fn saturating(k: usize) -> impl FnMut(usize) -> Result<ClusterAssignment> {
        move |c| Ok(assignment((0..c.min(k) as u32).collect(), c))
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(utilization_ratio(&assignment(vec![0, 1, 2], 3)), 1.0);
        assert_eq!(utilization_ratio(&assignment(vec![0, 0, 0], 3)), 1.0 / 3.0);
        assert_eq!(utilization_ratio(&assignment(vec![0, 2], 4)), 0.5);
    }

    #[test]
    fn doubling_then_grid() {
        let cfg = BoundSearchConfig::default();
        let report = search_upper_bound(&cfg, saturating(40)).unwrap();
        let doubling: Vec<usize> = report.probes.iter().filter(|p| p.doubling).map(|p| p.c).collect();
        assert_eq!(doubling, vec![2, 4, 8, 16, 32, 64]);
        let grid: Vec<usize> = report.probes.iter().filter(|p| !p.doubling).map(|p| p.c).collect();
        assert_eq!(grid, vec![36, 40, 44, 48, 52, 56, 60]);
        assert_eq!(report.c_max, 40);
        assert!(report.warning.is_none());
        assert!(report.probes.windows(2).all(|w| w[0].c < w[1].c));
    }

    #[test]
    fn fails_at_start_warns() {
        let cfg = BoundSearchConfig {
            alpha: 1.0,
            ..BoundSearchConfig::default()
        };
        let report = search_upper_bound(&cfg, saturating(100)).unwrap();
        assert_eq!(report.c_max, 2);
        assert!(report.warning.is_some());
        assert_eq!(report.probes.len(), 1);
    }

    #[test]
    fn exhausted_doublings_is_an_error() {
        let cfg = BoundSearchConfig {
            max_doublings: 3,
            ..BoundSearchConfig::default()
        };
        let err = search_upper_bound(&cfg, saturating(usize::MAX)).unwrap_err();
        assert!(matches!(err, Error::BoundNotFound(_)));
    }

    #[test]
    fn report_json_round_trip() {
        let report = search_upper_bound(&BoundSearchConfig::default(), saturating(10)).unwrap();
        let back = BoundReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back.to_json(), report.to_json());
        assert!(report.to_csv().starts_with("C,r_C,passed\n2,1,true\n"));
        assert!(report.timings_csv().starts_with("C,wall_time\n2,"));
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            BoundSearchConfig {
                alpha: 0.0,
                ..BoundSearchConfig::default()
            },
            BoundSearchConfig {
                c_start: 1,
                ..BoundSearchConfig::default()
            },
        ] {
            assert!(search_upper_bound(&cfg, saturating(4)).is_err());
        }
    }
}
