//! Scenario construction and stable/unstable classification of sample
//! paths, reproducing the workload-policy experiment protocol at
//! configurable scale.

use crate::analytics::{v_cr, v_cr_1m, DEFAULT_CRITICAL_TOL};
use crate::ctmc::Variant;
use crate::desim::{simulate, MetricsReport, PolicyKind, SimConfig};
use crate::error::{Error, Result};
use crate::policy::SystemParams;

/// One simulation setting pinned to an offset from a critical value.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub config: SimConfig,
    /// Signed offset of the traffic intensity from the critical value.
    pub rho_offset: f64,
    pub critical_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    StableLooking,
    UnstableLooking,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::StableLooking => "stable-looking",
            Verdict::UnstableLooking => "unstable-looking",
            Verdict::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// Classification of a sample path, with the statistics behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// Least-squares slope of max load against time over the late window.
    pub slope: f64,
    /// Empty-system visits observed inside the late window.
    pub late_empty_visits: u64,
}

/// Decision-rule knobs. The defaults are artifact choices, not measured
/// quantities, and are deliberately configurable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSettings {
    /// Slope threshold as a fraction of the per-server arrival rate.
    pub theta: f64,
    /// Fraction of trailing samples used for slope and empty-visit counts.
    pub window_fraction: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            theta: 0.01,
            window_fraction: 0.5,
        }
    }
}

/// Classifies a run: a path whose late max-load slope clearly exceeds
/// `theta * lambda / s` with no late empty visit looks unstable; a path
/// with flat-or-falling slope that still empties looks stable; anything
/// else is inconclusive.
pub fn classify_stability(
    report: &MetricsReport,
    params: &SystemParams,
    settings: &ClassifierSettings,
) -> Result<StabilityVerdict> {
    if report.samples.len() < 100 {
        return Err(Error::invalid("need at least 100 samples to classify"));
    }
    let n = report.samples.len();
    let start = n - ((n as f64 * settings.window_fraction) as usize).max(2);
    let window = &report.samples[start..];
    let window_start_time = window[0].time;

    // Least squares slope of max_load on time.
    let k = window.len() as f64;
    let mean_t: f64 = window.iter().map(|s| s.time).sum::<f64>() / k;
    let mean_y: f64 = window.iter().map(|s| s.max_load).sum::<f64>() / k;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for s in window {
        sxy += (s.time - mean_t) * (s.max_load - mean_y);
        sxx += (s.time - mean_t) * (s.time - mean_t);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };

    let mut late_empty_visits = report
        .empty_visit_times
        .iter()
        .filter(|&&t| t >= window_start_time)
        .count() as u64;
    // A path sampled while already empty never logs a fresh visit; an
    // all-zero window still counts as evidence of emptiness.
    if late_empty_visits == 0 && window.iter().any(|s| s.total_load == 0.0) {
        late_empty_visits = 1;
    }

    let threshold = settings.theta * params.lambda() / params.servers() as f64;
    let verdict = if slope > threshold && late_empty_visits == 0 {
        Verdict::UnstableLooking
    } else if slope <= threshold && late_empty_visits >= 1 {
        Verdict::StableLooking
    } else {
        Verdict::Inconclusive
    };
    Ok(StabilityVerdict {
        verdict,
        slope,
        late_empty_visits,
    })
}

fn scenario_config(
    s: usize,
    rho: f64,
    policy: PolicyKind,
    horizon: u64,
    seed: u64,
) -> Result<SimConfig> {
    let mu = 1.0;
    let lambda = rho * s as f64 * mu;
    let config = SimConfig {
        params: SystemParams::new(s, lambda, mu)?,
        policy,
        variant: Variant::NonIdling,
        horizon_arrivals: horizon,
        seed,
        sample_stride: (horizon / 1000).max(1),
        split_monitor: None,
        max_samples: 10_000_000,
    };
    config.validate()?;
    Ok(config)
}

/// The eight-scenario figure suite: second-smallest-workload errors with
/// `p` in {0.8, 0.9, 1} and third-smallest-workload errors with `p = 1`,
/// each simulated just below and just above its critical traffic intensity.
pub fn build_figure_suite(s: usize, horizon: u64, offset: f64) -> Result<Vec<Scenario>> {
    if s < 3 {
        return Err(Error::invalid("suite needs s >= 3 for the m = 3 scenario"));
    }
    if !(offset > 0.0) {
        return Err(Error::invalid("offset must be positive"));
    }
    let mut scenarios = Vec::new();
    let mut seed = 0u64;
    let push = |name: String,
                    critical: f64,
                    signed: f64,
                    policy: PolicyKind,
                    seed: u64|
     -> Result<Scenario> {
        let rho = critical + signed;
        Ok(Scenario {
            name,
            config: scenario_config(s, rho, policy, horizon, seed)?,
            rho_offset: signed,
            critical_value: critical,
        })
    };
    for p in [0.8, 0.9, 1.0] {
        let critical = v_cr(p, s)?.value;
        for signed in [-offset, offset] {
            let side = if signed < 0.0 { "below" } else { "above" };
            scenarios.push(push(
                format!("j2sw_ni_p{p}_{side}"),
                critical,
                signed,
                PolicyKind::WorkloadBased { m: 2, p },
                seed,
            )?);
            seed += 1;
        }
    }
    let critical = v_cr_1m(s, 3, DEFAULT_CRITICAL_TOL)?.value;
    for signed in [-offset, offset] {
        let side = if signed < 0.0 { "below" } else { "above" };
        scenarios.push(push(
            format!("j3sw_ni_p1_{side}"),
            critical,
            signed,
            PolicyKind::WorkloadBased { m: 3, p: 1.0 },
            seed,
        )?);
        seed += 1;
    }
    Ok(scenarios)
}

/// Runs one scenario and classifies its path.
pub fn run_scenario(
    scenario: &Scenario,
    settings: &ClassifierSettings,
) -> Result<(MetricsReport, StabilityVerdict)> {
    let report = simulate(&scenario.config)?;
    let verdict = classify_stability(&report, &scenario.config.params, settings)?;
    Ok((report, verdict))
}

/// Outcome of the idling-vs-non-idling containment check.
#[derive(Debug, Clone)]
pub struct ContainmentOutcome {
    /// True iff no seed produced a stable-looking idling run together with
    /// an unstable-looking non-idling run.
    pub holds: bool,
    /// Per-seed (idling, non-idling) verdicts.
    pub pairs: Vec<(StabilityVerdict, StabilityVerdict)>,
}

/// For each seed, runs the idling base config and its non-idling twin and
/// checks that non-idling never looks strictly worse. Inconclusive runs are
/// reported in the pairs, not treated as violations.
pub fn containment_check(
    base: &SimConfig,
    seeds: &[u64],
    settings: &ClassifierSettings,
) -> Result<ContainmentOutcome> {
    if base.variant != Variant::Idling {
        return Err(Error::invalid("containment base config must be idling"));
    }
    let mut pairs = Vec::with_capacity(seeds.len());
    let mut holds = true;
    for &seed in seeds {
        let mut idling = base.clone();
        idling.seed = seed;
        let mut nonidling = idling.clone();
        nonidling.variant = Variant::NonIdling;
        let iv = classify_stability(&simulate(&idling)?, &idling.params, settings)?;
        let nv = classify_stability(&simulate(&nonidling)?, &nonidling.params, settings)?;
        if iv.verdict == Verdict::StableLooking && nv.verdict == Verdict::UnstableLooking {
            holds = false;
        }
        pairs.push((iv, nv));
    }
    Ok(ContainmentOutcome { holds, pairs })
}

/// Summary line format shared by the CLI and tests:
/// `scenario,rho,critical_value,verdict,slope,empty_visits`.
pub fn summary_line(scenario: &Scenario, verdict: &StabilityVerdict) -> String {
    format!(
        "{},{:.6},{:.6},{},{:.6e},{}",
        scenario.name,
        scenario.config.params.rho(),
        scenario.critical_value,
        verdict.verdict,
        verdict.slope,
        verdict.late_empty_visits
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desim::Sample;

    fn synthetic_report(samples: Vec<Sample>, empty_visit_times: Vec<f64>) -> MetricsReport {
        MetricsReport {
            empty_visits: empty_visit_times.len() as u64,
            empty_visit_times,
            samples,
            split_episodes: Vec::new(),
            front_busy_histogram: Vec::new(),
            arrivals_processed: 0,
            final_time: 0.0,
            time_avg_total_load: 0.0,
        }
    }

    fn params() -> SystemParams {
        SystemParams::new(4, 3.6, 1.0).unwrap()
    }

    #[test]
    fn classify_rising_path_unstable() {
        let samples: Vec<Sample> = (0..200)
            .map(|i| Sample {
                event_index: i,
                time: i as f64,
                max_load: 1.0 + 0.5 * i as f64,
                total_load: 2.0 + 2.0 * i as f64,
                min_load: 0.5 * i as f64,
            })
            .collect();
        let v = classify_stability(&synthetic_report(samples, vec![]), &params(), &Default::default())
            .unwrap();
        assert_eq!(v.verdict, Verdict::UnstableLooking);
        assert!(v.slope > 0.4);
    }

    #[test]
    fn classify_flat_zero_path_stable() {
        let samples: Vec<Sample> = (0..200)
            .map(|i| Sample {
                event_index: i,
                time: i as f64,
                max_load: 0.0,
                total_load: 0.0,
                min_load: 0.0,
            })
            .collect();
        let v = classify_stability(&synthetic_report(samples, vec![]), &params(), &Default::default())
            .unwrap();
        assert_eq!(v.verdict, Verdict::StableLooking);
    }

    #[test]
    fn classify_needs_samples() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| Sample {
                event_index: i,
                time: i as f64,
                max_load: 0.0,
                total_load: 0.0,
                min_load: 0.0,
            })
            .collect();
        assert!(classify_stability(&synthetic_report(samples, vec![]), &params(), &Default::default())
            .is_err());
    }

    #[test]
    fn suite_has_eight_scenarios_with_expected_criticals() {
        let suite = build_figure_suite(4, 10_000, 0.05).unwrap();
        assert_eq!(suite.len(), 8);
        let j2_1 = suite.iter().find(|s| s.name == "j2sw_ni_p1_above").unwrap();
        assert!((j2_1.critical_value - 0.9478).abs() < 5e-4);
        let j3 = suite.iter().find(|s| s.name == "j3sw_ni_p1_below").unwrap();
        assert!((j3.critical_value - 0.87).abs() < 5e-3);
        for sc in &suite {
            let expect = (sc.critical_value + sc.rho_offset) * 4.0;
            assert!((sc.config.params.lambda() - expect).abs() < 1e-12);
        }
        assert!(build_figure_suite(2, 1000, 0.05).is_err());
        assert!(build_figure_suite(4, 1000, 0.0).is_err());
    }

    #[test]
    fn desk_scale_scenarios_classify_correctly() {
        // Smoke version of the full acceptance run: one seed per side.
        let suite = build_figure_suite(4, 300_000, 0.05).unwrap();
        let settings = ClassifierSettings::default();
        for scenario in &suite {
            let (_, verdict) = run_scenario(scenario, &settings).unwrap();
            let expected = if scenario.rho_offset > 0.0 {
                Verdict::UnstableLooking
            } else {
                Verdict::StableLooking
            };
            assert_eq!(verdict.verdict, expected, "{}: {verdict:?}", scenario.name);
        }
    }
}
