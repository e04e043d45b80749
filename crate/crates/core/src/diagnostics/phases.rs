use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the stabilization band around the post-peak plateau median.
const PLATEAU_BAND: f64 = 0.15;

/// One checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// Ordering key: training step, or tokens seen when steps are unknown.
    pub step: u64,
    pub tokens: Option<u64>,
    pub gamma_eff: f64,
    pub ci: Option<(f64, f64)>,
    /// Quality spread `B0`, averaged over layers.
    pub spread: f64,
    /// Normalized routing entropy.
    pub entropy: f64,
    pub layers_above_gamma_c: Option<usize>,
}

impl CheckpointRecord {
    pub fn new(step: u64, gamma_eff: f64) -> Self {
        Self {
            step,
            tokens: None,
            gamma_eff,
            ci: None,
            spread: f64::NAN,
            entropy: f64::NAN,
            layers_above_gamma_c: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dormant,
    Surge,
    Stabilization,
    Relaxation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Dormant => "dormant",
            Phase::Surge => "surge",
            Phase::Stabilization => "stabilization",
            Phase::Relaxation => "relaxation",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dormant" => Ok(Phase::Dormant),
            "surge" => Ok(Phase::Surge),
            "stabilization" => Ok(Phase::Stabilization),
            "relaxation" => Ok(Phase::Relaxation),
            other => Err(Error::invalid(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    /// Surge when the peak exceeds this multiple of the first active value.
    pub surge_ratio: f64,
    /// Relaxation once values fall below this fraction of the peak.
    pub relax_ratio: f64,
    /// Values at or below this before the peak are dormant.
    pub dormant_threshold: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            surge_ratio: 1.5,
            relax_ratio: 0.6,
            dormant_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub labels: Vec<Phase>,
    pub steps: Vec<u64>,
    pub peak_index: usize,
    pub peak_step: u64,
    pub peak_value: f64,
    pub start_value: f64,
    pub final_value: f64,
    /// `peak / final`, absent when the final value is zero.
    pub peak_to_final_ratio: Option<f64>,
    pub surge_detected: bool,
    pub relaxation_detected: bool,
}

impl PhaseReport {
    /// One `step<TAB>phase` line per checkpoint followed by summary lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("step\tphase\n");
        for (s, p) in self.steps.iter().zip(&self.labels) {
            let _ = writeln!(out, "{s}\t{p}");
        }
        let _ = writeln!(out, "# peak {} at step {}", self.peak_value, self.peak_step);
        let _ = writeln!(
            out,
            "# start {} final {}",
            self.start_value, self.final_value
        );
        match self.peak_to_final_ratio {
            Some(r) => {
                let _ = writeln!(out, "# peak/final {r:.3}");
            }
            None => out.push_str("# peak/final undefined\n"),
        }
        let _ = writeln!(
            out,
            "# surge {} relaxation {}",
            self.surge_detected, self.relaxation_detected
        );
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Label every checkpoint of a `γ_eff` trajectory as dormant, surge,
/// stabilization or relaxation.
///
/// Records before the first maximum are dormant while at or below the
/// dormancy threshold, and surge if the peak is a `surge_ratio` rise over
/// the first active value. After the peak, everything from the first drop
/// below `relax_ratio × peak` on is relaxation. The records in between form
/// the plateau: those within 15% of its median are stabilization, shoulders
/// above it still belong to the surge, and a tail below it that never
/// returns to the band is relaxation.
pub fn classify_phases(series: &[CheckpointRecord], th: PhaseThresholds) -> Result<PhaseReport> {
    let n = series.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "phase classification needs at least 3 checkpoints, got {n}"
        )));
    }
    if series.iter().any(|r| !r.gamma_eff.is_finite()) {
        return Err(Error::invalid("gamma_eff series must be finite"));
    }
    if series.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::invalid("checkpoint steps must strictly increase"));
    }
    let v: Vec<f64> = series.iter().map(|r| r.gamma_eff).collect();
    let peak = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
    let peak_value = v[peak];

    let mut labels = vec![Phase::Stabilization; n];
    for i in 0..peak {
        if v[i] <= th.dormant_threshold {
            labels[i] = Phase::Dormant;
        }
    }
    let start = (0..=peak).find(|&i| labels[i] != Phase::Dormant).unwrap();
    let start_value = v[start];
    let had_dormant = start > 0 || labels[..peak].contains(&Phase::Dormant);
    let surge_detected =
        peak_value > th.surge_ratio * start_value || (had_dormant && start == peak);
    let rising = if surge_detected {
        Phase::Surge
    } else {
        Phase::Stabilization
    };
    for label in &mut labels[..=peak] {
        if *label != Phase::Dormant {
            *label = rising;
        }
    }

    let relax_at = (peak + 1..n)
        .find(|&i| v[i] < th.relax_ratio * peak_value)
        .unwrap_or(n);
    labels[relax_at..]
        .iter_mut()
        .for_each(|l| *l = Phase::Relaxation);

    let plateau = peak + 1..relax_at;
    match plateau.len() {
        0 => {}
        1 => {
            let i = plateau.start;
            labels[i] = if v[i] < (1.0 - PLATEAU_BAND) * peak_value {
                Phase::Relaxation
            } else {
                Phase::Stabilization
            };
        }
        _ => {
            let m = median(&mut v[plateau.clone()].to_vec());
            let (lo, hi) = ((1.0 - PLATEAU_BAND) * m, (1.0 + PLATEAU_BAND) * m);
            let last_in_band = plateau.clone().filter(|&i| v[i] >= lo && v[i] <= hi).max();
            for i in plateau {
                labels[i] = if v[i] > hi {
                    rising
                } else if v[i] < lo && last_in_band.is_none_or(|j| i > j) {
                    Phase::Relaxation
                } else {
                    Phase::Stabilization
                };
            }
        }
    }

    let final_value = v[n - 1];
    Ok(PhaseReport {
        labels,
        steps: series.iter().map(|r| r.step).collect(),
        peak_index: peak,
        peak_step: series[peak].step,
        peak_value,
        start_value,
        final_value,
        peak_to_final_ratio: (final_value > 0.0).then(|| peak_value / final_value),
        surge_detected,
        relaxation_detected: final_value < th.relax_ratio * peak_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Phase::*;

    fn series(values: &[f64]) -> Vec<CheckpointRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &g)| CheckpointRecord::new(1000 * (i as u64 + 1), g))
            .collect()
    }

    const OLMOE: [f64; 20] = [
        13.7, 11.4, 23.0, 31.4, 31.5, 36.4, 36.0, 38.8, 37.7, 32.7, 27.2, 24.3, 28.0, 26.6, 22.2,
        21.7, 15.9, 13.5, 10.2, 8.5,
    ];

    #[test]
    fn olmoe_trajectory() {
        let r = classify_phases(&series(&OLMOE), PhaseThresholds::default()).unwrap();
        let mut expect = vec![Surge; 10];
        expect.extend([Stabilization; 4]);
        expect.extend([Relaxation; 6]);
        assert_eq!(r.labels, expect);
        assert_eq!(r.peak_index, 7);
        assert!(r.surge_detected && r.relaxation_detected);
        assert!(r.peak_to_final_ratio.unwrap() >= 4.2);
    }

    #[test]
    fn openmoe_trajectory_with_dormancy() {
        let r = classify_phases(
            &series(&[0.0, 0.0, 0.0, 3.3, 35.6, 27.3]),
            PhaseThresholds::default(),
        )
        .unwrap();
        assert_eq!(
            r.labels,
            vec![Dormant, Dormant, Dormant, Surge, Surge, Relaxation]
        );
        assert_eq!(r.start_value, 3.3);
        assert!(r.surge_detected);
    }

    #[test]
    fn constant_series_is_stable() {
        let r = classify_phases(&series(&[10.0; 6]), PhaseThresholds::default()).unwrap();
        assert_eq!(r.labels, vec![Stabilization; 6]);
        assert!(!r.surge_detected && !r.relaxation_detected);
        assert_eq!(r.peak_to_final_ratio, Some(1.0));
    }

    #[test]
    fn rejects_bad_series() {
        assert!(classify_phases(&series(&[1.0, 2.0]), PhaseThresholds::default()).is_err());
        let mut s = series(&[1.0, 2.0, 3.0]);
        s[2].step = 1000;
        assert!(classify_phases(&s, PhaseThresholds::default()).is_err());
    }

    #[test]
    fn text_has_one_line_per_checkpoint() {
        let r = classify_phases(&series(&OLMOE), PhaseThresholds::default()).unwrap();
        let text = r.to_text();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 21);
        assert!(text.contains("8000\tsurge"));
    }

    proptest! {
        #[test]
        fn labels_invariant_under_rescaling(
            raw in prop::collection::vec(prop_oneof![Just(0.0), 1.0f64..60.0], 3..25),
            scale in 0.1f64..10.0,
        ) {
            let base = classify_phases(&series(&raw), PhaseThresholds::default()).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|v| v * scale).collect();
            let other = classify_phases(&series(&scaled), PhaseThresholds::default()).unwrap();
            prop_assert_eq!(base.labels, other.labels);
            prop_assert_eq!(base.surge_detected, other.surge_detected);
            prop_assert_eq!(base.relaxation_detected, other.relaxation_detected);
        }
    }
}
