//! Checkpoint-series analysis: per-layer fits, layer averages, bootstrap
//! intervals and phase labels across a training run.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    classify_phases, gamma_critical, CheckpointRecord, Phase, PhaseReport, PhaseThresholds,
};
use crate::error::{Error, Result};
use crate::eval::bootstrap::{bootstrap_ci, gamma_ci_masses, BootstrapOptions};
use crate::identify::{decompose, fit_gamma, FitResult, DEFAULT_GAMMA_MAX, IN_SCOPE_THRESHOLD};
use crate::simplex::{entropy_normalized, QualityVector};
use crate::traces::{
    estimate_quality, load_from_masses, load_masses, observed_load, read_trace_file, split_half,
    LoadMode, Manifest, QualityMethod, RoutingTrace, TokenSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub quality_method: QualityMethod,
    pub load_mode: LoadMode,
    pub gamma_max: f64,
    /// Attach layer-average bootstrap intervals when present.
    pub bootstrap: Option<BootstrapOptions>,
    pub thresholds: PhaseThresholds,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            quality_method: QualityMethod::Mean,
            load_mode: LoadMode::Dispatch,
            gamma_max: DEFAULT_GAMMA_MAX,
            bootstrap: None,
            thresholds: PhaseThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub layer: usize,
    pub fit: FitResult,
    pub quality: QualityVector,
    pub spread: f64,
    pub entropy: f64,
    pub gamma_c: f64,
    pub floored: bool,
}

impl LayerFit {
    pub fn above_gamma_c(&self) -> bool {
        self.fit.gamma_eff > self.gamma_c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub record: CheckpointRecord,
    pub gamma_c: f64,
    /// `γ_eff / γ_c`.
    pub safety_margin: f64,
    pub alpha: Option<f64>,
    pub gamma_explicit: f64,
    pub gamma_implicit: f64,
    pub layers: Vec<LayerFit>,
    pub phase: Option<Phase>,
    pub error: Option<String>,
}

impl CheckpointRow {
    fn failed(step: u64, tokens: Option<u64>, error: String) -> Self {
        let mut record = CheckpointRecord::new(step, f64::NAN);
        record.tokens = tokens;
        Self {
            record,
            gamma_c: f64::NAN,
            safety_margin: f64::NAN,
            alpha: None,
            gamma_explicit: f64::NAN,
            gamma_implicit: f64::NAN,
            layers: Vec::new(),
            phase: None,
            error: Some(error),
        }
    }

    fn from_record(record: CheckpointRecord, experts: Option<usize>) -> Self {
        let gamma_c = match experts {
            Some(m) if record.spread.is_finite() => gamma_critical(m, record.spread),
            _ => f64::NAN,
        };
        Self {
            gamma_c,
            safety_margin: record.gamma_eff / gamma_c,
            alpha: None,
            gamma_explicit: f64::NAN,
            gamma_implicit: f64::NAN,
            layers: Vec::new(),
            phase: None,
            error: None,
            record,
        }
    }
}

/// One row of the plot-data export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub tokens: Option<u64>,
    /// Absent for a checkpoint that failed.
    pub gamma_eff: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    #[serde(rename = "B0")]
    pub spread: Option<f64>,
    #[serde(rename = "H")]
    pub entropy: Option<f64>,
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSeries {
    pub rows: Vec<CheckpointRow>,
    /// Present when at least three checkpoints succeeded.
    pub report: Option<PhaseReport>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.prec$}"),
        _ => "-".into(),
    }
}

impl CheckpointSeries {
    /// Classify a series whose per-checkpoint values are already known.
    /// `experts` enables the `γ_c` column.
    pub fn from_records(
        records: Vec<CheckpointRecord>,
        experts: Option<usize>,
        thresholds: PhaseThresholds,
    ) -> Result<Self> {
        let rows = records
            .into_iter()
            .map(|r| CheckpointRow::from_record(r, experts))
            .collect();
        let mut s = Self { rows, report: None };
        s.classify(thresholds)?;
        Ok(s)
    }

    fn classify(&mut self, thresholds: PhaseThresholds) -> Result<()> {
        let ok: Vec<usize> = (0..self.rows.len())
            .filter(|&i| self.rows[i].error.is_none())
            .collect();
        if ok.len() < 3 {
            return Ok(());
        }
        let records: Vec<CheckpointRecord> =
            ok.iter().map(|&i| self.rows[i].record.clone()).collect();
        let report = classify_phases(&records, thresholds)?;
        for (&i, &p) in ok.iter().zip(&report.labels) {
            self.rows[i].phase = Some(p);
        }
        self.report = Some(report);
        Ok(())
    }

    pub fn points(&self) -> Vec<SeriesPoint> {
        self.rows
            .iter()
            .map(|r| SeriesPoint {
                step: r.record.step,
                tokens: r.record.tokens,
                gamma_eff: finite(r.record.gamma_eff),
                ci_low: r.record.ci.map(|c| c.0),
                ci_high: r.record.ci.map(|c| c.1),
                spread: finite(r.record.spread),
                entropy: finite(r.record.entropy),
                phase: r.phase,
            })
            .collect()
    }

    pub fn to_plot_json(&self) -> String {
        serde_json::to_string_pretty(&self.points()).expect("plot points serialize")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "step\ttokens\tgamma_eff\tci_low\tci_high\tB0\tH\tgamma_c\tmargin\tlayers_above_gamma_c\tgamma_explicit\tgamma_implicit\tphase\terror\n",
        );
        for r in &self.rows {
            let rec = &r.record;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                rec.step,
                rec.tokens.map_or("-".into(), |t| t.to_string()),
                fmt_opt(Some(rec.gamma_eff), 4),
                fmt_opt(rec.ci.map(|c| c.0), 4),
                fmt_opt(rec.ci.map(|c| c.1), 4),
                fmt_opt(Some(rec.spread), 4),
                fmt_opt(Some(rec.entropy), 4),
                fmt_opt(Some(r.gamma_c), 4),
                fmt_opt(Some(r.safety_margin), 3),
                rec.layers_above_gamma_c
                    .map_or("-".into(), |n| n.to_string()),
                fmt_opt(Some(r.gamma_explicit), 4),
                fmt_opt(Some(r.gamma_implicit), 4),
                r.phase.map_or("-".into(), |p| p.to_string()),
                r.error.as_deref().unwrap_or("-"),
            );
        }
        if let Some(rep) = &self.report {
            for line in rep.to_text().lines().filter(|l| l.starts_with('#')) {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }
}

/// Token sets for quality and for load under `method`.
fn fit_sets(trace: &RoutingTrace, method: QualityMethod) -> (TokenSet, TokenSet) {
    let all = trace.all_tokens();
    if method == QualityMethod::SplitHalf {
        let (first, second) = split_half(trace, &all);
        if !first.is_empty() && !second.is_empty() {
            return (first, second);
        }
    }
    (all.clone(), all)
}

fn fit_layer(
    trace: &RoutingTrace,
    layer: usize,
    q_set: &TokenSet,
    load_set: &TokenSet,
    cfg: &SeriesConfig,
) -> Result<LayerFit> {
    let method = match cfg.quality_method {
        QualityMethod::SplitHalf => QualityMethod::Mean,
        m => m,
    };
    let quality = estimate_quality(trace, layer, q_set, method)?;
    let obs = observed_load(trace, layer, load_set, cfg.load_mode)?;
    let fit = fit_gamma(&obs.load, &quality, trace.lambda() as f64, cfg.gamma_max)?;
    let spread = quality.spread();
    Ok(LayerFit {
        layer,
        fit,
        spread,
        entropy: entropy_normalized(&obs.load),
        gamma_c: gamma_critical(trace.experts(), spread),
        floored: obs.floored,
        quality,
    })
}

/// Layer-average statistics of one trace.
///
/// `γ_eff` is averaged over in-scope layers only (0 when none is in scope);
/// `B0` and `H` over all layers.
pub fn fit_checkpoint(
    trace: &RoutingTrace,
    step: u64,
    tokens: Option<u64>,
    alpha: Option<f64>,
    cfg: &SeriesConfig,
) -> Result<CheckpointRow> {
    let (q_set, load_set) = fit_sets(trace, cfg.quality_method);
    let alpha = alpha.or(trace.alpha().map(f64::from));
    let mut layers = (0..trace.layers())
        .into_par_iter()
        .map(|l| fit_layer(trace, l, &q_set, &load_set, cfg))
        .collect::<Result<Vec<_>>>()?;
    for l in &mut layers {
        l.fit = l
            .fit
            .clone()
            .with_decomposition(alpha.unwrap_or(0.0), trace.experts());
    }
    let in_scope: Vec<usize> = layers
        .iter()
        .filter(|l| l.fit.gamma_eff > IN_SCOPE_THRESHOLD)
        .map(|l| l.layer)
        .collect();
    let average = |fits: &[f64]| {
        if in_scope.is_empty() {
            0.0
        } else {
            in_scope.iter().map(|&l| fits[l]).sum::<f64>() / in_scope.len() as f64
        }
    };
    let gammas: Vec<f64> = layers.iter().map(|l| l.fit.gamma_eff).collect();
    let gamma_eff = average(&gammas);
    let n = layers.len() as f64;
    let spread = layers.iter().map(|l| l.spread).sum::<f64>() / n;
    let entropy = layers.iter().map(|l| l.entropy).sum::<f64>() / n;

    let ci = match cfg.bootstrap {
        None => None,
        Some(opts) => {
            let batches: Vec<usize> = (0..trace.batch_count())
                .filter(|&b| {
                    load_set
                        .as_slice()
                        .binary_search(&trace.batch(b).start)
                        .is_ok()
                })
                .collect();
            let units = batches
                .iter()
                .map(|&b| {
                    let set = trace.batch_tokens(&[b]);
                    (0..trace.layers())
                        .map(|l| load_masses(trace, l, &set, cfg.load_mode))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let lambda = trace.lambda() as f64;
            let ci = bootstrap_ci(
                &units,
                |pick| {
                    let mut fits = vec![0.0; layers.len()];
                    for &l in &in_scope {
                        let mut masses = vec![0.0; trace.experts()];
                        for unit in pick {
                            masses.iter_mut().zip(&unit[l]).for_each(|(a, &c)| *a += c);
                        }
                        let load = load_from_masses(&masses)?.load;
                        fits[l] =
                            fit_gamma(&load, &layers[l].quality, lambda, cfg.gamma_max)?.gamma_eff;
                    }
                    Ok(average(&fits))
                },
                opts,
            )?;
            let per_layer = layers
                .par_iter()
                .map(|lf| {
                    let masses: Vec<Vec<f64>> = units.iter().map(|u| u[lf.layer].clone()).collect();
                    gamma_ci_masses(&masses, &lf.quality, lambda, cfg.gamma_max, opts)
                })
                .collect::<Result<Vec<_>>>()?;
            for (lf, c) in layers.iter_mut().zip(per_layer) {
                lf.fit.ci_low = Some(c.low);
                lf.fit.ci_high = Some(c.high);
            }
            Some((ci.low, ci.high))
        }
    };

    let (gamma_explicit, gamma_implicit) =
        decompose(gamma_eff, alpha.unwrap_or(0.0), trace.experts());
    let gamma_c = gamma_critical(trace.experts(), spread);
    Ok(CheckpointRow {
        record: CheckpointRecord {
            step,
            tokens,
            gamma_eff,
            ci,
            spread,
            entropy,
            layers_above_gamma_c: Some(layers.iter().filter(|l| l.above_gamma_c()).count()),
        },
        gamma_c,
        safety_margin: gamma_eff / gamma_c,
        alpha,
        gamma_explicit,
        gamma_implicit,
        layers,
        phase: None,
        error: None,
    })
}

/// Fit every checkpoint of a manifest and classify the resulting series.
/// A checkpoint that fails is kept as a row with its error.
pub fn analyze_series(manifest: &Manifest, cfg: &SeriesConfig) -> Result<CheckpointSeries> {
    let rows: Vec<CheckpointRow> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let run = || -> Result<CheckpointRow> {
                let trace = read_trace_file(&e.path)?;
                if trace.experts() != e.experts || trace.top_k() != e.top_k {
                    return Err(Error::invalid(format!(
                        "trace has M={} K={}, manifest says M={} K={}",
                        trace.experts(),
                        trace.top_k(),
                        e.experts,
                        e.top_k
                    )));
                }
                fit_checkpoint(&trace, e.step, Some(e.tokens), e.alpha, cfg)
            };
            run().unwrap_or_else(|err| {
                CheckpointRow::failed(e.step, Some(e.tokens), err.to_string())
            })
        })
        .collect();
    if rows.iter().all(|r| r.error.is_some()) {
        let first = rows[0].error.clone().unwrap_or_default();
        return Err(Error::PipelineFailed(format!(
            "all {} checkpoints failed; first error: {first}",
            rows.len()
        )));
    }
    let mut series = CheckpointSeries { rows, report: None };
    series.classify(cfg.thresholds)?;
    Ok(series)
}

#[derive(Debug, Deserialize)]
struct SeriesCsvRow {
    step: u64,
    #[serde(default)]
    tokens: Option<u64>,
    gamma_eff: f64,
    #[serde(default)]
    ci_low: Option<f64>,
    #[serde(default)]
    ci_high: Option<f64>,
    #[serde(default, rename = "B0")]
    spread: Option<f64>,
    #[serde(default, rename = "H")]
    entropy: Option<f64>,
    #[serde(default)]
    phase: Option<String>,
}

/// Read a precomputed series: a CSV with header columns `step`,
/// `gamma_eff` and optionally `tokens`, `ci_low`, `ci_high`, `B0`, `H` and
/// `phase`. Returns the records and any phase labels given in the file.
pub fn read_series_csv(
    path: impl AsRef<Path>,
) -> Result<(Vec<CheckpointRecord>, Vec<Option<Phase>>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = Vec::new();
    let mut phases = Vec::new();
    for row in reader.deserialize() {
        let row: SeriesCsvRow = row?;
        let ci = match (row.ci_low, row.ci_high) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        records.push(CheckpointRecord {
            step: row.step,
            tokens: row.tokens,
            gamma_eff: row.gamma_eff,
            ci,
            spread: row.spread.unwrap_or(f64::NAN),
            entropy: row.entropy.unwrap_or(f64::NAN),
            layers_above_gamma_c: None,
        });
        phases.push(
            row.phase
                .filter(|p| !p.is_empty() && p != "-")
                .map(|p| p.parse())
                .transpose()?,
        );
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "{} holds no checkpoints",
            path.display()
        )));
    }
    Ok((records, phases))
}
