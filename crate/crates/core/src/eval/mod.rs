//! Held-out evaluation of load predictors, token clustering for the
//! multi-type model, bootstrap intervals and the checkpoint-series pipeline.

use std::cell::RefCell;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_multitype, solve_single, MultiTypeSpec, SolverOptions};
use crate::error::{Error, Result};
use crate::identify::{check_identifiable, fit_gamma, fit_gamma_multitype, DEFAULT_GAMMA_MAX};
use crate::search::{minimize_bracketed, Boundary};
use crate::simplex::{l1, l1_distance, softmax_into, GameParams, LoadDistribution, QualityVector};
use crate::traces::{
    estimate_quality, observed_load, split_three_way, LoadMode, QualityMethod, RoutingTrace,
    SplitSpec, TokenSet,
};

mod bootstrap;
mod cluster;
mod diagnose;
mod series;

pub use bootstrap::{bootstrap_ci, gamma_ci, gamma_ci_masses, BootstrapCi, BootstrapOptions};
pub use cluster::{cluster_tokens, elbow_report, Clustering};
pub use diagnose::{diagnose_trace, diagnostics_tsv, DiagnoseConfig, LayerDiagnostics};
pub use series::{
    analyze_series, fit_checkpoint, read_series_csv, CheckpointRow, CheckpointSeries, LayerFit,
    SeriesConfig, SeriesPoint,
};

/// Lower end of the temperature search interval.
pub const T_MIN: f64 = 1e-3;
pub const DEFAULT_T_MAX: f64 = 100.0;
const SCAN_POINTS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub residual: f64,
    pub boundary: Boundary,
}

fn minimize_temperature(f: impl Fn(f64) -> f64, t_max: f64) -> Result<TemperatureFit> {
    if !(t_max.is_finite() && t_max > T_MIN) {
        return Err(Error::invalid(format!(
            "t_max must exceed {T_MIN}, got {t_max}"
        )));
    }
    // Search in log T so that small temperatures are resolved as finely as
    // large ones.
    let found = minimize_bracketed(|u| f(u.exp()), T_MIN.ln(), t_max.ln(), 1e-7, SCAN_POINTS);
    let temperature = match found.boundary {
        Boundary::AtLower => T_MIN,
        Boundary::AtUpper => t_max,
        Boundary::Interior => found.x.exp(),
    };
    Ok(TemperatureFit {
        temperature,
        residual: found.value,
        boundary: found.boundary,
    })
}

/// The `T` in `[1e-3, t_max]` minimizing `||softmax(q/T) − μ_obs||_1`.
pub fn fit_temperature(
    q: &QualityVector,
    mu_obs: &LoadDistribution,
    t_max: f64,
) -> Result<TemperatureFit> {
    if q.len() != mu_obs.len() {
        return Err(Error::invalid("quality and load disagree on expert count"));
    }
    check_identifiable(q)?;
    let m = q.len();
    let scratch = RefCell::new((vec![0.0; m], vec![0.0; m]));
    minimize_temperature(
        |t| {
            let (logits, p) = &mut *scratch.borrow_mut();
            for (l, &qi) in logits.iter_mut().zip(q.as_slice()) {
                *l = qi / t;
            }
            softmax_into(logits, p);
            l1(p, mu_obs.as_slice())
        },
        t_max,
    )
}

/// Average of per-token `softmax(s_t/T)` over a token set.
pub fn mixture_load(
    trace: &RoutingTrace,
    layer: usize,
    set: &TokenSet,
    temperature: f64,
) -> Result<LoadDistribution> {
    if set.is_empty() {
        return Err(Error::invalid("token set is empty"));
    }
    let m = trace.experts();
    let mut acc = vec![0.0; m];
    mixture_into(trace, layer, set, temperature, &mut acc);
    LoadDistribution::new(acc)
}

fn mixture_into(trace: &RoutingTrace, layer: usize, set: &TokenSet, t: f64, acc: &mut [f64]) {
    let m = trace.experts();
    let mut logits = vec![0.0; m];
    let mut p = vec![0.0; m];
    acc.iter_mut().for_each(|a| *a = 0.0);
    for tok in set.iter() {
        for (l, &s) in logits.iter_mut().zip(trace.token_logits(tok, layer)) {
            *l = s as f64 / t;
        }
        softmax_into(&logits, &mut p);
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    let n = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
}

/// Temperature of the per-token mixture fitted against `mu_obs` on `set`.
pub fn fit_mixture_temperature(
    trace: &RoutingTrace,
    layer: usize,
    set: &TokenSet,
    mu_obs: &LoadDistribution,
    t_max: f64,
) -> Result<TemperatureFit> {
    if set.is_empty() {
        return Err(Error::invalid("token set is empty"));
    }
    let acc = RefCell::new(vec![0.0; trace.experts()]);
    minimize_temperature(
        |t| {
            let acc = &mut *acc.borrow_mut();
            mixture_into(trace, layer, set, t, acc);
            l1(acc, mu_obs.as_slice())
        },
        t_max,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Uniform,
    TempSoftmax,
    MfgSingle,
    MfgMultitype,
    MixtureSoftmax,
    IndepClusterSoftmax,
    IndepClusterMfg,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::Uniform,
        BaselineKind::TempSoftmax,
        BaselineKind::MfgSingle,
        BaselineKind::MfgMultitype,
        BaselineKind::MixtureSoftmax,
        BaselineKind::IndepClusterSoftmax,
        BaselineKind::IndepClusterMfg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Uniform => "uniform",
            BaselineKind::TempSoftmax => "temp_softmax",
            BaselineKind::MfgSingle => "mfg_single",
            BaselineKind::MfgMultitype => "mfg_multitype",
            BaselineKind::MixtureSoftmax => "mixture_softmax",
            BaselineKind::IndepClusterSoftmax => "indep_cluster_softmax",
            BaselineKind::IndepClusterMfg => "indep_cluster_mfg",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-cluster parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayerModel {
    /// Cluster shares of the evaluation tokens.
    pub weights: Vec<f64>,
    pub qualities: Vec<QualityVector>,
    /// Congestion shared by all clusters.
    pub gamma: f64,
    /// Independent per-cluster temperatures.
    pub temperatures: Vec<f64>,
    /// Independent per-cluster congestion coefficients.
    pub gammas: Vec<f64>,
}

/// Everything the baselines need to predict one layer's load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub lambda: f64,
    pub quality: QualityVector,
    pub temperature: f64,
    pub gamma: f64,
    pub clusters: Option<ClusterLayerModel>,
    /// Per-token softmax mixture over the evaluation tokens.
    pub mixture: Option<LoadDistribution>,
}

fn weighted_sum(parts: &[(f64, LoadDistribution)], m: usize) -> Result<LoadDistribution> {
    let mut acc = vec![0.0; m];
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    for (w, p) in parts {
        acc.iter_mut()
            .zip(p.as_slice())
            .for_each(|(a, b)| *a += w / total * b);
    }
    LoadDistribution::new(acc)
}

fn tempered(q: &QualityVector, t: f64) -> Result<LoadDistribution> {
    crate::simplex::softmax(&q.as_slice().iter().map(|v| v / t).collect::<Vec<_>>())
}

/// The load predicted by one baseline.
pub fn predict(kind: BaselineKind, model: &LayerModel) -> Result<LoadDistribution> {
    let m = model.quality.len();
    let opts = SolverOptions::default();
    let clusters = || {
        model
            .clusters
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{kind} needs a clustering")))
    };
    match kind {
        BaselineKind::Uniform => LoadDistribution::uniform(m),
        BaselineKind::TempSoftmax => tempered(&model.quality, model.temperature),
        BaselineKind::MfgSingle => Ok(solve_single(
            &model.quality,
            GameParams::new(model.gamma, model.lambda)?,
            opts,
        )?
        .mu),
        BaselineKind::MfgMultitype => {
            let c = clusters()?;
            let spec = MultiTypeSpec::normalized(c.weights.clone(), c.qualities.clone())?;
            Ok(solve_multitype(&spec, GameParams::new(c.gamma, model.lambda)?, opts)?.aggregate)
        }
        BaselineKind::MixtureSoftmax => model
            .mixture
            .clone()
            .ok_or_else(|| Error::invalid("mixture_softmax needs per-token logits")),
        BaselineKind::IndepClusterSoftmax => {
            let c = clusters()?;
            let parts = c
                .weights
                .iter()
                .zip(&c.qualities)
                .zip(&c.temperatures)
                .map(|((&w, q), &t)| Ok((w, tempered(q, t)?)))
                .collect::<Result<Vec<_>>>()?;
            weighted_sum(&parts, m)
        }
        BaselineKind::IndepClusterMfg => {
            let c = clusters()?;
            let parts = c
                .weights
                .iter()
                .zip(&c.qualities)
                .zip(&c.gammas)
                .map(|((&w, q), &g)| {
                    Ok((
                        w,
                        solve_single(q, GameParams::new(g, model.lambda)?, opts)?.mu,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            weighted_sum(&parts, m)
        }
    }
}

/// L1 distance between a prediction and the dispatch load observed on the
/// held-out set.
pub fn heldout_l1(
    predicted: &LoadDistribution,
    trace: &RoutingTrace,
    layer: usize,
    heldout: &TokenSet,
    mode: LoadMode,
) -> Result<f64> {
    let obs = observed_load(trace, layer, heldout, mode)?;
    l1_distance(predicted, &obs.load)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fractions: [f64; 3],
    /// Number of token types for the multi-type baselines.
    pub clusters: usize,
    /// Layers concatenated for clustering; all layers when absent.
    pub cluster_layers: Option<Vec<usize>>,
    pub quality_method: QualityMethod,
    pub load_mode: LoadMode,
    pub gamma_max: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fractions: [1.0 / 3.0; 3],
            clusters: 4,
            cluster_layers: None,
            quality_method: QualityMethod::Mean,
            load_mode: LoadMode::Dispatch,
            gamma_max: DEFAULT_GAMMA_MAX,
            t_max: DEFAULT_T_MAX,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub layer: usize,
    /// Held-out L1 of each baseline, aligned with [`BaselineKind::ALL`].
    pub l1: Vec<f64>,
    pub model: LayerModel,
    /// Observed loads were floored somewhere in this layer.
    pub floored: bool,
}

impl LayerEval {
    pub fn l1_of(&self, kind: BaselineKind) -> f64 {
        self.l1[BaselineKind::ALL.iter().position(|&k| k == kind).unwrap()]
    }

    /// `(L1_single − L1_multi)/L1_single` in percent.
    pub fn improvement_pct(&self) -> f64 {
        let s = self.l1_of(BaselineKind::MfgSingle);
        let m = self.l1_of(BaselineKind::MfgMultitype);
        if s > 0.0 {
            100.0 * (s - m) / s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_sizes: [usize; 3],
    pub clusters: usize,
    pub layers: Vec<LayerEval>,
}

impl EvalReport {
    fn mean_over(&self, layers: &[LayerEval]) -> Vec<f64> {
        (0..BaselineKind::ALL.len())
            .map(|k| layers.iter().map(|l| l.l1[k]).sum::<f64>() / layers.len().max(1) as f64)
            .collect()
    }

    /// Mean held-out L1 of each baseline over all layers.
    pub fn mean(&self) -> Vec<f64> {
        self.mean_over(&self.layers)
    }

    /// Means over the first and second half of the layers.
    pub fn early_late(&self) -> (Vec<f64>, Vec<f64>) {
        let mid = self.layers.len().div_ceil(2);
        (
            self.mean_over(&self.layers[..mid]),
            self.mean_over(&self.layers[mid..]),
        )
    }

    /// Layers on which the multi-type model beats the single-type model.
    pub fn multitype_wins(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.l1_of(BaselineKind::MfgMultitype) < l.l1_of(BaselineKind::MfgSingle))
            .count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer");
        for k in BaselineKind::ALL {
            let _ = write!(out, "\t{k}");
        }
        out.push_str("\tgamma_single\tgamma_multitype\ttemperature\timprovement_pct\n");
        for l in &self.layers {
            let _ = write!(out, "{}", l.layer);
            for v in &l.l1 {
                let _ = write!(out, "\t{v:.6}");
            }
            let gm = l.model.clusters.as_ref().map_or(f64::NAN, |c| c.gamma);
            let _ = writeln!(
                out,
                "\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
                l.model.gamma,
                gm,
                l.model.temperature,
                l.improvement_pct()
            );
        }
        let (early, late) = self.early_late();
        for (name, row) in [("mean", self.mean()), ("early", early), ("late", late)] {
            out.push_str(name);
            for v in row {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "# multi-type wins {}/{} layers; split A/B/C = {}/{}/{} tokens; {} clusters",
            self.multitype_wins(),
            self.layers.len(),
            self.split_sizes[0],
            self.split_sizes[1],
            self.split_sizes[2],
            self.clusters
        );
        out
    }
}

fn subset(set: &TokenSet, assign: &[usize], k: usize) -> TokenSet {
    TokenSet::new(
        set.iter()
            .zip(assign)
            .filter(|(_, &a)| a == k)
            .map(|(t, _)| t)
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn evaluate_layer(
    trace: &RoutingTrace,
    layer: usize,
    split: &SplitSpec,
    clustering: &Clustering,
    a_sets: &[TokenSet],
    c_weights: &[f64],
    a_weights: &[f64],
    cfg: &EvalConfig,
) -> Result<LayerEval> {
    let lambda = trace.lambda() as f64;
    let quality = estimate_quality(trace, layer, &split.a, cfg.quality_method)?;
    let obs_a = observed_load(trace, layer, &split.a, cfg.load_mode)?;
    let obs_c = observed_load(trace, layer, &split.c, cfg.load_mode)?;
    let mut floored = obs_a.floored || obs_c.floored;
    let temperature = fit_temperature(&quality, &obs_a.load, cfg.t_max)?.temperature;
    let gamma = fit_gamma(&obs_a.load, &quality, lambda, cfg.gamma_max)?.gamma_eff;

    let m = trace.experts();
    let slot = clustering.layers.iter().position(|&l| l == layer);
    let mut qualities = Vec::new();
    let mut loads = Vec::new();
    let mut temperatures = Vec::new();
    let mut gammas = Vec::new();
    for (k, a_k) in a_sets.iter().enumerate() {
        if a_k.is_empty() {
            let q = match slot {
                Some(s) => {
                    QualityVector::new(clustering.centroids[k][s * m..(s + 1) * m].to_vec())?
                }
                None => quality.clone(),
            };
            qualities.push(q);
            loads.push(obs_a.load.clone());
            temperatures.push(temperature);
            gammas.push(gamma);
            continue;
        }
        let q = estimate_quality(trace, layer, a_k, cfg.quality_method)?;
        let obs = observed_load(trace, layer, a_k, cfg.load_mode)?;
        floored |= obs.floored;
        temperatures
            .push(fit_temperature(&q, &obs.load, cfg.t_max).map_or(temperature, |f| f.temperature));
        gammas.push(fit_gamma(&obs.load, &q, lambda, cfg.gamma_max).map_or(gamma, |f| f.gamma_eff));
        qualities.push(q);
        loads.push(obs.load);
    }
    let shared = fit_gamma_multitype(
        &loads,
        &qualities,
        a_weights,
        &obs_a.load,
        lambda,
        cfg.gamma_max,
    )
    .map_or(gamma, |f| f.gamma_eff);

    let t_mix = fit_mixture_temperature(trace, layer, &split.a, &obs_a.load, cfg.t_max)?;
    let mixture = mixture_load(trace, layer, &split.c, t_mix.temperature)?;

    let model = LayerModel {
        lambda,
        quality,
        temperature,
        gamma,
        clusters: Some(ClusterLayerModel {
            weights: c_weights.to_vec(),
            qualities,
            gamma: shared,
            temperatures,
            gammas,
        }),
        mixture: Some(mixture),
    };
    let l1 = BaselineKind::ALL
        .iter()
        .map(|&k| l1_distance(&predict(k, &model)?, &obs_c.load))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LayerEval {
        layer,
        l1,
        model,
        floored,
    })
}

/// Split, cluster, fit every baseline on each layer and score it on the
/// held-out set.
pub fn evaluate_trace(trace: &RoutingTrace, cfg: &EvalConfig) -> Result<EvalReport> {
    let split = split_three_way(trace, cfg.fractions, cfg.seed)?;
    for (name, set) in [("A", &split.a), ("B", &split.b), ("C", &split.c)] {
        if set.is_empty() {
            return Err(Error::invalid(format!("split set {name} is empty")));
        }
    }
    let layers: Vec<usize> = cfg
        .cluster_layers
        .clone()
        .unwrap_or_else(|| (0..trace.layers()).collect());
    let clustering = cluster_tokens(trace, &layers, &split.b, cfg.clusters, cfg.seed)?;
    let assign_a = clustering.assign_all(trace, &split.a);
    let a_sets: Vec<TokenSet> = (0..cfg.clusters)
        .map(|k| subset(&split.a, &assign_a, k))
        .collect();
    let a_weights: Vec<f64> = a_sets
        .iter()
        .map(|s| s.len() as f64 / split.a.len() as f64)
        .collect();
    let c_weights = clustering.shares(trace, &split.c);

    let layers = (0..trace.layers())
        .into_par_iter()
        .map(|l| {
            evaluate_layer(
                trace,
                l,
                &split,
                &clustering,
                &a_sets,
                &c_weights,
                &a_weights,
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        split_sizes: [split.a.len(), split.b.len(), split.c.len()],
        clusters: cfg.clusters,
        layers,
    })
}
