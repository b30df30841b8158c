//! Desk-scale scaling, uniformity, tail, large-deviation and bulk experiments.
//!
//! Rare events go through the transfer oracle, typical-event statistics through the
//! sampler, and energy gaps through the minimizer. Every experiment returns an
//! [`ExperimentResult`] carrying its config and config hash, so `report` can refuse
//! to mix runs. The asymptotic regimes (exponentially long domains) are out of reach,
//! so every check here is a bracket or a trend at small sizes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy_min::{energy_gap, Constraint, EnergyProblem};
use crate::error::{Error, Result};
use crate::gibbs_sampler::{pool_series, run_chains_with, EventEstimate, SamplerConfig};
use crate::path_domain::{detect_layers, Grid, LevelKind, Path};
use crate::persistence::{config_hash_hex, load_record, save_record, write_atomic, Validate};
use crate::potential::{well_constants, Potential};
use crate::stats::{chi_square_flat, linear_fit};
use crate::transfer_oracle::{
    build_transfer, event_probability_exact, marginal, window_sites, AcceptAll, Confinement,
    EventAutomaton, LayerCounter, Orientation, StateGrid, Threshold, TransferModel, TransferOptions,
};

pub const RESULT_FORMAT: &str = "experiment-result";

/// Below this `log p` an oracle value is treated as lost in the floor.
pub const LOG_PROB_FLOOR: f64 = -60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    LayerScaling,
    Uniformity,
    OnepointTail,
    LdCheck,
    BulkAndHitting,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::LayerScaling,
        ExperimentId::Uniformity,
        ExperimentId::OnepointTail,
        ExperimentId::LdCheck,
        ExperimentId::BulkAndHitting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::LayerScaling => "layer_scaling",
            ExperimentId::Uniformity => "uniformity",
            ExperimentId::OnepointTail => "onepoint_tail",
            ExperimentId::LdCheck => "ld_check",
            ExperimentId::BulkAndHitting => "bulk_and_hitting",
        }
    }

    /// Accepts the snake-case name or its kebab-case spelling.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.replace('-', "_");
        Self::ALL.into_iter().find(|id| id.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Oracle,
    Sampler,
}

/// Events that both the oracle and the minimizer can express.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LdEvent {
    Whole,
    /// `u(x) ≥ level` (or `≤`) at one node.
    Threshold { x: f64, level: f64, above: bool },
    /// `lo ≤ u ≤ hi` at every node of `window`.
    Band {
        window: (f64, f64),
        lo: Option<f64>,
        hi: Option<f64>,
    },
}

impl LdEvent {
    pub fn label(&self) -> String {
        let bound = |b: Option<f64>, inf: &str| b.map_or(inf.to_string(), |v| format!("{v}"));
        match self {
            LdEvent::Whole => "whole".into(),
            LdEvent::Threshold { x, level, above } => {
                format!("u({x}) {} {level}", if *above { ">=" } else { "<=" })
            }
            LdEvent::Band { window, lo, hi } => format!(
                "u in [{}, {}] on [{}, {}]",
                bound(*lo, "-inf"),
                bound(*hi, "inf"),
                window.0,
                window.1
            ),
        }
    }

    fn automaton(&self, grid: &Grid) -> Result<Box<dyn EventAutomaton>> {
        Ok(match self {
            LdEvent::Whole => Box::new(AcceptAll),
            LdEvent::Threshold { x, level, above } => {
                let s = grid
                    .index_of(*x)
                    .ok_or_else(|| Error::Domain(format!("threshold point {x} is not a grid node")))?;
                Box::new(Threshold {
                    sites: (s, s),
                    level: *level,
                    above: *above,
                })
            }
            LdEvent::Band { window, lo, hi } => Box::new(Confinement {
                sites: window_sites(grid, window.0, window.1)?,
                lo: lo.unwrap_or(f64::NEG_INFINITY),
                hi: hi.unwrap_or(f64::INFINITY),
            }),
        })
    }

    fn constraint(&self) -> Constraint {
        match self {
            LdEvent::Whole => Constraint::None,
            LdEvent::Threshold { x, level, above } => Constraint::Threshold {
                x: *x,
                level: *level,
                above: *above,
            },
            LdEvent::Band { window, lo, hi } => Constraint::Band {
                window: *window,
                lo: *lo,
                hi: *hi,
            },
        }
    }

    fn inside(&self, half: f64) -> bool {
        match self {
            LdEvent::Whole => true,
            LdEvent::Threshold { x, .. } => x.abs() < half,
            LdEvent::Band { window, .. } => window.0 < window.1 && window.0 > -half && window.1 < half,
        }
    }
}

/// Parameters of one experiment. Fields an experiment does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    /// Noise strengths, sorted descending.
    pub eps: Vec<f64>,
    /// Domain half-lengths.
    pub ls: Vec<f64>,
    pub delta: f64,
    /// Half-length of the fixed interval of the large-deviation check.
    pub ell: f64,
    /// Window half-widths.
    pub d: Vec<f64>,
    pub ell0: f64,
    pub k_eps: usize,
    /// Reference noise levels of the bulk experiment, sorted descending.
    pub eps0: Vec<f64>,
    /// Ratios `ε/ε₀` of the bulk experiment.
    pub ratios: Vec<f64>,
    /// Levels of the one-point tail fit.
    pub m_levels: Vec<f64>,
    pub backend: Backend,
    pub dx: f64,
    /// Fixed ε and domain sizes of the layer-count L-slope fit.
    pub slope_eps: f64,
    pub slope_ls: Vec<f64>,
    /// Slack and constant of the three-layer lower-bound direction check.
    pub gamma: f64,
    pub floor_constant: f64,
    /// Boundary pairs of the large-deviation suite.
    pub boundary: Vec<(f64, f64)>,
    /// Boundary pairs of the uniformity sweep, run at the smallest ε.
    pub sweep_boundary: Vec<(f64, f64)>,
    pub sweep_event: LdEvent,
    /// Gated events of the large-deviation check.
    pub events: Vec<LdEvent>,
    /// Events recorded with their own decrease check but not held to the tolerance.
    pub diagnostic_events: Vec<LdEvent>,
    /// Main tolerance of the experiment (relative for the intercept, absolute otherwise).
    pub tolerance: f64,
    pub sweep_tolerance: f64,
    pub window_step: f64,
    pub min_effective: f64,
    pub flatness_bins: usize,
    pub hit_floor: f64,
    pub min_acceptance: f64,
    pub r2_min: f64,
    pub chains: usize,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub out_dir: Option<String>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::LayerScaling,
            eps: vec![0.2, 0.1, 0.05],
            ls: vec![5.0],
            delta: 0.2,
            ell: 3.0,
            d: vec![3.0],
            ell0: 3.0,
            k_eps: 1,
            eps0: vec![0.8, 0.2],
            ratios: vec![0.25, 0.0625],
            m_levels: vec![1.5, 2.0, 2.5, 3.0],
            backend: Backend::Oracle,
            dx: 0.05,
            slope_eps: 0.1,
            slope_ls: vec![40.0, 80.0, 160.0],
            gamma: 0.5,
            floor_constant: 1.0,
            boundary: vec![(-1.0, -1.0)],
            sweep_boundary: [-2.0, 0.0, 2.0]
                .iter()
                .flat_map(|&a| [-2.0, 0.0, 2.0].map(|b| (a, b)))
                .collect(),
            sweep_event: LdEvent::Threshold {
                x: 0.0,
                level: 0.5,
                above: true,
            },
            events: vec![
                LdEvent::Whole,
                LdEvent::Threshold {
                    x: 0.0,
                    level: 0.5,
                    above: true,
                },
                LdEvent::Threshold {
                    x: 0.0,
                    level: 0.0,
                    above: true,
                },
                LdEvent::Band {
                    window: (-0.25, 0.25),
                    lo: Some(0.5),
                    hi: None,
                },
                LdEvent::Band {
                    window: (-1.0, 1.0),
                    lo: Some(-1.5),
                    hi: Some(1.5),
                },
                LdEvent::Band {
                    window: (-1.0, 1.0),
                    lo: None,
                    hi: Some(0.0),
                },
            ],
            diagnostic_events: vec![
                LdEvent::Threshold {
                    x: 0.0,
                    level: -1.5,
                    above: false,
                },
                LdEvent::Band {
                    window: (-0.25, 0.25),
                    lo: Some(-0.5),
                    hi: Some(0.5),
                },
                LdEvent::Band {
                    window: (-0.5, 0.5),
                    lo: Some(-0.5),
                    hi: Some(0.5),
                },
                LdEvent::Band {
                    window: (-1.0, 1.0),
                    lo: Some(-0.2),
                    hi: None,
                },
            ],
            tolerance: 0.3,
            sweep_tolerance: 0.2,
            window_step: 0.5,
            min_effective: 200.0,
            flatness_bins: 4,
            hit_floor: 0.5,
            min_acceptance: 0.01,
            r2_min: 0.95,
            chains: 4,
            sweeps: 500_000,
            burn_in: 5_000,
            thin: 25,
            out_dir: None,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Defaults tuned to each experiment's desk-scale setting.
    pub fn preset(id: ExperimentId) -> Self {
        let base = Self {
            experiment: id,
            ..Self::default()
        };
        match id {
            ExperimentId::LayerScaling => base,
            ExperimentId::Uniformity => Self {
                eps: vec![0.08],
                ls: vec![12.0],
                backend: Backend::Sampler,
                ..base
            },
            ExperimentId::OnepointTail => Self {
                eps: vec![0.05],
                r2_min: 0.95,
                ..base
            },
            ExperimentId::LdCheck => Self {
                tolerance: 0.15,
                ..base
            },
            ExperimentId::BulkAndHitting => Self {
                eps: vec![],
                backend: Backend::Sampler,
                dx: 0.025,
                chains: 2,
                sweeps: 40_000,
                burn_in: 1_000,
                thin: 20,
                ..base
            },
        }
    }

    /// The preset for `id` with the fields of a JSON object laid over it.
    pub fn with_overrides(id: ExperimentId, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(id))?;
        let (Some(obj), Some(over)) = (base.as_object_mut(), overrides.as_object()) else {
            return Err(Error::config("config", "expected a JSON object"));
        };
        for (k, v) in over {
            if !obj.contains_key(k) {
                return Err(Error::config(k, "unknown field"));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::config("config", e.to_string()))?;
        if cfg.experiment != id {
            return Err(Error::config("experiment", "does not match the requested experiment"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sampler(&self, grid: Grid, bc: (f64, f64), eps: f64, seed: u64) -> SamplerConfig {
        let mut s = SamplerConfig::new(grid, bc.0, bc.1, eps, self.sweeps, seed);
        s.burn_in = self.burn_in;
        s.thin = self.thin;
        s
    }

    /// Seed of the `i`-th independent point.
    fn point_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

fn descending(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::config(name, "entries must be positive and finite"));
    }
    if v.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::config(name, "must be sorted strictly descending"));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(name, "must be positive and finite"))
    }
}

impl Validate for ExperimentConfig {
    fn validate(&self) -> Result<()> {
        descending("eps", &self.eps)?;
        descending("eps0", &self.eps0)?;
        positive("dx", self.dx)?;
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::config("delta", "must lie in (0, 1/2)"));
        }
        for &l in self.ls.iter().chain(&self.slope_ls) {
            positive("ls", l)?;
        }
        let needs_eps = self.experiment != ExperimentId::BulkAndHitting;
        if needs_eps && self.eps.is_empty() {
            return Err(Error::config("eps", "must not be empty"));
        }
        let sampler = matches!(self.experiment, ExperimentId::Uniformity | ExperimentId::BulkAndHitting);
        if sampler != (self.backend == Backend::Sampler) {
            return Err(Error::config(
                "backend",
                if sampler {
                    "this experiment measures typical events and needs the sampler"
                } else {
                    "this experiment measures rare events and needs the oracle"
                },
            ));
        }
        if sampler {
            if self.chains == 0 || self.thin == 0 || self.sweeps <= self.burn_in {
                return Err(Error::config("sweeps", "need chains ≥ 1, thin ≥ 1 and sweeps > burn_in"));
            }
        }
        match self.experiment {
            ExperimentId::LayerScaling => {
                if self.ls.is_empty() || self.slope_ls.len() < 2 {
                    return Err(Error::config("slope_ls", "need one L for the ε fit and two for the slope"));
                }
                if self.eps.len() < 2 {
                    return Err(Error::config("eps", "need at least two values for the fit"));
                }
                if self.eps.iter().chain([&self.slope_eps]).any(|e| !(0.04..=0.2).contains(e)) {
                    return Err(Error::config("eps", "layer scaling runs at ε in [0.04, 0.2]"));
                }
                if self.ls.iter().any(|&l| l > 20.0) {
                    return Err(Error::config("ls", "the ε fit runs at desk scale, L ≤ 20"));
                }
            }
            ExperimentId::Uniformity => {
                if self.eps.iter().any(|e| !(0.05..=0.1).contains(e)) {
                    return Err(Error::config("eps", "uniformity runs at ε in [0.05, 0.1]"));
                }
                if self.ls.iter().any(|l| !(10.0..=20.0).contains(l)) {
                    return Err(Error::config("ls", "uniformity runs at L in [10, 20]"));
                }
                if self.d.is_empty() {
                    return Err(Error::config("d", "must not be empty"));
                }
                for &d in &self.d {
                    positive("d", d)?;
                    if self.ls.iter().any(|&l| 2.0 * d > l) {
                        return Err(Error::config("d", "windows must fit inside the domain"));
                    }
                }
                positive("window_step", self.window_step)?;
                if self.flatness_bins < 2 {
                    return Err(Error::config("flatness_bins", "need at least two bins"));
                }
            }
            ExperimentId::OnepointTail => {
                if self.m_levels.len() < 2 || self.m_levels.iter().any(|&m| !(m > 0.0)) {
                    return Err(Error::config("m_levels", "need two or more positive levels"));
                }
            }
            ExperimentId::LdCheck => {
                if !(2.0..=4.0).contains(&self.ell) {
                    return Err(Error::config("ell", "the interval half-length lies in [2, 4]"));
                }
                for e in self.events.iter().chain(&self.diagnostic_events).chain([&self.sweep_event]) {
                    if !e.inside(self.ell) {
                        return Err(Error::config("events", format!("`{}` is not inside the domain", e.label())));
                    }
                }
                if self.events.is_empty() || self.boundary.is_empty() {
                    return Err(Error::config("events", "need at least one event and boundary pair"));
                }
            }
            ExperimentId::BulkAndHitting => {
                if !(2.0..=4.0).contains(&self.ell0) {
                    return Err(Error::config("ell0", "must lie in [2, 4]"));
                }
                if self.k_eps == 0 {
                    return Err(Error::config("k_eps", "must be at least 1"));
                }
                if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
                    return Err(Error::config("ratios", "entries must lie in (0, 1)"));
                }
                if self.eps0.len() < 2 {
                    return Err(Error::config("eps0", "need two schedules to compare"));
                }
                if !(self.min_acceptance > 0.0 && self.min_acceptance < 1.0) {
                    return Err(Error::config("min_acceptance", "must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// JSON has no infinities or NaN; these are written as the strings `"inf"`, `"-inf"`
/// and `"nan"` so records round-trip.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("not a number: `{s}`"))),
            },
        }
    }

    fn encode<S: Serializer>(v: f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }

    pub mod map {
        use std::collections::BTreeMap;

        use serde::ser::SerializeMap;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
            struct V(f64);
            impl serde::Serialize for V {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::encode(self.0, s)
                }
            }
            let mut out = s.serialize_map(Some(m.len()))?;
            for (k, v) in m {
                out.serialize_entry(k, &V(*v))?;
            }
            out.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
            BTreeMap::<String, super::Repr>::deserialize(d)?
                .into_iter()
                .map(|(k, r)| Ok((k, super::decode(r)?)))
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateTag {
    /// Deterministic value from the oracle or the minimizer; no error bar.
    ExactOracle,
    Sampler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub label: String,
    #[serde(with = "nonfinite::map")]
    pub params: BTreeMap<String, f64>,
    #[serde(with = "nonfinite")]
    pub estimate: f64,
    pub error: Option<f64>,
    pub tag: EstimateTag,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl PointRecord {
    fn exact(label: impl Into<String>, params: &[(&str, f64)], estimate: f64) -> Self {
        Self {
            label: label.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            estimate,
            error: None,
            tag: EstimateTag::ExactOracle,
            flags: Vec::new(),
        }
    }

    fn sampled(label: impl Into<String>, params: &[(&str, f64)], estimate: f64, error: f64) -> Self {
        Self {
            error: Some(error),
            tag: EstimateTag::Sampler,
            ..Self::exact(label, params, estimate)
        }
    }

    fn flag(mut self, f: impl Into<String>) -> Self {
        self.flags.push(f.into());
        self
    }

    pub fn param(&self, k: &str) -> Option<f64> {
        self.params.get(k).copied()
    }
}

/// One pass/fail comparison of a value against `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(with = "nonfinite")]
    pub value: f64,
    #[serde(with = "nonfinite")]
    pub lo: f64,
    #[serde(with = "nonfinite")]
    pub hi: f64,
    pub pass: bool,
    /// Non-gating checks are reported but do not decide the overall verdict.
    pub gating: bool,
}

impl Check {
    fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            lo,
            hi,
            pass: value >= lo && value <= hi,
            gating: true,
        }
    }

    fn info(self) -> Self {
        Self { gating: false, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: ExperimentId,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub version: String,
    pub records: Vec<PointRecord>,
    #[serde(with = "nonfinite::map")]
    pub fits: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub pass: bool,
}

impl ExperimentResult {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            experiment: config.experiment,
            config: config.clone(),
            config_hash: config_hash_hex(config)?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            records: Vec::new(),
            fits: BTreeMap::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            pass: false,
        })
    }

    fn finish(mut self) -> Self {
        self.pass = self.checks.iter().filter(|c| c.gating).all(|c| c.pass);
        self
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn records_labelled<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a PointRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }

    /// Hash and record invariants, checked before aggregation.
    pub fn verify(&self) -> Result<()> {
        if config_hash_hex(&self.config)? != self.config_hash {
            return Err(Error::Integrity(format!(
                "{}: the embedded config does not match its hash",
                self.experiment.name()
            )));
        }
        if self.config.experiment != self.experiment {
            return Err(Error::Integrity("experiment id and config disagree".into()));
        }
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.tag == EstimateTag::Sampler && r.error.is_none())
        {
            return Err(Error::Integrity(format!("sampler record `{}` has no error bar", r.label)));
        }
        Ok(())
    }
}

pub fn run_experiment(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    match config.experiment {
        ExperimentId::LayerScaling => exp_layer_scaling(config, potential),
        ExperimentId::Uniformity => exp_uniformity(config, potential),
        ExperimentId::OnepointTail => exp_onepoint_tail(config, potential),
        ExperimentId::LdCheck => exp_ld_check(config, potential),
        ExperimentId::BulkAndHitting => exp_bulk_and_hitting(config, potential),
    }
}

fn model(eps: f64, grid: Grid, dx: f64, potential: &Potential) -> Result<TransferModel> {
    build_transfer(eps, grid, potential, StateGrid::for_noise(eps, dx, None, 1.0)?)
}

/// Parity of the number of layers between `∓level`; accepts an even count.
struct LayerParity {
    level: f64,
}

impl EventAutomaton for LayerParity {
    fn name(&self) -> String {
        format!("even-layers(level={})", self.level)
    }
    fn levels(&self) -> Vec<f64> {
        vec![-self.level, self.level]
    }
    fn states(&self) -> usize {
        6
    }
    // state = 2·last + parity; last: 0 none, 1 low, 2 high.
    fn initial(&self, zone: usize) -> usize {
        match zone {
            0 => 2,
            2 => 4,
            _ => 0,
        }
    }
    fn cross(&self, s: usize, _: usize, _: usize, to: usize) -> usize {
        let (last, parity) = (s / 2, s % 2);
        match (to, last) {
            (0, 2) => 2 + (parity ^ 1),
            (0, _) => 2 + parity,
            (2, 1) => 4 + (parity ^ 1),
            (2, _) => 4 + parity,
            _ => s,
        }
    }
    fn node(&self, s: usize, _: usize, _: usize) -> usize {
        s
    }
    fn accepting(&self, s: usize) -> bool {
        s % 2 == 0
    }
}

/// Three-layer probabilities against the energy-entropy law `(2L)² exp(-2c₀/ε)`.
pub fn exp_layer_scaling(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    let wc = well_constants(potential, 64)?;
    let target = -2.0 * wc.c0;
    let counter = LayerCounter {
        level: 1.0 - config.delta,
        at_least: 3,
        orientation: Orientation::Both,
    };
    let mut points: Vec<(&str, f64, f64)> = Vec::new();
    for &l in &config.ls {
        for &e in &config.eps {
            points.push(("eps-fit", e, l));
        }
    }
    for &l in &config.slope_ls {
        points.push(("l-slope", config.slope_eps, l));
    }
    let probs: Vec<f64> = points
        .par_iter()
        .map(|&(_, e, l)| {
            let m = model(e, Grid::symmetric(l, config.dx)?, config.dx, potential)?;
            Ok(event_probability_exact(&m, (-1.0, 1.0), &counter, TransferOptions::default())?.log_prob)
        })
        .collect::<Result<_>>()?;

    let mut res = ExperimentResult::new(config)?;
    for (&(label, e, l), &lp) in points.iter().zip(&probs) {
        let mut r = PointRecord::exact(label, &[("eps", e), ("L", l)], lp);
        if !(lp >= LOG_PROB_FLOOR) {
            r = r.flag("below-floor");
        }
        res.records.push(r);
    }
    let usable = |label: &'static str| {
        res.records
            .iter()
            .filter(move |r| r.label == label && r.flags.is_empty())
            .cloned()
            .collect::<Vec<_>>()
    };

    for &l in &config.ls {
        let pts: Vec<PointRecord> = usable("eps-fit").into_iter().filter(|r| r.param("L") == Some(l)).collect();
        if pts.len() < 2 {
            res.notes.push(format!("L = {l}: fewer than two usable points, no ε fit"));
            continue;
        }
        let x: Vec<f64> = pts.iter().map(|r| r.param("eps").unwrap()).collect();
        let y: Vec<f64> = pts
            .iter()
            .map(|r| {
                let e = r.param("eps").unwrap();
                e * r.estimate + 2.0 * e * (2.0 * l).ln()
            })
            .collect();
        let fit = linear_fit(&x, &y);
        res.fits.insert(format!("intercept_L{l}"), fit.intercept);
        res.fits.insert(format!("eps_slope_L{l}"), fit.slope);
        let tol = config.tolerance * target.abs();
        res.checks
            .push(Check::within(format!("intercept_L{l}"), fit.intercept, target - tol, target + tol));

        // Lower-bound direction at the smallest ε.
        let last = pts.last().unwrap();
        let e = last.param("eps").unwrap();
        let bound = -(2.0 * wc.c0 + config.gamma) / e + 2.0 * (2.0 * l).ln() + config.floor_constant.ln();
        res.fits.insert(format!("lower_bound_margin_L{l}"), last.estimate - bound);
        res.checks.push(Check::within(
            format!("lower_bound_L{l}"),
            last.estimate - bound,
            0.0,
            f64::INFINITY,
        ));
    }

    let slope_pts = usable("l-slope");
    if slope_pts.len() >= 2 {
        let x: Vec<f64> = slope_pts.iter().map(|r| r.param("L").unwrap().ln()).collect();
        let y: Vec<f64> = slope_pts.iter().map(|r| r.estimate).collect();
        let fit = linear_fit(&x, &y);
        res.fits.insert("l_slope".into(), fit.slope);
        res.checks.push(Check::within("l_slope", fit.slope, 1.5, 2.5));
    } else {
        res.checks.push(Check::within("l_slope", f64::NAN, 1.5, 2.5));
    }

    // Boundary values -1 and 1 force an odd number of full layers.
    let (e, l) = (config.eps[0], config.ls[0]);
    let m = model(e, Grid::symmetric(l, config.dx)?, config.dx, potential)?;
    let even = event_probability_exact(&m, (-1.0, 1.0), &LayerParity { level: 1.0 }, TransferOptions::default())?;
    res.records
        .push(PointRecord::exact("even-parity", &[("eps", e), ("L", l)], even.prob));
    res.checks.push(Check::within("even_parity", even.prob, 0.0, 1e-12));
    res.notes.push(format!(
        "desk-scale bracket: reference -2c0 = {target:.4}; L-slope fitted at eps = {}",
        config.slope_eps
    ));
    Ok(res.finish())
}

/// Window statistics of a midpoint ensemble.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowStat {
    pub centre: f64,
    /// `(L/d)·p̂`, where `p̂` is the probability of a midpoint in `[c-d, c+d]`.
    pub statistic: f64,
    pub error: f64,
    /// Effective number of independent samples with a midpoint in the window.
    pub effective: f64,
}

/// `(L/d)·P(some midpoint in [c-d, c+d])` per centre, pooled over chains.
/// `midpoints[chain][sample]` lists the midpoints found in one stored path.
pub fn window_statistics(midpoints: &[Vec<Vec<f64>>], l: f64, d: f64, centres: &[f64]) -> Result<Vec<WindowStat>> {
    centres
        .iter()
        .map(|&c| {
            let series: Vec<Vec<f64>> = midpoints
                .iter()
                .map(|chain| {
                    chain
                        .iter()
                        .map(|m| f64::from(m.iter().any(|&x| (x - c).abs() <= d)))
                        .collect()
                })
                .collect();
            let est: EventEstimate = pool_series(&series)?;
            Ok(WindowStat {
                centre: c,
                statistic: l / d * est.p,
                error: l / d * est.se,
                effective: est.ess * est.p,
            })
        })
        .collect()
}

/// Chi-square flatness p-value of the midpoints in `[lo, hi]`, with counts deflated by
/// the mean autocorrelation of the bin indicators.
pub fn flatness_p_value(midpoints: &[Vec<Vec<f64>>], lo: f64, hi: f64, bins: usize) -> Result<f64> {
    let w = (hi - lo) / bins as f64;
    let total: f64 = midpoints.iter().map(|c| c.len() as f64).sum();
    let mut counts = Vec::with_capacity(bins);
    let mut inflation = 0.0;
    for b in 0..bins {
        let (a, z) = (lo + b as f64 * w, lo + (b + 1) as f64 * w);
        let series: Vec<Vec<f64>> = midpoints
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|m| m.iter().filter(|&&x| x >= a && x < z).count() as f64)
                    .collect()
            })
            .collect();
        let est = pool_series(&series)?;
        counts.push(est.p * total);
        inflation += if est.ess > 0.0 { total / est.ess } else { 1.0 };
    }
    let inflation = (inflation / bins as f64).max(1.0);
    let deflated: Vec<f64> = counts.iter().map(|c| c / inflation).collect();
    Ok(chi_square_flat(&deflated))
}

fn up_midpoints(path: &Path, delta: f64) -> Vec<f64> {
    detect_layers(path, LevelKind::DeltaMinus, delta)
        .ups()
        .map(|e| e.midpoint())
        .collect()
}

/// Sliding-window uniformity of δ⁻ up-layer midpoints under boundary values -1, 1.
pub fn exp_uniformity(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    let mut res = ExperimentResult::new(config)?;
    let mut point = 0;
    for &eps in &config.eps {
        for &l in &config.ls {
            let grid = Grid::symmetric(l, config.dx)?;
            let sc = config.sampler(grid, (-1.0, 1.0), eps, config.point_seed(point));
            point += 1;
            let delta = config.delta;
            let obs = run_chains_with(&sc, potential, config.chains, |p| up_midpoints(p, delta))?;
            let log_scale = eps.ln().abs();
            for &d in &config.d {
                if d < 4.0 * log_scale {
                    res.notes.push(format!(
                        "eps = {eps}, d = {d}: d is below 4|log eps| = {:.2}; windows are short of the asymptotic regime",
                        4.0 * log_scale
                    ));
                }
                let margin = (2.0 * d).max(4.0 * log_scale);
                let reach = l - d;
                let steps = (reach / config.window_step + 1e-9).floor() as i64;
                let mut centres: Vec<f64> = (-steps..=steps).map(|k| k as f64 * config.window_step).collect();
                if (reach - steps as f64 * config.window_step).abs() > 1e-9 {
                    centres.insert(0, -reach);
                    centres.push(reach);
                }
                let stats = window_statistics(&obs.series, l, d, &centres)?;
                let params = |c: f64| [("eps", eps), ("L", l), ("d", d), ("centre", c)];
                let mut central_dev: f64 = 0.0;
                let mut central_eff = f64::INFINITY;
                let mut central = 0;
                let mut edge = Vec::new();
                for s in &stats {
                    let mut r = PointRecord::sampled("window", &params(s.centre), s.statistic, s.error);
                    r.params.insert("effective".into(), s.effective);
                    let is_central = l - s.centre.abs() >= margin - 1e-9;
                    if is_central {
                        r = r.flag("central");
                        central += 1;
                        central_dev = central_dev.max((s.statistic - 1.0).abs());
                        central_eff = central_eff.min(s.effective);
                    }
                    if (l - s.centre.abs() - d).abs() < 1e-9 {
                        r = r.flag("boundary");
                        edge.push(s.statistic);
                    }
                    if s.effective < config.min_effective {
                        r = r.flag("low-ess");
                    }
                    res.records.push(r);
                }
                let tag = format!("eps{eps}_L{l}_d{d}");
                if central == 0 {
                    res.notes.push(format!("{tag}: no window satisfies the margin {margin:.2}"));
                    res.checks.push(Check::within(format!("central_windows_{tag}"), 0.0, 1.0, f64::INFINITY));
                    continue;
                }
                res.fits.insert(format!("max_deviation_{tag}"), central_dev);
                res.checks
                    .push(Check::within(format!("max_deviation_{tag}"), central_dev, 0.0, config.tolerance));
                res.checks.push(Check::within(
                    format!("min_effective_{tag}"),
                    central_eff,
                    config.min_effective,
                    f64::INFINITY,
                ));
                let boundary = crate::stats::mean(&edge);
                res.fits.insert(format!("boundary_statistic_{tag}"), boundary);
                res.checks
                    .push(Check::within(format!("boundary_below_one_{tag}"), boundary, 0.0, 1.0).info());
                let span = l - margin;
                let p = flatness_p_value(&obs.series, -span - d, span + d, config.flatness_bins)?;
                res.fits.insert(format!("flatness_p_{tag}"), p);
                res.fits.insert(format!("acceptance_{tag}"), crate::stats::mean(&obs.meta.acceptance));
            }
        }
    }
    res.notes.push(
        "margins are measured from the window centre to the domain boundary; boundary windows touch the boundary"
            .into(),
    );
    Ok(res.finish())
}

/// `ε·log P(|u(0)| ≥ M)` against `M` from the oracle's one-point marginal.
pub fn exp_onepoint_tail(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    let mut res = ExperimentResult::new(config)?;
    for &eps in &config.eps {
        for &l in &config.ls {
            let grid = Grid::symmetric(l, config.dx)?;
            let site = grid
                .index_of(0.0)
                .ok_or_else(|| Error::Domain("x = 0 is not a grid node".into()))?;
            // The lattice must reach well past the largest level.
            let top = config.m_levels.iter().fold(1.0f64, |a, &b| a.max(b));
            let half = (top + 1.0).max(1.0 + 6.0 * eps.sqrt());
            let states = StateGrid::for_noise(eps, config.dx, Some(half), 1.0)?;
            let m = build_transfer(eps, grid, potential, states)?;
            let table = marginal(&m, (-1.0, 1.0), &[site])?;
            let tag = format!("eps{eps}_L{l}");
            let mut x = Vec::new();
            let mut y = Vec::new();
            let mut asym: f64 = 0.0;
            // M = 1 sits in the bulk of the distribution, where the bound says nothing.
            let mut levels = vec![1.0];
            levels.extend(config.m_levels.iter().copied());
            for (i, &lev) in levels.iter().enumerate() {
                let up = table.prob(0, |u| u >= lev);
                let down = table.prob(0, |u| u <= -lev);
                asym = asym.max((up - down).abs());
                let p = up + down;
                let params = [("eps", eps), ("L", l), ("M", lev)];
                let mut r = PointRecord::exact("tail", &params, eps * p.ln());
                if i == 0 {
                    r = r.flag("excluded");
                } else if !(p > 0.0 && p.is_finite()) {
                    r = r.flag("below-floor");
                } else {
                    x.push(lev);
                    y.push(eps * p.ln());
                }
                res.records.push(r);
            }
            res.checks.push(Check::within(format!("symmetric_tails_{tag}"), asym, 0.0, 1e-9));
            res.checks.push(Check::within(
                format!("usable_levels_{tag}"),
                x.len() as f64,
                config.m_levels.len() as f64,
                config.m_levels.len() as f64,
            ));
            if x.len() < 2 {
                res.notes.push(format!("{tag}: fewer than two usable levels"));
                res.checks.push(Check::within(format!("r2_{tag}"), f64::NAN, config.r2_min, 1.0));
                continue;
            }
            let fit = linear_fit(&x, &y);
            res.fits.insert(format!("slope_{tag}"), fit.slope);
            res.fits.insert(format!("r2_{tag}"), fit.r2);
            res.checks
                .push(Check::within(format!("slope_negative_{tag}"), fit.slope, f64::NEG_INFINITY, 0.0));
            res.checks.push(Check::within(format!("r2_{tag}"), fit.r2, config.r2_min, 1.0));
        }
    }
    Ok(res.finish())
}

/// `-ε·log μ(A)` from the oracle against the energy gap `ΔE` from the minimizer.
pub fn exp_ld_check(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    let grid = Grid::symmetric(config.ell, config.dx)?;
    let models: Vec<TransferModel> = config
        .eps
        .par_iter()
        .map(|&e| model(e, grid, config.dx, potential))
        .collect::<Result<_>>()?;
    let eps_min = *config.eps.last().unwrap();

    // (event, bc, gated, eps indices)
    let mut jobs: Vec<(&LdEvent, (f64, f64), &str, Vec<usize>)> = Vec::new();
    let all: Vec<usize> = (0..config.eps.len()).collect();
    for ev in &config.events {
        for &bc in &config.boundary {
            jobs.push((ev, bc, "suite", all.clone()));
        }
    }
    for ev in &config.diagnostic_events {
        for &bc in &config.boundary {
            jobs.push((ev, bc, "diagnostic", all.clone()));
        }
    }
    for &bc in &config.sweep_boundary {
        jobs.push((&config.sweep_event, bc, "sweep", vec![config.eps.len() - 1]));
    }

    struct Outcome {
        gap: f64,
        disc: Vec<(f64, f64)>,
    }
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|(ev, bc, _, idx)| {
            let gap = energy_gap(&EnergyProblem::new(grid, bc.0, bc.1, ev.constraint()), potential)?;
            let aut = ev.automaton(&grid)?;
            let mut disc = Vec::new();
            for &i in idx {
                let p = event_probability_exact(&models[i], *bc, aut.as_ref(), TransferOptions::default())?;
                let e = config.eps[i];
                disc.push((e, -e * p.log_prob - gap));
            }
            Ok(Outcome { gap, disc })
        })
        .collect::<Result<_>>()?;

    let mut res = ExperimentResult::new(config)?;
    let mut suite_max = vec![0.0f64; config.eps.len()];
    let mut sweep_max: f64 = 0.0;
    for ((ev, bc, kind, _), out) in jobs.iter().zip(&outcomes) {
        let name = format!("{} | bc ({}, {})", ev.label(), bc.0, bc.1);
        res.records.push(
            PointRecord::exact(format!("{kind}-gap"), &[("u_minus", bc.0), ("u_plus", bc.1)], out.gap)
                .flag(name.clone()),
        );
        for &(e, d) in &out.disc {
            res.records.push(
                PointRecord::exact(
                    format!("{kind}-discrepancy"),
                    &[("eps", e), ("u_minus", bc.0), ("u_plus", bc.1)],
                    d,
                )
                .flag(name.clone()),
            );
        }
        match *kind {
            "sweep" => sweep_max = sweep_max.max(out.disc[0].1.abs()),
            _ => {
                let last = out.disc.last().unwrap().1.abs();
                let gated = *kind == "suite";
                if gated {
                    for (m, &(_, d)) in suite_max.iter_mut().zip(&out.disc) {
                        *m = m.max(d.abs());
                    }
                }
                let c = Check::within(format!("{kind}: {name} at eps {eps_min}"), last, 0.0, config.tolerance);
                res.checks.push(if gated { c } else { c.info() });
                let decreasing = out.disc.windows(2).all(|w| w[1].1.abs() <= w[0].1.abs() + 1e-12);
                let c = Check::within(
                    format!("{kind}: {name} decreasing"),
                    f64::from(u8::from(decreasing)),
                    1.0,
                    1.0,
                );
                res.checks.push(c.info());
            }
        }
    }
    for (e, m) in config.eps.iter().zip(&suite_max) {
        res.fits.insert(format!("suite_max_eps{e}"), *m);
    }
    let decreasing = suite_max.windows(2).all(|w| w[1] < w[0]) || suite_max.iter().all(|&m| m == 0.0);
    res.checks.push(Check::within(
        "suite max decreasing in eps",
        f64::from(u8::from(decreasing)),
        1.0,
        1.0,
    ));
    if !config.sweep_boundary.is_empty() {
        res.fits.insert("sweep_max".into(), sweep_max);
        res.checks.push(Check::within(
            format!("sweep: {} over boundary pairs", config.sweep_event.label()),
            sweep_max,
            0.0,
            config.sweep_tolerance,
        ));
    }
    Ok(res.finish())
}

/// Does the path take the value `level` somewhere in `[a, b]`?
pub fn hits_level(path: &Path, a: f64, b: f64, level: f64) -> bool {
    let g = &path.grid;
    let i0 = g.position(a).ceil().max(0.0) as usize;
    let i1 = (g.position(b).floor().max(0.0) as usize).min(g.n + 1);
    let mut lo = path.value_at(a).min(path.value_at(b));
    let mut hi = path.value_at(a).max(path.value_at(b));
    for &v in path.values.get(i0..=i1).unwrap_or(&[]) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    lo <= level && level <= hi
}

/// Bulk fluctuations and hitting of `+1` under the two-sided conditioning near `+1`.
pub fn exp_bulk_and_hitting(config: &ExperimentConfig, potential: &Potential) -> Result<ExperimentResult> {
    config.validate()?;
    let ell0 = config.ell0;
    let half = (2 * config.k_eps + 1) as f64 * ell0;
    let grid = Grid::symmetric(half, config.dx)?;
    let anchors: Vec<f64> = (1..=config.k_eps)
        .flat_map(|k| {
            let x = (2 * k - 1) as f64 * ell0;
            [-x, x]
        })
        .collect();
    let (i0, i1) = window_sites(&grid, -ell0, ell0)?;
    let mut jobs = Vec::new();
    for &r in &config.ratios {
        for &e0 in &config.eps0 {
            jobs.push((r, e0));
        }
    }
    // Per job: per chain (accepted flag, exceed, hit).
    let observed: Vec<_> = jobs
        .iter()
        .enumerate()
        .map(|(i, &(r, e0))| {
            let eps = r * e0;
            let sc = config.sampler(grid, (1.0, 1.0), eps, config.point_seed(i));
            if sc.oracle_only() {
                return Err(Error::config(
                    "dx",
                    format!("eps = {eps} is below the sampler's range at dx = {}; refine dx", config.dx),
                ));
            }
            let thr = r.sqrt();
            let anchors = &anchors;
            run_chains_with(&sc, potential, config.chains, move |p| {
                let ok = anchors.iter().all(|&x| (p.value_at(x) - 1.0).abs() <= 0.5);
                let exceed = p.values[i0..=i1].iter().any(|v| (v - 1.0).abs() >= thr);
                (ok, exceed, hits_level(p, -ell0, ell0, 1.0))
            })
        })
        .collect::<Result<_>>()?;

    let mut res = ExperimentResult::new(config)?;
    let mut exceed = BTreeMap::new();
    let mut lambda_max: f64 = 0.0;
    for (&(r, e0), obs) in jobs.iter().zip(&observed) {
        let eps = r * e0;
        let total: usize = obs.series.iter().map(Vec::len).sum();
        let kept: Vec<Vec<(bool, bool)>> = obs
            .series
            .iter()
            .map(|c| c.iter().filter(|t| t.0).map(|t| (t.1, t.2)).collect())
            .collect();
        let accepted: usize = kept.iter().map(Vec::len).sum();
        let rate = accepted as f64 / total as f64;
        let params = [("eps", eps), ("eps0", e0), ("ratio", r)];
        res.records.push(PointRecord::sampled(
            "acceptance",
            &params,
            rate,
            (rate * (1.0 - rate) / total as f64).sqrt(),
        ));
        if rate < config.min_acceptance {
            return Err(Error::config(
                "ell0",
                format!(
                    "conditioning accepts {:.3}% of paths at eps = {eps}; use a larger eps or a smaller k_eps",
                    100.0 * rate
                ),
            ));
        }
        let series = |f: fn(&(bool, bool)) -> bool| -> Vec<Vec<f64>> {
            kept.iter().map(|c| c.iter().map(|t| f64::from(u8::from(f(t)))).collect()).collect()
        };
        let ex = pool_series(&series(|t| t.0))?;
        let hit = pool_series(&series(|t| t.1))?;
        res.records.push(PointRecord::sampled("exceedance", &params, ex.p, ex.se));
        res.records.push(PointRecord::sampled("hitting", &params, hit.p, hit.se));
        exceed.insert((r.to_bits(), e0.to_bits()), ex.p);
        lambda_max = lambda_max.max(1.0 - hit.p);
        res.checks.push(Check::within(
            format!("hitting eps {eps} eps0 {e0}"),
            hit.p,
            1.0 - config.hit_floor,
            1.0,
        ));
    }
    res.fits.insert("lambda_max".into(), lambda_max);
    res.checks.push(Check::within("lambda below one", lambda_max, 0.0, 1.0 - 1e-12));
    for &r in &config.ratios {
        for w in config.eps0.windows(2) {
            let a = exceed[&(r.to_bits(), w[0].to_bits())];
            let b = exceed[&(r.to_bits(), w[1].to_bits())];
            let ratio = if b > 0.0 { a / b } else { f64::INFINITY };
            res.fits.insert(format!("exceedance_ratio_r{r}_eps0_{}_{}", w[0], w[1]), ratio);
            res.checks.push(Check::within(
                format!("exceedance decreases, ratio {r}, eps0 {} -> {}", w[0], w[1]),
                ratio,
                1.0 + 1e-12,
                f64::INFINITY,
            ));
        }
    }
    Ok(res.finish())
}

pub fn save_result(dir: &FsPath, result: &ExperimentResult) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let file = dir.join(format!("{}.json", result.experiment.name()));
    save_record(&file, RESULT_FORMAT, result)?;
    Ok(file)
}

pub fn load_result(file: &FsPath) -> Result<ExperimentResult> {
    load_record(file, RESULT_FORMAT)
}

/// Verifies every result and refuses runs of one experiment under different configs.
pub fn check_aggregate(results: &[ExperimentResult]) -> Result<()> {
    let mut seen: BTreeMap<ExperimentId, &str> = BTreeMap::new();
    for r in results {
        r.verify()?;
        if let Some(h) = seen.insert(r.experiment, &r.config_hash) {
            if h != r.config_hash {
                return Err(Error::Integrity(format!(
                    "{} results come from different configs ({} vs {})",
                    r.experiment.name(),
                    &h[..12],
                    &r.config_hash[..12]
                )));
            }
        }
    }
    Ok(())
}

/// Writes `records.csv`, `checks.csv` and one whitespace-separated `<id>.dat` per
/// experiment into `dir`.
pub fn write_tables(results: &[ExperimentResult], dir: &FsPath) -> Result<Vec<PathBuf>> {
    check_aggregate(results)?;
    fs::create_dir_all(dir)?;
    let mut rec = csv::Writer::from_writer(Vec::new());
    rec.write_record(["experiment", "config_hash", "label", "params", "estimate", "error", "tag", "flags"])?;
    let mut chk = csv::Writer::from_writer(Vec::new());
    chk.write_record(["experiment", "config_hash", "check", "value", "lo", "hi", "pass", "gating"])?;
    let mut written = Vec::new();
    for r in results {
        let mut dat = format!("# {} {}\n", r.experiment.name(), r.config_hash);
        for p in &r.records {
            let params = serde_json::to_string(&p.params)?;
            let err = p.error.map_or(String::new(), |e| e.to_string());
            let tag = serde_json::to_value(p.tag)?.as_str().unwrap_or_default().to_string();
            rec.write_record([
                r.experiment.name(),
                &r.config_hash,
                &p.label,
                &params,
                &p.estimate.to_string(),
                &err,
                &tag,
                &p.flags.join(";"),
            ])?;
            let cols: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            dat.push_str(&format!(
                "{}\t{}\t{}\t{}\t# {}\n",
                p.label,
                cols.join(" "),
                p.estimate,
                p.error.unwrap_or(0.0),
                p.flags.join(";")
            ));
        }
        for c in &r.checks {
            chk.write_record([
                r.experiment.name(),
                &r.config_hash,
                &c.name,
                &c.value.to_string(),
                &c.lo.to_string(),
                &c.hi.to_string(),
                &c.pass.to_string(),
                &c.gating.to_string(),
            ])?;
        }
        let f = dir.join(format!("{}.dat", r.experiment.name()));
        write_atomic(&f, dat.as_bytes())?;
        written.push(f);
    }
    let into = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::Integrity(e.to_string()));
    let f = dir.join("records.csv");
    write_atomic(&f, &into(rec)?)?;
    written.push(f);
    let f = dir.join("checks.csv");
    write_atomic(&f, &into(chk)?)?;
    written.push(f);
    Ok(written)
}
