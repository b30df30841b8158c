//! Blocked Metropolis-within-Gibbs sampling of the reweighted bridge.
//!
//! Each step resamples one block of the path. By the two-sided Markov property the
//! target conditional on the block endpoints is the pinned bridge reweighted by
//! `exp(-(1/ε)∫_block V)`, so a bridge proposal only needs the potential ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_bridge::{fill_bridge, sample_bridge, BridgeSpec};
use crate::path_domain::{Grid, Path};
use crate::persistence::config_hash;
use crate::potential::Potential;
use crate::rng::RandomSource;
use crate::stats::{series_estimate, SeriesEstimate};

/// Below this noise level at `dx = 0.05` the chain cannot cross between layer
/// sectors in practical time and probabilities should come from the transfer oracle.
pub const ORACLE_ONLY_EPSILON: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    BlockIndependence,
    Pcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub epsilon: f64,
    pub grid: Grid,
    pub u_minus: f64,
    pub u_plus: f64,
    /// Block length in grid cells.
    pub block: usize,
    pub kernel: Kernel,
    pub pcn_beta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Defaults: block independence kernel, 20-cell blocks, no burn-in, no thinning.
    pub fn new(grid: Grid, u_minus: f64, u_plus: f64, epsilon: f64, sweeps: usize, seed: u64) -> Self {
        Self {
            epsilon,
            grid,
            u_minus,
            u_plus,
            block: 20.min(grid.n),
            kernel: Kernel::BlockIndependence,
            pcn_beta: 0.2,
            sweeps,
            burn_in: 0,
            thin: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if self.block < 2 || self.block > self.grid.n {
            return Err(Error::config(
                "block",
                format!("block length must lie in [2, {}]", self.grid.n),
            ));
        }
        if !(self.pcn_beta > 0.0 && self.pcn_beta <= 1.0) {
            return Err(Error::config("pcn_beta", "must lie in (0, 1]"));
        }
        if self.sweeps <= self.burn_in {
            return Err(Error::config("sweeps", "must exceed burn_in"));
        }
        if self.thin == 0 {
            return Err(Error::config("thin", "must be at least 1"));
        }
        if !self.u_minus.is_finite() || !self.u_plus.is_finite() {
            return Err(Error::config("boundary", "boundary values must be finite"));
        }
        Ok(())
    }

    pub fn oracle_only(&self) -> bool {
        self.epsilon < ORACLE_ONLY_EPSILON * self.grid.dx / 0.05
    }

    pub fn bridge(&self) -> Result<BridgeSpec> {
        BridgeSpec::new(self.grid, self.u_minus, self.u_plus, self.epsilon)
    }
}

/// A chain position with per-cell trapezoid integrals of `V` cached.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub path: Path,
    pub cell_v: Vec<f64>,
    pub steps: u64,
    /// Indexed by kernel: block independence, pCN.
    pub accepted: [u64; 2],
    pub proposed: [u64; 2],
}

fn cell_integral(a: f64, b: f64, dx: f64, potential: &Potential) -> f64 {
    0.5 * dx * (potential.eval(a) + potential.eval(b))
}

impl ChainState {
    pub fn new(path: Path, potential: &Potential) -> Self {
        let dx = path.grid.dx;
        let cell_v = path
            .values
            .windows(2)
            .map(|w| cell_integral(w[0], w[1], dx, potential))
            .collect();
        Self {
            path,
            cell_v,
            steps: 0,
            accepted: [0; 2],
            proposed: [0; 2],
        }
    }

    /// Largest gap between cached and recomputed cell integrals.
    pub fn cache_drift(&self, potential: &Potential) -> f64 {
        let fresh = ChainState::new(self.path.clone(), potential);
        self.cell_v
            .iter()
            .zip(&fresh.cell_v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn acceptance_rate(&self) -> f64 {
        let p: u64 = self.proposed.iter().sum();
        if p == 0 {
            return f64::NAN;
        }
        self.accepted.iter().sum::<u64>() as f64 / p as f64
    }
}

/// `-(1/ε)(∫_block V(proposal) - ∫_block V(current))`, both by the trapezoid rule.
pub fn log_target_ratio(
    proposal: &Path,
    current: &Path,
    block: (f64, f64),
    epsilon: f64,
    potential: &Potential,
) -> Result<f64> {
    if proposal.grid != current.grid {
        return Err(Error::Contract("paths live on different grids".into()));
    }
    let g = &current.grid;
    let a = g
        .index_of(block.0)
        .ok_or_else(|| Error::Contract(format!("block end {} is not a grid point", block.0)))?;
    let b = g
        .index_of(block.1)
        .ok_or_else(|| Error::Contract(format!("block end {} is not a grid point", block.1)))?;
    for i in (0..a).chain(b + 1..g.points()) {
        if proposal.values[i].to_bits() != current.values[i].to_bits() {
            return Err(Error::Contract(format!(
                "proposal differs from the current path outside the block at x = {}",
                g.x(i)
            )));
        }
    }
    let dx = g.dx;
    let mut diff = 0.0;
    for k in a..b {
        diff += cell_integral(proposal.values[k], proposal.values[k + 1], dx, potential)
            - cell_integral(current.values[k], current.values[k + 1], dx, potential);
    }
    Ok(-diff / epsilon)
}

/// One Metropolis update of grid indices `[a, b]` with pinned endpoints.
pub fn block_step(
    state: &mut ChainState,
    block: (usize, usize),
    kernel: Kernel,
    beta: f64,
    epsilon: f64,
    potential: &Potential,
    rng: &mut RandomSource,
    scratch: &mut Vec<f64>,
) {
    let (a, b) = block;
    debug_assert!(b > a && b < state.path.len());
    if b < a + 2 {
        return;
    }
    let dx = state.path.grid.dx;
    let cur = &state.path.values[a..=b];
    scratch.clear();
    scratch.extend_from_slice(cur);
    let kid = match kernel {
        Kernel::BlockIndependence => {
            fill_bridge(scratch, dx, epsilon, rng);
            0
        }
        Kernel::Pcn => {
            // Centred noise bridge, then mix around the chord.
            let last = scratch.len() - 1;
            let (ua, ub) = (cur[0], cur[last]);
            let rho = (1.0 - beta * beta).sqrt();
            scratch.iter_mut().for_each(|v| *v = 0.0);
            fill_bridge(scratch, dx, epsilon, rng);
            for k in 1..last {
                let h = ua + (ub - ua) * k as f64 / last as f64;
                scratch[k] = h + rho * (cur[k] - h) + beta * scratch[k];
            }
            scratch[0] = ua;
            scratch[last] = ub;
            1
        }
    };
    let mut new_cells = 0.0;
    let mut old_cells = 0.0;
    for k in 0..scratch.len() - 1 {
        new_cells += cell_integral(scratch[k], scratch[k + 1], dx, potential);
        old_cells += state.cell_v[a + k];
    }
    let log_ratio = -(new_cells - old_cells) / epsilon;
    state.proposed[kid] += 1;
    state.steps += 1;
    if log_ratio >= 0.0 || rng.uniform().ln() < log_ratio {
        state.accepted[kid] += 1;
        state.path.values[a..=b].copy_from_slice(scratch);
        for k in 0..scratch.len() - 1 {
            state.cell_v[a + k] = cell_integral(scratch[k], scratch[k + 1], dx, potential);
        }
    }
}

/// Overlapping blocks covering the whole grid, shifted by a random offset.
fn sweep_blocks(points: usize, block: usize, rng: &mut RandomSource) -> Vec<(usize, usize)> {
    let last = points - 1;
    let stride = (block / 2).max(1);
    let offset = rng.below(stride) as i64;
    let mut out = Vec::new();
    let mut s = offset - block as i64;
    while s < last as i64 {
        let a = s.max(0) as usize;
        let b = ((s + block as i64) as usize).min(last);
        if b >= a + 2 {
            out.push((a, b));
        }
        s += stride as i64;
    }
    out
}

/// Runs one sweep of the configured kernel over overlapping blocks.
pub fn sweep(
    state: &mut ChainState,
    config: &SamplerConfig,
    potential: &Potential,
    rng: &mut RandomSource,
    scratch: &mut Vec<f64>,
) {
    let blocks = sweep_blocks(state.path.len(), config.block, rng);
    for blk in blocks {
        block_step(
            state,
            blk,
            config.kernel,
            config.pcn_beta,
            config.epsilon,
            potential,
            rng,
            scratch,
        );
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub config_hash: String,
    pub seed: u64,
    pub chains: usize,
    pub acceptance: Vec<f64>,
    pub oracle_only: bool,
}

/// Thinned states from one or more chains with identical configuration.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub paths: Vec<Path>,
    /// Paths per chain, in order; series statistics respect chain boundaries.
    pub chain_lengths: Vec<usize>,
    pub meta: EnsembleMeta,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn acceptance(&self) -> f64 {
        crate::stats::mean(&self.meta.acceptance)
    }

    /// Per-chain slices of the stored paths.
    pub fn chains(&self) -> Vec<&[Path]> {
        let mut out = Vec::new();
        let mut o = 0;
        for &n in &self.chain_lengths {
            out.push(&self.paths[o..o + n]);
            o += n;
        }
        out
    }
}

fn run_single<T>(
    config: &SamplerConfig,
    potential: &Potential,
    stream: u64,
    observe: &(impl Fn(&Path) -> T + Sync),
) -> Result<(Vec<T>, f64)> {
    let mut rng = RandomSource::new(config.seed, stream);
    let start = sample_bridge(&config.bridge()?, &mut rng);
    let mut state = ChainState::new(start, potential);
    let mut scratch = Vec::with_capacity(config.block + 1);
    let mut kept = Vec::with_capacity((config.sweeps - config.burn_in) / config.thin + 1);
    for s in 0..config.sweeps {
        sweep(&mut state, config, potential, &mut rng, &mut scratch);
        if s >= config.burn_in && (s - config.burn_in) % config.thin == 0 {
            kept.push(observe(&state.path));
        }
    }
    Ok((kept, state.acceptance_rate()))
}

pub fn run_chain(config: &SamplerConfig, potential: &Potential) -> Result<Ensemble> {
    run_chains(config, potential, 1)
}

/// Independent chains on streams `0..chains`, merged in stream order.
pub fn run_chains(config: &SamplerConfig, potential: &Potential, chains: usize) -> Result<Ensemble> {
    let observed = run_chains_with(config, potential, chains, |p| p.clone())?;
    let mut paths = Vec::new();
    let mut chain_lengths = Vec::new();
    for p in observed.series {
        chain_lengths.push(p.len());
        paths.extend(p);
    }
    Ok(Ensemble {
        paths,
        chain_lengths,
        meta: observed.meta,
    })
}

/// Per-chain series of an observable, for runs too long to keep every path.
#[derive(Clone, Debug)]
pub struct Observed<T> {
    pub series: Vec<Vec<T>>,
    pub meta: EnsembleMeta,
}

/// Like [`run_chains`] but stores `observe(path)` instead of the path.
pub fn run_chains_with<T: Send>(
    config: &SamplerConfig,
    potential: &Potential,
    chains: usize,
    observe: impl Fn(&Path) -> T + Sync,
) -> Result<Observed<T>> {
    config.validate()?;
    if chains == 0 {
        return Err(Error::config("chains", "must be at least 1"));
    }
    let results: Vec<Result<(Vec<T>, f64)>> = (0..chains as u64)
        .into_par_iter()
        .map(|c| run_single(config, potential, c, &observe))
        .collect();
    let mut series = Vec::new();
    let mut acceptance = Vec::new();
    for r in results {
        let (p, acc) = r?;
        series.push(p);
        acceptance.push(acc);
    }
    Ok(Observed {
        series,
        meta: EnsembleMeta {
            config_hash: hex(&config_hash(config)?),
            seed: config.seed,
            chains,
            acceptance,
            oracle_only: config.oracle_only(),
        },
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Probability estimate with chain-aware uncertainty.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EventEstimate {
    pub p: f64,
    pub se: f64,
    pub ess: f64,
    /// The indicator never changed, so no autocorrelation could be estimated.
    pub degenerate: bool,
}

/// Mean of a scalar statistic over the ensemble with a standard error that pools
/// per-chain variances of the mean.
pub fn estimate_statistic(ensemble: &Ensemble, stat: impl Fn(&Path) -> f64) -> Result<EventEstimate> {
    if ensemble.is_empty() {
        return Err(Error::Contract("empty ensemble".into()));
    }
    let series: Vec<Vec<f64>> = ensemble
        .chains()
        .iter()
        .map(|c| c.iter().map(&stat).collect())
        .collect();
    pool_series(&series)
}

/// Pools per-chain series of one statistic, weighting each chain by its length.
pub fn pool_series(chains: &[Vec<f64>]) -> Result<EventEstimate> {
    let chains: Vec<&Vec<f64>> = chains.iter().filter(|c| !c.is_empty()).collect();
    if chains.is_empty() {
        return Err(Error::Contract("empty ensemble".into()));
    }
    let per_chain: Vec<SeriesEstimate> = chains.iter().map(|c| series_estimate(c)).collect();
    let total: f64 = chains.iter().map(|c| c.len() as f64).sum();
    let mut p = 0.0;
    let mut var = 0.0;
    let mut ess = 0.0;
    let mut all_degenerate = true;
    for (e, c) in per_chain.iter().zip(&chains) {
        let w = c.len() as f64 / total;
        p += w * e.mean;
        var += w * w * e.se * e.se;
        ess += e.ess;
        all_degenerate &= e.degenerate;
    }
    // Chains stuck on different constants are not degenerate as a whole.
    if all_degenerate && per_chain.len() > 1 {
        let means: Vec<f64> = per_chain.iter().map(|e| e.mean).collect();
        if means.iter().any(|m| *m != means[0]) {
            let v = crate::stats::variance(&means);
            return Ok(EventEstimate {
                p,
                se: (v / means.len() as f64).sqrt(),
                ess: means.len() as f64,
                degenerate: false,
            });
        }
    }
    Ok(EventEstimate {
        p,
        se: var.sqrt(),
        ess,
        degenerate: all_degenerate,
    })
}

pub fn estimate_event_probability(
    ensemble: &Ensemble,
    event: impl Fn(&Path) -> bool,
) -> Result<EventEstimate> {
    estimate_statistic(ensemble, |p| if event(p) { 1.0 } else { 0.0 })
}

/// Summary written next to an ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acceptance: f64,
    pub ess: f64,
    pub iact: f64,
}

/// Diagnostics of the trace of `u` at `x`.
pub fn diagnostics(ensemble: &Ensemble, x: f64) -> Result<Diagnostics> {
    let est = estimate_statistic(ensemble, |p| p.value_at(x))?;
    let n = ensemble.len() as f64;
    Ok(Diagnostics {
        acceptance: ensemble.acceptance(),
        ess: est.ess,
        iact: if est.ess > 0.0 { n / est.ess } else { f64::NAN },
    })
}
