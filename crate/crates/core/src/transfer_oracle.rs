//! Transfer-matrix computation of marginals and regular path events.
//!
//! Path values are restricted to a lattice of bin centres. The measure factorizes
//! over grid cells into Gaussian increments weighted by `exp(-(dx/2ε)(V(u_i)+V(u_j)))`,
//! so marginals are forward/backward vector products and any event recognized by a
//! finite automaton reading the level crossings of the interpolated path is a
//! product-space computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_domain::{Grid, Path};
use crate::potential::Potential;

/// Gaussian weights below `exp(-GAUSS_CUTOFF)` of the peak are dropped.
const GAUSS_CUTOFF: f64 = 80.0;
/// Levels used by the automata are multiples of this, and bin edges land on them.
pub const LEVEL_QUANTUM: f64 = 0.05;
pub const DEFAULT_STATE_BUDGET: usize = 64;

/// Value lattice: `m` bins of width `h` covering `[u_min, u_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub u_min: f64,
    pub u_max: f64,
    pub m: usize,
    pub h: f64,
    #[serde(skip)]
    centres: Vec<f64>,
}

impl StateGrid {
    pub fn new(u_min: f64, u_max: f64, m: usize) -> Result<Self> {
        if !(u_max > u_min) || !u_min.is_finite() || !u_max.is_finite() {
            return Err(Error::config("state_grid", "need finite bounds u_min < u_max"));
        }
        if m < 41 {
            return Err(Error::config("state_grid.m", "need at least 41 bins"));
        }
        let h = (u_max - u_min) / m as f64;
        let mut centres: Vec<f64> = (0..m).map(|i| u_min + (i as f64 + 0.5) * h).collect();
        if u_min == -u_max {
            // Exact mirror symmetry of the lattice.
            for i in m.div_ceil(2)..m {
                centres[i] = -centres[m - 1 - i];
            }
            if m % 2 == 1 {
                centres[m / 2] = 0.0;
            }
        }
        Ok(Self {
            u_min,
            u_max,
            m,
            h,
            centres,
        })
    }

    /// Symmetric lattice with `h ≤ sqrt(ε·dx)/(2·refine)` whose edges include every
    /// multiple of [`LEVEL_QUANTUM`]. `half_range` defaults to `max(2.5, 1 + 6√ε)`.
    pub fn for_noise(epsilon: f64, dx: f64, half_range: Option<f64>, refine: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !(dx > 0.0) || !(refine > 0.0) {
            return Err(Error::config("state_grid", "epsilon, dx and refine must be positive"));
        }
        let sigma = (epsilon * dx).sqrt();
        let k = (LEVEL_QUANTUM / (sigma / (2.0 * refine))).ceil().max(1.0);
        let h = LEVEL_QUANTUM / k;
        let u = half_range.unwrap_or((1.0 + 6.0 * epsilon.sqrt()).max(2.5));
        let u = (u / LEVEL_QUANTUM).ceil() * LEVEL_QUANTUM;
        let m = (2.0 * u / h).round() as usize;
        Self::new(-u, u, m)
    }

    pub fn centres(&self) -> &[f64] {
        &self.centres
    }

    pub fn centre(&self, i: usize) -> f64 {
        self.centres[i]
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.u_min && u <= self.u_max
    }
}

/// One-step kernel `K(i, j) = w_i · h·φ_σ(c_j - c_i) · w_j` with `w = exp(-(dx/2ε)V)`.
#[derive(Clone, Debug)]
pub struct TransferModel {
    pub epsilon: f64,
    pub grid: Grid,
    pub states: StateGrid,
    potential: Potential,
    /// `h·φ_σ(d·h)` for `d = 0..=band`.
    gauss: Vec<f64>,
    half_weight: Vec<f64>,
    sigma: f64,
}

pub fn build_transfer(
    epsilon: f64,
    grid: Grid,
    potential: &Potential,
    states: StateGrid,
) -> Result<TransferModel> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::config("epsilon", "must be positive and finite"));
    }
    let dx = grid.dx;
    let sigma = (epsilon * dx).sqrt();
    let h = states.h;
    let norm = h / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut gauss = Vec::new();
    for d in 0..states.m {
        let z = d as f64 * h / sigma;
        if 0.5 * z * z > GAUSS_CUTOFF {
            break;
        }
        gauss.push(norm * (-0.5 * z * z).exp());
    }
    let half_weight: Vec<f64> = states
        .centres()
        .iter()
        .map(|&c| (-0.5 * dx / epsilon * potential.eval(c)).exp())
        .collect();
    if gauss.iter().chain(&half_weight).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical("kernel entries are not finite".into()));
    }
    if half_weight.iter().all(|&w| w == 0.0) {
        return Err(Error::Numerical("potential weights underflow on the whole lattice".into()));
    }
    let model = TransferModel {
        epsilon,
        grid,
        states,
        potential: potential.clone(),
        gauss,
        half_weight,
        sigma,
    };
    Ok(model)
}

/// A vector with its natural-log scale factor.
#[derive(Clone, Debug)]
struct Scaled {
    v: Vec<f64>,
    log_scale: f64,
}

impl Scaled {
    fn normalize(&mut self) {
        let top = self.v.iter().cloned().fold(0.0, f64::max);
        if top > 0.0 {
            self.v.iter_mut().for_each(|x| *x /= top);
            self.log_scale += top.ln();
        }
    }
}

impl TransferModel {
    pub fn band(&self) -> usize {
        self.gauss.len() - 1
    }

    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let d = i.abs_diff(j);
        let g = self.gauss.get(d).copied().unwrap_or(0.0);
        self.half_weight[i] * g * self.half_weight[j]
    }

    fn phi(&self, d: f64) -> f64 {
        let z = d / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn boundary_half_weight(&self, u: f64) -> f64 {
        (-0.5 * self.grid.dx / self.epsilon * self.potential.eval(u)).exp()
    }

    /// `φ_σ(c_j - u)·w(u)·w_j`: one cell from the pinned value `u` into the lattice.
    fn edge_vector(&self, u: f64) -> Result<Vec<f64>> {
        if !self.states.contains(u) {
            return Err(Error::Domain(format!(
                "boundary value {u} outside the state grid [{}, {}]",
                self.states.u_min, self.states.u_max
            )));
        }
        let wu = self.boundary_half_weight(u);
        Ok(self
            .states
            .centres()
            .iter()
            .zip(&self.half_weight)
            .map(|(&c, &w)| self.phi(c - u) * wu * w)
            .collect())
    }

    /// `out_j = w_j Σ_{i ∈ src} v_i w_i g(|i-j|)` for `i` in `range`, accumulated.
    fn apply_range(&self, v: &[f64], range: std::ops::Range<usize>, out: &mut [f64]) {
        let m = self.states.m;
        let band = self.band();
        for i in range {
            let a = v[i] * self.half_weight[i];
            if a == 0.0 {
                continue;
            }
            let lo = i.saturating_sub(band);
            let hi = (i + band + 1).min(m);
            for j in lo..hi {
                out[j] += a * self.gauss[i.abs_diff(j)];
            }
        }
    }

    fn step(&self, x: &Scaled) -> Scaled {
        let m = self.states.m;
        let mut out = vec![0.0; m];
        self.apply_range(&x.v, 0..m, &mut out);
        for (o, w) in out.iter_mut().zip(&self.half_weight) {
            *o *= w;
        }
        let mut s = Scaled {
            v: out,
            log_scale: x.log_scale,
        };
        s.normalize();
        s
    }

    /// Log of the Gaussian bridge density between the two pinned values.
    fn log_bridge_norm(&self, bc: (f64, f64)) -> f64 {
        let var = self.epsilon * self.grid.length();
        let d = bc.1 - bc.0;
        -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    }

    /// Forward vectors at interior sites `1..=n`.
    fn forward_all(&self, bc: (f64, f64)) -> Result<Vec<Scaled>> {
        let n = self.grid.n;
        let mut f0 = Scaled {
            v: self.edge_vector(bc.0)?,
            log_scale: self.states.h.ln(),
        };
        f0.normalize();
        let mut out = Vec::with_capacity(n);
        out.push(f0);
        for _ in 1..n {
            let next = self.step(out.last().unwrap());
            out.push(next);
        }
        Ok(out)
    }

    fn backward_all(&self, bc: (f64, f64)) -> Result<Vec<Scaled>> {
        let n = self.grid.n;
        let mut g = Scaled {
            v: self.edge_vector(bc.1)?,
            log_scale: 0.0,
        };
        g.normalize();
        let mut out = vec![g];
        for _ in 1..n {
            let next = self.step(out.last().unwrap());
            out.push(next);
        }
        out.reverse();
        Ok(out)
    }

    /// Log normalization `E_W[exp(-(1/ε)∫V)]`, lattice and trapezoid discretized.
    pub fn log_partition(&self, bc: (f64, f64)) -> Result<f64> {
        let f = self.forward_all(bc)?;
        let g = self.backward_all(bc)?;
        Ok(self.log_z_at(&f[0], &g[0], bc))
    }

    fn log_z_at(&self, f: &Scaled, g: &Scaled, bc: (f64, f64)) -> f64 {
        let dot: f64 = f.v.iter().zip(&g.v).map(|(a, b)| a * b).sum();
        dot.ln() + f.log_scale + g.log_scale - self.log_bridge_norm(bc)
    }
}

/// Per-site distributions over the bins, plus the log normalization.
#[derive(Clone, Debug, Serialize)]
pub struct MarginalTable {
    pub sites: Vec<usize>,
    pub x: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    pub log_z: f64,
    pub centres: Vec<f64>,
}

impl MarginalTable {
    pub fn index_of_site(&self, site: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == site)
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.probs[k].iter().zip(&self.centres).map(|(p, c)| p * c).sum()
    }

    pub fn variance(&self, k: usize) -> f64 {
        let m = self.mean(k);
        self.probs[k]
            .iter()
            .zip(&self.centres)
            .map(|(p, c)| p * (c - m) * (c - m))
            .sum()
    }

    /// Mass of the bins whose centres satisfy `pred`.
    pub fn prob(&self, k: usize, pred: impl Fn(f64) -> bool) -> f64 {
        self.probs[k]
            .iter()
            .zip(&self.centres)
            .filter(|(_, &c)| pred(c))
            .map(|(p, _)| p)
            .sum()
    }
}

/// One-point marginals at the interior `sites` (grid indices `1..=n`).
pub fn marginal(model: &TransferModel, bc: (f64, f64), sites: &[usize]) -> Result<MarginalTable> {
    let n = model.grid.n;
    if let Some(&s) = sites.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::Domain(format!("site {s} is not an interior grid point")));
    }
    let f = model.forward_all(bc)?;
    let g = model.backward_all(bc)?;
    let log_z = model.log_z_at(&f[0], &g[0], bc);
    let probs = sites
        .iter()
        .map(|&s| {
            let (fv, gv) = (&f[s - 1].v, &g[s - 1].v);
            let mut p: Vec<f64> = fv.iter().zip(gv).map(|(a, b)| a * b).collect();
            let tot: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= tot);
            p
        })
        .collect();
    Ok(MarginalTable {
        sites: sites.to_vec(),
        x: sites.iter().map(|&s| model.grid.x(s)).collect(),
        probs,
        log_z,
        centres: model.states.centres().to_vec(),
    })
}

/// Joint distribution of the bins at interior sites `a < b`, as `J[i][j]`.
pub fn joint_marginal(model: &TransferModel, bc: (f64, f64), a: usize, b: usize) -> Result<Vec<Vec<f64>>> {
    let n = model.grid.n;
    if !(a >= 1 && a < b && b <= n) {
        return Err(Error::Domain(format!("need interior sites a < b, got {a}, {b}")));
    }
    let f = model.forward_all(bc)?;
    let g = model.backward_all(bc)?;
    let m = model.states.m;
    let mut rows: Vec<(f64, Scaled)> = Vec::with_capacity(m);
    for i in 0..m {
        let mut e = Scaled {
            v: vec![0.0; m],
            log_scale: 0.0,
        };
        e.v[i] = 1.0;
        for _ in a..b {
            e = model.step(&e);
        }
        rows.push((f[a - 1].v[i], e));
    }
    let gb = &g[b - 1].v;
    let logs: Vec<f64> = rows
        .iter()
        .map(|(fa, e)| if *fa > 0.0 { fa.ln() + e.log_scale } else { f64::NEG_INFINITY })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut joint: Vec<Vec<f64>> = rows
        .iter()
        .zip(&logs)
        .map(|((_, e), &l)| {
            let s = (l - top).exp();
            e.v.iter().zip(gb).map(|(x, y)| s * x * y).collect()
        })
        .collect();
    let tot: f64 = joint.iter().flatten().sum();
    joint.iter_mut().flatten().for_each(|x| *x /= tot);
    Ok(joint)
}

/// Index of the zone of `u` among sorted `levels`. Negative levels belong to the zone
/// below them and non-negative levels to the zone above, so `u ≤ -a` and `u ≥ a` are
/// the closed extreme regions used by the layer detectors.
pub fn zone(u: f64, levels: &[f64]) -> usize {
    levels
        .iter()
        .filter(|&&l| if l < 0.0 { u > l } else { u >= l })
        .count()
}

/// Deterministic finite automaton over the zone sequence of the interpolated path.
pub trait EventAutomaton: Sync {
    fn name(&self) -> String;
    /// Sorted level set defining the zones.
    fn levels(&self) -> Vec<f64>;
    fn states(&self) -> usize;
    fn initial(&self, zone: usize) -> usize;
    /// Crossing from zone `from` into the adjacent zone `to` inside cell `cell`.
    fn cross(&self, state: usize, cell: usize, from: usize, to: usize) -> usize;
    /// Arrival at grid node `site` lying in `zone`.
    fn node(&self, state: usize, site: usize, zone: usize) -> usize;
    fn accepting(&self, state: usize) -> bool;
}

fn advance(a: &dyn EventAutomaton, mut s: usize, cell: usize, from: usize, to: usize) -> usize {
    let mut z = from;
    while z < to {
        s = a.cross(s, cell, z, z + 1);
        z += 1;
    }
    while z > to {
        s = a.cross(s, cell, z, z - 1);
        z -= 1;
    }
    a.node(s, cell + 1, to)
}

/// Runs the automaton on a path's own values; the sampler-side evaluation of an event.
pub fn automaton_accepts(automaton: &dyn EventAutomaton, path: &Path) -> bool {
    let levels = automaton.levels();
    let v = &path.values;
    let mut z = zone(v[0], &levels);
    let mut s = automaton.node(automaton.initial(z), 0, z);
    for k in 0..v.len() - 1 {
        let z1 = zone(v[k + 1], &levels);
        s = advance(automaton, s, k, z, z1);
        z = z1;
    }
    automaton.accepting(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Up,
    Down,
    Both,
}

pub struct AcceptAll;

impl EventAutomaton for AcceptAll {
    fn name(&self) -> String {
        "accept-all".into()
    }
    fn levels(&self) -> Vec<f64> {
        vec![]
    }
    fn states(&self) -> usize {
        1
    }
    fn initial(&self, _: usize) -> usize {
        0
    }
    fn cross(&self, s: usize, _: usize, _: usize, _: usize) -> usize {
        s
    }
    fn node(&self, s: usize, _: usize, _: usize) -> usize {
        s
    }
    fn accepting(&self, _: usize) -> bool {
        true
    }
}

/// At least `at_least` layers between `∓level`; the state remembers the last extreme
/// region visited and the count so far (capped).
pub struct LayerCounter {
    pub level: f64,
    pub at_least: usize,
    pub orientation: Orientation,
}

impl LayerCounter {
    fn pack(&self, last: usize, count: usize) -> usize {
        last * (self.at_least + 1) + count
    }
    fn unpack(&self, s: usize) -> (usize, usize) {
        (s / (self.at_least + 1), s % (self.at_least + 1))
    }
}

impl EventAutomaton for LayerCounter {
    fn name(&self) -> String {
        format!("layers(level={}, >={}, {:?})", self.level, self.at_least, self.orientation)
    }
    fn levels(&self) -> Vec<f64> {
        vec![-self.level, self.level]
    }
    fn states(&self) -> usize {
        3 * (self.at_least + 1)
    }
    fn initial(&self, zone: usize) -> usize {
        // last: 0 none, 1 low, 2 high; zones: 0 low, 1 mid, 2 high.
        let last = match zone {
            0 => 1,
            2 => 2,
            _ => 0,
        };
        self.pack(last, 0)
    }
    fn cross(&self, s: usize, _: usize, _: usize, to: usize) -> usize {
        let (last, count) = self.unpack(s);
        let counts = |up: bool| match self.orientation {
            Orientation::Both => true,
            Orientation::Up => up,
            Orientation::Down => !up,
        };
        match to {
            0 => {
                let c = if last == 2 && counts(false) { count + 1 } else { count };
                self.pack(1, c.min(self.at_least))
            }
            2 => {
                let c = if last == 1 && counts(true) { count + 1 } else { count };
                self.pack(2, c.min(self.at_least))
            }
            _ => s,
        }
    }
    fn node(&self, s: usize, _: usize, _: usize) -> usize {
        s
    }
    fn accepting(&self, s: usize) -> bool {
        self.unpack(s).1 >= self.at_least
    }
}

/// At least one layer of the given orientation whose start and end cells differ by
/// at most `max_cells`.
pub struct LayerLength {
    pub level: f64,
    pub max_cells: usize,
    pub up: bool,
}

const LL_ACC: usize = 0;
const LL_IDLE: usize = 1;
const LL_SOURCE: usize = 2;
const LL_MID: usize = 3;

impl LayerLength {
    /// Zones `(source, target)` for the orientation.
    fn ends(&self) -> (usize, usize) {
        if self.up {
            (0, 2)
        } else {
            (2, 0)
        }
    }
}

impl EventAutomaton for LayerLength {
    fn name(&self) -> String {
        format!(
            "{}-layer(level={}, cells<={})",
            if self.up { "up" } else { "down" },
            self.level,
            self.max_cells
        )
    }
    fn levels(&self) -> Vec<f64> {
        vec![-self.level, self.level]
    }
    fn states(&self) -> usize {
        LL_MID + self.max_cells + 1
    }
    fn initial(&self, zone: usize) -> usize {
        if zone == self.ends().0 {
            LL_SOURCE
        } else {
            LL_IDLE
        }
    }
    fn cross(&self, s: usize, _: usize, from: usize, to: usize) -> usize {
        if s == LL_ACC {
            return LL_ACC;
        }
        let (src, dst) = self.ends();
        if to == src {
            LL_SOURCE
        } else if from == src {
            LL_MID
        } else if to == dst {
            if s >= LL_MID {
                LL_ACC
            } else {
                LL_IDLE
            }
        } else if from == dst {
            LL_IDLE
        } else {
            s
        }
    }
    fn node(&self, s: usize, _: usize, _: usize) -> usize {
        if s >= LL_MID {
            let c = s - LL_MID + 1;
            if c > self.max_cells {
                LL_IDLE
            } else {
                LL_MID + c
            }
        } else {
            s
        }
    }
    fn accepting(&self, s: usize) -> bool {
        s == LL_ACC
    }
}

/// Some node in `sites` has `u ≥ level` (`above`) or `u ≤ level`.
pub struct Threshold {
    pub sites: (usize, usize),
    pub level: f64,
    pub above: bool,
}

impl EventAutomaton for Threshold {
    fn name(&self) -> String {
        format!(
            "threshold(u {} {} on sites {:?})",
            if self.above { ">=" } else { "<=" },
            self.level,
            self.sites
        )
    }
    fn levels(&self) -> Vec<f64> {
        vec![self.level]
    }
    fn states(&self) -> usize {
        2
    }
    fn initial(&self, _: usize) -> usize {
        0
    }
    fn cross(&self, s: usize, _: usize, _: usize, _: usize) -> usize {
        s
    }
    fn node(&self, s: usize, site: usize, zone: usize) -> usize {
        let inside = site >= self.sites.0 && site <= self.sites.1;
        let hit = if self.above { zone == 1 } else { zone == 0 };
        if inside && hit {
            1
        } else {
            s
        }
    }
    fn accepting(&self, s: usize) -> bool {
        s == 1
    }
}

/// Every node in `sites` lies in `[lo, hi]`; on a piecewise-linear path this is
/// confinement of the whole stretch between those nodes.
pub struct Confinement {
    pub sites: (usize, usize),
    pub lo: f64,
    pub hi: f64,
}

impl EventAutomaton for Confinement {
    fn name(&self) -> String {
        format!("confine([{}, {}] on sites {:?})", self.lo, self.hi, self.sites)
    }
    fn levels(&self) -> Vec<f64> {
        let mut l = Vec::new();
        if self.lo.is_finite() {
            l.push(self.lo);
        }
        if self.hi.is_finite() {
            l.push(self.hi);
        }
        l
    }
    fn states(&self) -> usize {
        2
    }
    fn initial(&self, _: usize) -> usize {
        0
    }
    fn cross(&self, s: usize, _: usize, _: usize, _: usize) -> usize {
        s
    }
    fn node(&self, s: usize, site: usize, zone: usize) -> usize {
        let in_window = site >= self.sites.0 && site <= self.sites.1;
        // The admissible zone sits just above the lower bound, or is the bottom one.
        let ok = zone == usize::from(self.lo.is_finite());
        if in_window && !ok {
            1
        } else {
            s
        }
    }
    fn accepting(&self, s: usize) -> bool {
        s == 0
    }
}

/// Grid nodes inside `[a, b]`.
pub fn window_sites(grid: &Grid, a: f64, b: f64) -> Result<(usize, usize)> {
    let lo = grid.position(a).ceil().max(0.0) as usize;
    let hi = (grid.position(b).floor().max(0.0) as usize).min(grid.n + 1);
    if lo > hi {
        return Err(Error::Domain(format!("window [{a}, {b}] holds no grid node")));
    }
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOptions {
    pub state_budget: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Refinement {
    pub h: f64,
    pub m: usize,
    pub dx: f64,
    pub automaton_states: usize,
}

/// Result record `{event, log_prob, params, refinement}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventProbability {
    pub event: String,
    pub prob: f64,
    pub log_prob: f64,
    /// `log(1 - prob)` computed from the rejecting mass, accurate when `prob ≈ 1`.
    pub log_complement: f64,
    pub params: serde_json::Value,
    pub refinement: Refinement,
}

pub fn event_probability_exact(
    model: &TransferModel,
    bc: (f64, f64),
    automaton: &dyn EventAutomaton,
    options: TransferOptions,
) -> Result<EventProbability> {
    let ns = automaton.states();
    if ns > options.state_budget {
        return Err(Error::Budget(format!(
            "automaton `{}` needs {ns} states, budget is {}",
            automaton.name(),
            options.state_budget
        )));
    }
    let m = model.states.m;
    let n = model.grid.n;
    let levels = automaton.levels();
    let zones: Vec<usize> = model.states.centres().iter().map(|&c| zone(c, &levels)).collect();
    let nz = levels.len() + 1;
    // Contiguous bin ranges per zone.
    let mut ranges = vec![0..0; nz];
    for z in 0..nz {
        let lo = zones.iter().position(|&q| q == z);
        let hi = zones.iter().rposition(|&q| q == z);
        if let (Some(lo), Some(hi)) = (lo, hi) {
            ranges[z] = lo..hi + 1;
        }
    }
    let z_left = zone(bc.0, &levels);
    let z_right = zone(bc.1, &levels);
    let s0 = automaton.node(automaton.initial(z_left), 0, z_left);

    // Site 1.
    let edge = model.edge_vector(bc.0)?;
    let mut f = vec![vec![0.0; m]; ns];
    for j in 0..m {
        let s = advance(automaton, s0, 0, z_left, zones[j]);
        f[s][j] += edge[j];
    }
    let mut log_scale = model.states.h.ln();
    normalize_all(&mut f, &mut log_scale);

    let mut table = vec![0usize; ns * nz * nz];
    let mut tmp = vec![0.0; m];
    for cell in 1..n {
        for s in 0..ns {
            for za in 0..nz {
                for zb in 0..nz {
                    table[(s * nz + za) * nz + zb] = advance(automaton, s, cell, za, zb);
                }
            }
        }
        let mut next = vec![vec![0.0; m]; ns];
        for s in 0..ns {
            if f[s].iter().all(|&x| x == 0.0) {
                continue;
            }
            for za in 0..nz {
                let r = ranges[za].clone();
                if r.is_empty() {
                    continue;
                }
                tmp.iter_mut().for_each(|x| *x = 0.0);
                model.apply_range(&f[s], r, &mut tmp);
                for j in 0..m {
                    if tmp[j] != 0.0 {
                        let t = table[(s * nz + za) * nz + zones[j]];
                        next[t][j] += tmp[j] * model.half_weight[j];
                    }
                }
            }
        }
        f = next;
        normalize_all(&mut f, &mut log_scale);
    }

    // Last cell into the pinned right value.
    let right = model.edge_vector(bc.1)?;
    let (mut acc, mut rej) = (0.0, 0.0);
    for s in 0..ns {
        for i in 0..m {
            let mass = f[s][i] * right[i];
            if mass == 0.0 {
                continue;
            }
            let t = advance(automaton, s, n, zones[i], z_right);
            if automaton.accepting(t) {
                acc += mass;
            } else {
                rej += mass;
            }
        }
    }
    let total = acc + rej;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical("transfer product vanished".into()));
    }
    Ok(EventProbability {
        event: automaton.name(),
        prob: acc / total,
        log_prob: acc.ln() - total.ln(),
        log_complement: rej.ln() - total.ln(),
        params: serde_json::json!({
            "epsilon": model.epsilon,
            "x_minus": model.grid.x_minus,
            "x_plus": model.grid.x_plus,
            "u_minus": bc.0,
            "u_plus": bc.1,
        }),
        refinement: Refinement {
            h: model.states.h,
            m,
            dx: model.grid.dx,
            automaton_states: ns,
        },
    })
}

fn normalize_all(f: &mut [Vec<f64>], log_scale: &mut f64) {
    let top = f.iter().flatten().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        f.iter_mut().flatten().for_each(|x| *x /= top);
        *log_scale += top.ln();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_domain::{detect_layers, LayerKind, LevelKind};
    use crate::quad::gauss_legendre;
    use crate::stats::normal_cdf;
    use proptest::prelude::*;

    fn model(eps: f64, l: f64, dx: f64, pot: &Potential) -> TransferModel {
        let g = Grid::symmetric(l, dx).unwrap();
        build_transfer(eps, g, pot, StateGrid::for_noise(eps, dx, None, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn levels_fall_on_bin_edges() {
        let sg = StateGrid::for_noise(0.05, 0.05, None, 1.0).unwrap();
        for level in [-1.0, -0.8, 0.0, 0.5, 0.9, 1.5] {
            let pos = (level - sg.u_min) / sg.h;
            assert!((pos - pos.round()).abs() < 1e-9, "{level}");
        }
        assert!(sg.h <= (0.05f64 * 0.05).sqrt() / 2.0);
        assert!(sg.m >= 41);
    }

    #[test]
    fn row_sums_match_gaussian_cdf_without_potential() {
        // σ = 1.5 ≫ h, so the lattice sum equals the increment cdf difference.
        let g = Grid::symmetric(2.25, 2.25).unwrap();
        let sg = StateGrid::new(-2.0, 2.0, 401).unwrap();
        let eps = 1.0;
        let dx = g.dx;
        let m = build_transfer(eps, g, &Potential::zero(), sg.clone()).unwrap();
        let sigma = (eps * dx).sqrt();
        for i in 0..401 {
            let row: f64 = (0..401).map(|j| m.kernel(i, j)).sum();
            let c = sg.centre(i);
            let exact = normal_cdf((2.0 - c) / sigma) - normal_cdf((-2.0 - c) / sigma);
            assert!((row - exact).abs() < 1e-6, "row {i}: {row} vs {exact}");
        }
    }

    #[test]
    fn long_steps_concentrate_on_the_wells() {
        let m = model(0.5, 20.0, 10.0, &Potential::quartic());
        let sg = &m.states;
        for target in [-2.0, 0.3, 1.8] {
            let j = (0..sg.m)
                .min_by(|&a, &b| (sg.centre(a) - target).abs().total_cmp(&(sg.centre(b) - target).abs()))
                .unwrap();
            let best = (0..sg.m)
                .max_by(|&a, &b| m.kernel(a, j).total_cmp(&m.kernel(b, j)))
                .unwrap();
            assert!((sg.centre(best).abs() - 1.0).abs() < 0.1, "column {j}: {}", sg.centre(best));
        }
    }

    #[test]
    fn kernel_is_mirror_symmetric() {
        let m = model(0.1, 2.0, 0.1, &Potential::quartic());
        let k = m.states.m;
        for i in (0..k).step_by(7) {
            for j in (0..k).step_by(5) {
                assert_eq!(m.kernel(i, j), m.kernel(k - 1 - i, k - 1 - j));
            }
        }
    }

    #[test]
    fn free_bridge_marginals() {
        let m = model(0.2, 2.0, 0.1, &Potential::zero());
        let t = marginal(&m, (-1.0, 1.0), &[10, 20, 30]).unwrap();
        assert!(t.log_z.abs() < 1e-9, "log Z = {}", t.log_z);
        for (k, &s) in t.sites.iter().enumerate() {
            let x = m.grid.x(s);
            assert!((t.mean(k) - x / 2.0).abs() < m.states.h);
            let var = 0.2 * (x + 2.0) * (2.0 - x) / 4.0;
            assert!((t.variance(k) - var).abs() < 1e-6);
            assert!((t.probs[k].iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_site_matches_quadrature() {
        // One interior point: density ∝ φ(c-u₋)φ(u₊-c)exp(-(dx/ε)V(c)).
        let eps = 0.3;
        let dx = 0.5;
        let g = Grid::new(-0.5, 0.5, 1).unwrap();
        let pot = Potential::quartic();
        let sg = StateGrid::for_noise(eps, dx, Some(4.0), 2.0).unwrap();
        let m = build_transfer(eps, g, &pot, sg).unwrap();
        let bc = (-1.0, 0.5);
        let t = marginal(&m, bc, &[1]).unwrap();
        let s2 = eps * dx;
        let dens = |c: f64| {
            (-(c - bc.0).powi(2) / (2.0 * s2) - (bc.1 - c).powi(2) / (2.0 * s2)
                - dx / eps * pot.eval(c))
            .exp()
        };
        let z = gauss_legendre(dens, -4.0, 4.0, 400);
        let mean = gauss_legendre(|c| c * dens(c), -4.0, 4.0, 400) / z;
        assert!((t.mean(0) - mean).abs() < 1e-8, "{} vs {mean}", t.mean(0));
        // Full normalization including the boundary weights and the bridge density.
        let norm = 1.0 / (2.0 * std::f64::consts::PI * s2);
        let bw = (-0.5 * dx / eps * (pot.eval(bc.0) + pot.eval(bc.1))).exp();
        let var = eps * 1.0;
        let bridge = (-(bc.1 - bc.0).powi(2) / (2.0 * var)).exp()
            / (2.0 * std::f64::consts::PI * var).sqrt();
        let log_z = (z * norm * bw / bridge).ln();
        assert!((t.log_z - log_z).abs() < 1e-8, "{} vs {log_z}", t.log_z);
    }

    #[test]
    fn marginals_mirror_under_point_reflection() {
        let m = model(0.1, 2.0, 0.1, &Potential::quartic());
        let n = m.grid.n;
        let t = marginal(&m, (-1.0, 1.0), &[5, n + 1 - 5]).unwrap();
        let k = m.states.m;
        for i in 0..k {
            let a = t.probs[0][i];
            let b = t.probs[1][k - 1 - i];
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn markov_splice_reproduces_the_full_marginal() {
        let m = model(0.3, 0.6, 0.1, &Potential::quartic());
        let bc = (-1.0, 0.5);
        let (a, c, b) = (2, 5, 9);
        let full = marginal(&m, bc, &[c]).unwrap();
        let joint = joint_marginal(&m, bc, a, b).unwrap();
        let k = m.states.m;
        // Pinned sub-problems on [a, b] from each pair of bins.
        let mut spliced = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                let w = joint[i][j];
                if w < 1e-300 {
                    continue;
                }
                let mut fwd = Scaled { v: vec![0.0; k], log_scale: 0.0 };
                fwd.v[i] = 1.0;
                for _ in a..c {
                    fwd = m.step(&fwd);
                }
                let mut bwd = Scaled { v: vec![0.0; k], log_scale: 0.0 };
                bwd.v[j] = 1.0;
                for _ in c..b {
                    bwd = m.step(&bwd);
                }
                let mut p: Vec<f64> = fwd.v.iter().zip(&bwd.v).map(|(x, y)| x * y).collect();
                // Each pinned end carries one half weight too many from the unit vector.
                let tot: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= tot);
                for q in 0..k {
                    spliced[q] += w * p[q];
                }
            }
        }
        for q in 0..k {
            assert!((spliced[q] - full.probs[0][q]).abs() < 1e-8);
        }
    }

    #[test]
    fn accept_all_is_certain() {
        let m = model(0.1, 2.0, 0.1, &Potential::quartic());
        let p = event_probability_exact(&m, (-1.0, 1.0), &AcceptAll, Default::default()).unwrap();
        assert_eq!(p.prob, 1.0);
    }

    #[test]
    fn boundary_forces_an_up_layer() {
        let m = model(0.05, 5.0, 0.05, &Potential::quartic());
        let a = LayerCounter { level: 1.0, at_least: 1, orientation: Orientation::Up };
        let p = event_probability_exact(&m, (-1.0, 1.0), &a, Default::default()).unwrap();
        assert!((p.prob - 1.0).abs() < 1e-9, "{}", p.prob);
    }

    #[test]
    fn budget_is_enforced() {
        let m = model(0.1, 2.0, 0.1, &Potential::quartic());
        let a = LayerLength { level: 1.0, max_cells: 80, up: true };
        let r = event_probability_exact(&m, (-1.0, 1.0), &a, Default::default());
        assert!(matches!(r, Err(Error::Budget(_))));
        let ok = event_probability_exact(&m, (-1.0, 1.0), &a, TransferOptions { state_budget: 128 });
        assert!(ok.is_ok());
    }

    #[test]
    fn boundary_outside_the_lattice_is_a_domain_error() {
        let m = model(0.1, 2.0, 0.1, &Potential::quartic());
        assert!(matches!(marginal(&m, (-9.0, 1.0), &[3]), Err(Error::Domain(_))));
    }

    #[test]
    fn window_sites_are_inclusive() {
        let g = Grid::symmetric(1.0, 0.25).unwrap();
        assert_eq!(window_sites(&g, -0.5, 0.5).unwrap(), (2, 6));
        assert_eq!(window_sites(&g, -0.6, 0.6).unwrap(), (2, 6));
    }

    fn smooth_path(coef: &[f64], l: f64, dx: f64) -> Path {
        let g = Grid::symmetric(l, dx).unwrap();
        let mut p = Path::from_fn(g, |x| {
            let s = (x + l) / (2.0 * l);
            let mut v = -1.0 + 2.0 * s;
            for (k, c) in coef.iter().enumerate() {
                v += c * ((k + 1) as f64 * std::f64::consts::PI * s).sin();
            }
            v
        });
        let last = p.len() - 1;
        p.values[0] = -1.0;
        p.values[last] = 1.0;
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn counter_agrees_with_the_detector(coef in prop::collection::vec(-3.0f64..3.0, 1..8), delta in 0.05f64..0.45, k in 1usize..5) {
            let p = smooth_path(&coef, 5.0, 0.05);
            for (lk, level) in [(LevelKind::Full, 1.0), (LevelKind::DeltaMinus, 1.0 - delta)] {
                let r = detect_layers(&p, lk, delta);
                for (o, count) in [
                    (Orientation::Both, r.len()),
                    (Orientation::Up, r.ups().count()),
                    (Orientation::Down, r.len() - r.ups().count()),
                ] {
                    let a = LayerCounter { level, at_least: k, orientation: o };
                    prop_assert_eq!(automaton_accepts(&a, &p), count >= k);
                }
            }
        }

        #[test]
        fn length_automaton_agrees_with_the_detector(coef in prop::collection::vec(-3.0f64..3.0, 1..8), max_cells in 1usize..120) {
            let p = smooth_path(&coef, 5.0, 0.05);
            let r = detect_layers(&p, LevelKind::Full, 0.0);
            let want = r.events.iter().any(|e| e.kind == LayerKind::Up && e.cell_end - e.cell_start <= max_cells);
            let a = LayerLength { level: 1.0, max_cells, up: true };
            prop_assert_eq!(automaton_accepts(&a, &p), want);
        }

        #[test]
        fn window_automata_agree_with_direct_scans(coef in prop::collection::vec(-3.0f64..3.0, 1..8), c in -1.5f64..1.5, lo in -1.5f64..0.0) {
            let p = smooth_path(&coef, 5.0, 0.05);
            let sites = window_sites(&p.grid, -2.0, 3.0).unwrap();
            let w = &p.values[sites.0..=sites.1];
            let th = Threshold { sites, level: c, above: true };
            prop_assert_eq!(automaton_accepts(&th, &p), w.iter().any(|&u| u >= c));
            let cf = Confinement { sites, lo, hi: lo + 1.0 };
            prop_assert_eq!(automaton_accepts(&cf, &p), w.iter().all(|&u| u > lo && u < lo + 1.0));
        }
    }
}
