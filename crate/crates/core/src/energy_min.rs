//! Constrained minimization of the discrete energy, large-deviation gaps and numerical
//! checks of the energy inequalities behind the layer estimates.
//!
//! The discrete energy is the one every other module uses: Dirichlet part of the
//! piecewise-linear path plus the trapezoid rule for `∫V`. Existence constraints
//! ("some point of the window reaches a level") are handled by pinning witness nodes.
//! A dynamic program over a value lattice places the witnesses globally, then an
//! active-set semi-implicit gradient flow refines the path and a local search nudges
//! the witnesses.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_domain::{energy, Grid, Path};
use crate::potential::{well_constants, Potential, WellConstants};
use crate::stats::linear_fit;

/// Path classes over which the energy is minimized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Constraint {
    None,
    /// `lo ≤ u ≤ hi` on `window`; a missing side is unbounded.
    Band {
        window: (f64, f64),
        lo: Option<f64>,
        hi: Option<f64>,
    },
    /// A wasted δ⁻ excursion inside `window`.
    WastedDeltaMinus { window: (f64, f64), delta: f64 },
    /// Points `x_- < x_0 < x_+` in `window` with `u(x_±) ≤ -1-2δ` and `u(x_0) ≥ δ`.
    DeltaPlusPre { window: (f64, f64), delta: f64 },
    /// `m` wasted δ⁻ excursions in `window`, disjoint except for shared endpoints.
    DisjointExcursions { window: (f64, f64), delta: f64, m: usize },
    /// Some point of `window` has `u ≥ level`; `u ≤ ceiling` on the whole domain.
    PointFloor {
        window: (f64, f64),
        level: f64,
        ceiling: Option<f64>,
    },
    /// `u(x) ≥ level` (or `≤` when `above` is false) at one node.
    Threshold { x: f64, level: f64, above: bool },
    /// `|u(x) - center| ≥ gap` at one node.
    Away { x: f64, center: f64, gap: f64 },
    /// `|u(x)| ≤ bound` at each listed node.
    Probes { points: Vec<f64>, bound: f64 },
    /// Intersection. At most one member may carry windowed witnesses.
    AllOf(Vec<Constraint>),
}

impl Constraint {
    fn check(&self) -> Result<()> {
        let delta_ok = |d: f64| {
            if d > 0.0 && d < 0.5 {
                Ok(())
            } else {
                Err(Error::config("constraint.delta", "must lie in (0, 1/2)"))
            }
        };
        match self {
            Constraint::WastedDeltaMinus { delta, .. } | Constraint::DeltaPlusPre { delta, .. } => {
                delta_ok(*delta)
            }
            Constraint::DisjointExcursions { delta, m, .. } => {
                delta_ok(*delta)?;
                if *m == 0 || *m > 4 {
                    return Err(Error::config("constraint.m", "need 1 to 4 excursions"));
                }
                Ok(())
            }
            Constraint::Away { gap, .. } if !(*gap > 0.0) => {
                Err(Error::config("constraint.gap", "must be positive"))
            }
            Constraint::Probes { bound, .. } if !(*bound >= 0.0) => {
                Err(Error::config("constraint.bound", "must be non-negative"))
            }
            Constraint::AllOf(list) => list.iter().try_for_each(Constraint::check),
            _ => Ok(()),
        }
    }
}

/// Minimize the energy on `grid` with pinned ends over the class `constraint`; the gap
/// is taken against the class `reference` (everything, by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProblem {
    pub grid: Grid,
    pub u_minus: f64,
    pub u_plus: f64,
    pub constraint: Constraint,
    #[serde(default = "none")]
    pub reference: Constraint,
}

fn none() -> Constraint {
    Constraint::None
}

impl EnergyProblem {
    pub fn new(grid: Grid, u_minus: f64, u_plus: f64, constraint: Constraint) -> Self {
        Self {
            grid,
            u_minus,
            u_plus,
            constraint,
            reference: Constraint::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.u_minus.is_finite() || !self.u_plus.is_finite() {
            return Err(Error::config("boundary", "boundary values must be finite"));
        }
        self.constraint.check()?;
        self.reference.check()
    }
}

/// Solver knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Value lattice spacing of the placement search.
    pub lattice: f64,
    pub max_iterations: usize,
    /// Stop when the Euler-Lagrange residual on free nodes drops below this.
    pub tolerance: f64,
    /// Rounds of the witness local search.
    pub witness_rounds: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lattice: 0.02,
            max_iterations: 40_000,
            tolerance: 1e-7,
            witness_rounds: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MinimizerResult {
    pub argmin: Path,
    pub energy: f64,
    /// `energy` minus the minimum over the reference class.
    pub gap: f64,
    pub reference_energy: f64,
    pub iterations: usize,
    /// `max |u'' - V'(u)|` over nodes not held by a constraint.
    pub residual: f64,
    pub converged: bool,
    /// Witness positions of the chosen placement, in visit order.
    pub witnesses: Vec<f64>,
    /// Nodes held at a bound at the end.
    pub active: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Visit {
    nodes: (usize, usize),
    lo: f64,
    hi: f64,
    /// The witness must come strictly after the previous one.
    strict: bool,
}

#[derive(Clone, Debug, Default)]
struct Family {
    boxes: Vec<(usize, f64, f64)>,
    visits: Vec<Visit>,
}

#[derive(Clone, Debug)]
struct Compiled {
    lo: Vec<f64>,
    hi: Vec<f64>,
    families: Vec<Family>,
}

fn window_nodes(grid: &Grid, (a, b): (f64, f64)) -> Result<(usize, usize)> {
    if !(a <= b) || !grid.contains(a) || !grid.contains(b) {
        return Err(Error::config("constraint.window", "window must be an interval inside the domain"));
    }
    let tol = 1e-9;
    let i0 = (grid.position(a) - tol).ceil().max(0.0) as usize;
    let i1 = ((grid.position(b) + tol).floor() as usize).min(grid.n + 1);
    if i0 > i1 {
        return Err(Error::config("constraint.window", "window holds no grid node"));
    }
    Ok((i0, i1))
}

fn node_of(grid: &Grid, x: f64) -> Result<usize> {
    grid.index_of(x)
        .ok_or_else(|| Error::config("constraint.x", format!("{x} is not a grid node")))
}

fn excursion(nodes: (usize, usize), s: f64, delta: f64, first_strict: bool) -> [Visit; 3] {
    [
        Visit {
            nodes,
            lo: s - delta,
            hi: s + delta,
            strict: first_strict,
        },
        Visit {
            nodes,
            lo: -delta,
            hi: delta,
            strict: true,
        },
        Visit {
            nodes,
            lo: s - delta,
            hi: s + delta,
            strict: true,
        },
    ]
}

fn compile(c: &Constraint, grid: &Grid) -> Result<Compiled> {
    let n = grid.points();
    let mut out = Compiled {
        lo: vec![f64::NEG_INFINITY; n],
        hi: vec![f64::INFINITY; n],
        families: vec![Family::default()],
    };
    add(c, grid, &mut out)?;
    Ok(out)
}

fn add(c: &Constraint, grid: &Grid, out: &mut Compiled) -> Result<()> {
    let mut alternatives: Vec<Family> = Vec::new();
    match c {
        Constraint::None => return Ok(()),
        Constraint::Band { window, lo, hi } => {
            let (i0, i1) = window_nodes(grid, *window)?;
            for i in i0..=i1 {
                if let Some(l) = lo {
                    out.lo[i] = out.lo[i].max(*l);
                }
                if let Some(h) = hi {
                    out.hi[i] = out.hi[i].min(*h);
                }
            }
            return Ok(());
        }
        Constraint::Probes { points, bound } => {
            for &x in points {
                let i = node_of(grid, x)?;
                out.lo[i] = out.lo[i].max(-bound);
                out.hi[i] = out.hi[i].min(*bound);
            }
            return Ok(());
        }
        Constraint::Threshold { x, level, above } => {
            let i = node_of(grid, *x)?;
            if *above {
                out.lo[i] = out.lo[i].max(*level);
            } else {
                out.hi[i] = out.hi[i].min(*level);
            }
            return Ok(());
        }
        Constraint::PointFloor {
            window,
            level,
            ceiling,
        } => {
            if let Some(h) = ceiling {
                out.hi.iter_mut().for_each(|v| *v = v.min(*h));
            }
            alternatives.push(Family {
                boxes: vec![],
                visits: vec![Visit {
                    nodes: window_nodes(grid, *window)?,
                    lo: *level,
                    hi: f64::INFINITY,
                    strict: false,
                }],
            });
        }
        Constraint::Away { x, center, gap } => {
            let i = node_of(grid, *x)?;
            alternatives.push(Family {
                boxes: vec![(i, center + gap, f64::INFINITY)],
                visits: vec![],
            });
            alternatives.push(Family {
                boxes: vec![(i, f64::NEG_INFINITY, center - gap)],
                visits: vec![],
            });
        }
        Constraint::WastedDeltaMinus { window, delta } => {
            let w = window_nodes(grid, *window)?;
            for s in [-1.0, 1.0] {
                alternatives.push(Family {
                    boxes: vec![],
                    visits: excursion(w, s, *delta, false).to_vec(),
                });
            }
        }
        Constraint::DeltaPlusPre { window, delta } => {
            let w = window_nodes(grid, *window)?;
            let low = -1.0 - 2.0 * delta;
            let visit = |lo, hi, strict| Visit {
                nodes: w,
                lo,
                hi,
                strict,
            };
            alternatives.push(Family {
                boxes: vec![],
                visits: vec![
                    visit(f64::NEG_INFINITY, low, false),
                    visit(*delta, f64::INFINITY, true),
                    visit(f64::NEG_INFINITY, low, true),
                ],
            });
        }
        Constraint::DisjointExcursions { window, delta, m } => {
            let w = window_nodes(grid, *window)?;
            for signs in 0..(1usize << m) {
                let mut visits = Vec::new();
                for j in 0..*m {
                    let s = if signs >> j & 1 == 1 { 1.0 } else { -1.0 };
                    visits.extend(excursion(w, s, *delta, false));
                }
                alternatives.push(Family {
                    boxes: vec![],
                    visits,
                });
            }
        }
        Constraint::AllOf(list) => {
            for c in list {
                add(c, grid, out)?;
            }
            return Ok(());
        }
    }
    // Product with the families collected so far.
    let carries = |f: &Family| !f.visits.is_empty();
    if out.families.iter().any(carries) && alternatives.iter().any(carries) {
        return Err(Error::config(
            "constraint",
            "at most one member of an intersection may need windowed witnesses",
        ));
    }
    let mut next = Vec::new();
    for f in &out.families {
        for a in &alternatives {
            let mut g = f.clone();
            g.boxes.extend(a.boxes.iter().cloned());
            g.visits.extend(a.visits.iter().cloned());
            next.push(g);
        }
    }
    out.families = next;
    Ok(())
}

/// Per-node bounds of one family with its witnesses pinned.
fn family_bounds(c: &Compiled, fam: &Family, witnesses: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = c.lo.clone();
    let mut hi = c.hi.clone();
    for &(i, l, h) in &fam.boxes {
        lo[i] = lo[i].max(l);
        hi[i] = hi[i].min(h);
    }
    for (v, &i) in fam.visits.iter().zip(witnesses) {
        lo[i] = lo[i].max(v.lo);
        hi[i] = hi[i].min(v.hi);
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------------
// Placement search: min-plus dynamic program over (node, lattice value, progress).

struct Placement {
    values: Vec<f64>,
    witnesses: Vec<usize>,
    energy: f64,
}

const ARRIVE: u8 = 0;
const ADV_CLOSED: u8 = 1;
const ADV_ARRIVE: u8 = 2;

fn lattice_search(
    grid: &Grid,
    bc: (f64, f64),
    lo: &[f64],
    hi: &[f64],
    visits: &[Visit],
    potential: &Potential,
    h: f64,
) -> Option<Placement> {
    let n = grid.points();
    let dx = grid.dx;
    let reach = visits
        .iter()
        .flat_map(|v| [v.lo, v.hi])
        .chain(lo.iter().cloned())
        .chain(hi.iter().cloned())
        .filter(|v| v.is_finite())
        .fold(bc.0.abs().max(bc.1.abs()).max(1.0), |m, v| m.max(v.abs()));
    let r = reach + 0.5;
    // Largest useful step: the optimal slope is sqrt(2V), plus slack.
    let vmax = [-r, r].iter().map(|&u| potential.eval(u)).fold(0.0, f64::max);
    let dmax = (2.0 * vmax).sqrt() * dx * 1.5 + 4.0 * h + 0.1;
    let k_max = visits.len();
    let lattice: Vec<f64> = {
        let m = (r / h).ceil() as i64;
        (-m..=m).map(|k| k as f64 * h).collect()
    };
    let mut cands: Vec<Vec<f64>> = Vec::with_capacity(n);
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return None;
    }
    for i in 0..n {
        let mut c: Vec<f64> = if i == 0 {
            vec![bc.0]
        } else if i == n - 1 {
            vec![bc.1]
        } else {
            let mut c: Vec<f64> = lattice.iter().cloned().filter(|&v| v >= lo[i] && v <= hi[i]).collect();
            for b in [lo[i], hi[i]] {
                if b.is_finite() && b.abs() <= r {
                    c.push(b);
                }
            }
            for v in visits {
                if i >= v.nodes.0 && i <= v.nodes.1 {
                    for b in [v.lo, v.hi] {
                        if b.is_finite() && b >= lo[i] && b <= hi[i] && b.abs() <= r {
                            c.push(b);
                        }
                    }
                }
            }
            c
        };
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c.dedup();
        if c.is_empty() || (i == 0 || i == n - 1) && (c[0] < lo[i] - 1e-12 || c[0] > hi[i] + 1e-12) {
            return None;
        }
        cands.push(c);
    }
    let ks = k_max + 1;
    let inf = f64::INFINITY;
    // Per node: arrival predecessor per (k, v) and how the closed state was reached.
    let mut pred: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut how: Vec<Vec<u8>> = Vec::with_capacity(n);
    let vcost = |v: f64| 0.5 * dx * potential.eval(v);

    let close = |i: usize, cand: &[f64], arrive: &[f64], how_i: &mut [u8]| -> Vec<f64> {
        let m = cand.len();
        let mut closed = arrive.to_vec();
        for k in 0..k_max {
            let vis = &visits[k];
            if i < vis.nodes.0 || i > vis.nodes.1 {
                continue;
            }
            for (j, &v) in cand.iter().enumerate() {
                if v < vis.lo || v > vis.hi {
                    continue;
                }
                let (src, tag) = if vis.strict {
                    (arrive[k * m + j], ADV_ARRIVE)
                } else {
                    (closed[k * m + j], ADV_CLOSED)
                };
                if src < closed[(k + 1) * m + j] {
                    closed[(k + 1) * m + j] = src;
                    how_i[(k + 1) * m + j] = tag;
                }
            }
        }
        closed
    };

    let m0 = cands[0].len();
    let mut arrive0 = vec![inf; ks * m0];
    for j in 0..m0 {
        arrive0[j] = 0.0;
    }
    let mut how0 = vec![ARRIVE; ks * m0];
    let mut cost = close(0, &cands[0], &arrive0, &mut how0);
    pred.push(vec![0; ks * m0]);
    how.push(how0);

    for i in 1..n {
        let (prev, cur) = (&cands[i - 1], &cands[i]);
        let (mp, mc) = (prev.len(), cur.len());
        let vp: Vec<f64> = prev.iter().map(|&u| vcost(u)).collect();
        let mut arrive = vec![inf; ks * mc];
        let mut pi = vec![0u32; ks * mc];
        let mut lo_ptr = 0usize;
        for (j, &v) in cur.iter().enumerate() {
            while lo_ptr < mp && prev[lo_ptr] < v - dmax {
                lo_ptr += 1;
            }
            let vc = vcost(v);
            for k in 0..ks {
                let row = &cost[k * mp..(k + 1) * mp];
                let mut best = inf;
                let mut arg = 0u32;
                let mut q = lo_ptr;
                while q < mp && prev[q] <= v + dmax {
                    let c = row[q];
                    if c < inf {
                        let d = v - prev[q];
                        let t = c + 0.5 * d * d / dx + vp[q] + vc;
                        if t < best {
                            best = t;
                            arg = q as u32;
                        }
                    }
                    q += 1;
                }
                arrive[k * mc + j] = best;
                pi[k * mc + j] = arg;
            }
        }
        let mut how_i = vec![ARRIVE; ks * mc];
        cost = close(i, cur, &arrive, &mut how_i);
        // Keep arrival costs for strict advances during backtracking.
        pred.push(pi);
        how.push(how_i);
        if i == n - 1 {
            let e = cost[k_max * mc];
            if !e.is_finite() {
                return None;
            }
            // Backtrack.
            let mut values = vec![0.0; n];
            let mut witnesses = vec![0usize; k_max];
            let (mut node, mut j, mut k) = (n - 1, 0usize, k_max);
            let mut closed_mode = true;
            loop {
                let m = cands[node].len();
                values[node] = cands[node][j];
                if closed_mode {
                    match how[node][k * m + j] {
                        ADV_CLOSED => {
                            witnesses[k - 1] = node;
                            k -= 1;
                            continue;
                        }
                        ADV_ARRIVE => {
                            witnesses[k - 1] = node;
                            k -= 1;
                        }
                        _ => {}
                    }
                }
                if node == 0 {
                    break;
                }
                j = pred[node][k * m + j] as usize;
                node -= 1;
                closed_mode = true;
            }
            let _ = &mut closed_mode;
            return Some(Placement {
                values,
                witnesses,
                energy: e,
            });
        }
    }
    None
}

// ---------------------------------------------------------------------------------
// Refinement: active-set semi-implicit gradient flow.

struct Descent {
    energy: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
}

fn discrete_energy(u: &[f64], dx: f64, potential: &Potential) -> f64 {
    let mut e = 0.0;
    for w in u.windows(2) {
        let d = w[1] - w[0];
        e += 0.5 * d * d / dx + 0.5 * dx * (potential.eval(w[0]) + potential.eval(w[1]));
    }
    e
}

/// `-Δu + V'(u)` at interior node `i`, the energy gradient divided by `dx`.
fn scaled_gradient(u: &[f64], i: usize, dx: f64, potential: &Potential) -> f64 {
    (2.0 * u[i] - u[i - 1] - u[i + 1]) / (dx * dx) + potential.deriv(u[i])
}

fn descend(u: &mut [f64], lo: &[f64], hi: &[f64], dx: f64, potential: &Potential, opts: &SolverOptions) -> Descent {
    let n = u.len();
    for i in 1..n - 1 {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
    let mut e = discrete_energy(u, dx, potential);
    if n <= 2 {
        return Descent {
            energy: e,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let tau_max = 0.1;
    let mut tau = 0.05;
    let mut active = vec![false; n];
    let (mut a, mut b, mut c, mut d) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut trial = u.to_vec();
    let mut residual = f64::INFINITY;
    let mut flat = 0usize;
    let mut it = 0;
    while it < opts.max_iterations {
        it += 1;
        residual = 0.0;
        for i in 1..n - 1 {
            let g = scaled_gradient(u, i, dx, potential);
            let at_lo = u[i] <= lo[i] + 1e-13 && g > 0.0;
            let at_hi = u[i] >= hi[i] - 1e-13 && g < 0.0;
            active[i] = at_lo || at_hi;
            if !active[i] {
                residual = residual.max(g.abs());
            }
        }
        if residual < opts.tolerance {
            break;
        }
        // (1 - τΔ) u_new = u - τ V'(u) on free nodes; held nodes stay put.
        let r = tau / (dx * dx);
        for i in 0..n {
            if i == 0 || i == n - 1 || active[i] {
                a[i] = 0.0;
                b[i] = 1.0;
                c[i] = 0.0;
                d[i] = u[i];
            } else {
                a[i] = -r;
                b[i] = 1.0 + 2.0 * r;
                c[i] = -r;
                d[i] = u[i] - tau * potential.deriv(u[i]);
            }
        }
        thomas(&a, &b, &mut c, &mut d, &mut trial);
        for i in 1..n - 1 {
            trial[i] = trial[i].clamp(lo[i], hi[i]);
        }
        let e_new = discrete_energy(&trial, dx, potential);
        if e_new <= e + 1e-14 * e.abs().max(1.0) {
            flat = if e - e_new < 1e-15 * e.abs().max(1.0) { flat + 1 } else { 0 };
            u.copy_from_slice(&trial);
            e = e_new;
            tau = (tau * 1.3).min(tau_max);
            if flat > 400 {
                break;
            }
        } else {
            tau *= 0.5;
            if tau < 1e-12 {
                break;
            }
        }
    }
    Descent {
        energy: e,
        iterations: it,
        residual,
        converged: residual < opts.tolerance.max(1e-5),
    }
}

/// Tridiagonal solve; `c` and `d` are overwritten.
fn thomas(a: &[f64], b: &[f64], c: &mut [f64], d: &mut [f64], x: &mut [f64]) {
    let n = b.len();
    c[0] /= b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * c[i - 1];
        if i < n - 1 {
            c[i] /= m;
        }
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
}

struct Solved {
    values: Vec<f64>,
    witnesses: Vec<usize>,
    descent: Descent,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn witness_order_ok(fam: &Family, w: &[usize]) -> bool {
    for (k, v) in fam.visits.iter().enumerate() {
        if w[k] < v.nodes.0 || w[k] > v.nodes.1 {
            return false;
        }
        if k > 0 && (w[k] < w[k - 1] || v.strict && w[k] == w[k - 1]) {
            return false;
        }
    }
    true
}

fn solve_class(
    grid: &Grid,
    bc: (f64, f64),
    constraint: &Constraint,
    potential: &Potential,
    opts: &SolverOptions,
) -> Result<Solved> {
    let comp = compile(constraint, grid)?;
    let dx = grid.dx;
    let mut starts = Vec::new();
    for fam in &comp.families {
        let (lo, hi) = family_bounds(&comp, fam, &[]);
        if let Some(p) = lattice_search(grid, bc, &lo, &hi, &fam.visits, potential, opts.lattice) {
            starts.push((p.energy, fam, p));
        }
    }
    if starts.is_empty() {
        return Err(Error::Domain("constraint set is empty for these boundary values".into()));
    }
    starts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let cutoff = starts[0].0 + 0.05;
    let mut best: Option<Solved> = None;
    for (e0, fam, p) in starts {
        if e0 > cutoff {
            break;
        }
        let mut w = p.witnesses.clone();
        let (lo, hi) = family_bounds(&comp, fam, &w);
        let mut u = p.values.clone();
        let mut desc = descend(&mut u, &lo, &hi, dx, potential, opts);
        let (mut lo_b, mut hi_b) = (lo, hi);
        // Local witness search: hill-climb each witness by single nodes.
        for _ in 0..opts.witness_rounds {
            let mut improved = false;
            for k in 0..w.len() {
                for dir in [-1i64, 1] {
                    loop {
                        let mut cand = w.clone();
                        let nk = cand[k] as i64 + dir;
                        if nk < 0 {
                            break;
                        }
                        cand[k] = nk as usize;
                        if !witness_order_ok(fam, &cand) {
                            break;
                        }
                        let (lo, hi) = family_bounds(&comp, fam, &cand);
                        let mut v = u.clone();
                        let d = descend(&mut v, &lo, &hi, dx, potential, opts);
                        if d.energy < desc.energy - 1e-12 {
                            w = cand;
                            u = v;
                            desc = d;
                            lo_b = lo;
                            hi_b = hi;
                            improved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| desc.energy < b.descent.energy) {
            best = Some(Solved {
                values: u,
                witnesses: w,
                descent: desc,
                lo: lo_b,
                hi: hi_b,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

/// Minimizes the energy over the constrained class and over the reference class.
pub fn minimize_energy(problem: &EnergyProblem, potential: &Potential) -> Result<MinimizerResult> {
    minimize_energy_with(problem, potential, &SolverOptions::default())
}

pub fn minimize_energy_with(
    problem: &EnergyProblem,
    potential: &Potential,
    opts: &SolverOptions,
) -> Result<MinimizerResult> {
    problem.validate()?;
    let g = problem.grid;
    let bc = (problem.u_minus, problem.u_plus);
    let s = solve_class(&g, bc, &problem.constraint, potential, opts)?;
    let path = Path::new(g, s.values.clone())?;
    let e = energy(&path, potential).e;
    let reference_energy = if problem.reference == problem.constraint {
        e
    } else {
        solve_class(&g, bc, &problem.reference, potential, opts)?.descent.energy
    };
    let active = (1..g.points() - 1)
        .filter(|&i| s.values[i] <= s.lo[i] + 1e-13 || s.values[i] >= s.hi[i] - 1e-13)
        .map(|i| g.x(i))
        .collect();
    Ok(MinimizerResult {
        argmin: path,
        energy: e,
        gap: e - reference_energy,
        reference_energy,
        iterations: s.descent.iterations,
        residual: s.descent.residual,
        converged: s.descent.converged,
        witnesses: s.witnesses.iter().map(|&i| g.x(i)).collect(),
        active,
    })
}

/// Constrained minus reference minimum on a shared grid.
pub fn energy_gap(problem: &EnergyProblem, potential: &Potential) -> Result<f64> {
    Ok(minimize_energy(problem, potential)?.gap)
}

// ---------------------------------------------------------------------------------
// Modica-Mortola lower bounds.

/// Least `Σ |φ(w_k) - φ(w_{k+1})|` over `w_0 = a`, `w_k ∈ sets[k]`, `w_last = b`.
fn mm_travel(wc: &WellConstants, a: f64, sets: &[(f64, f64)], b: f64) -> f64 {
    // Candidate stops per set: its finite ends and clamps of every other anchor.
    let mut anchors = vec![a, b];
    for &(l, h) in sets {
        anchors.extend([l, h].into_iter().filter(|v| v.is_finite()));
    }
    let mut layer: Vec<(f64, f64)> = vec![(wc.phi(a), 0.0)];
    for &(l, h) in sets {
        let mut pts: Vec<f64> = anchors.iter().map(|&v| v.clamp(l, h)).filter(|v| v.is_finite()).collect();
        pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pts.dedup();
        let next: Vec<(f64, f64)> = pts
            .iter()
            .map(|&p| {
                let fp = wc.phi(p);
                let c = layer.iter().map(|&(f, c)| c + (f - fp).abs()).fold(f64::INFINITY, f64::min);
                (fp, c)
            })
            .collect();
        layer = next;
    }
    let fb = wc.phi(b);
    layer.iter().map(|&(f, c)| c + (f - fb).abs()).fold(f64::INFINITY, f64::min)
}

/// A lower bound for the least energy in the class of `problem`: the travel cost in
/// `φ` through the ordered witness sets, and for bands additionally the potential floor
/// on the window.
pub fn mm_lower_bound(problem: &EnergyProblem, potential: &Potential, wc: &WellConstants) -> Result<f64> {
    problem.validate()?;
    let g = problem.grid;
    let (a, b) = (problem.u_minus, problem.u_plus);
    let comp = compile(&problem.constraint, &g)?;
    let mut best = f64::INFINITY;
    for fam in &comp.families {
        // Witness sets in position order; single-node boxes join when no windowed
        // visit needs ordering against them.
        let mut sets: Vec<(f64, f64)> = Vec::new();
        if fam.visits.is_empty() {
            let mut boxes = fam.boxes.clone();
            boxes.sort_by_key(|b| b.0);
            sets.extend(boxes.iter().map(|&(_, l, h)| (l, h)));
        } else {
            sets.extend(fam.visits.iter().map(|v| (v.lo, v.hi)));
        }
        best = best.min(mm_travel(wc, a, &sets, b));
    }
    let mut bound = best;
    for band in bands(&problem.constraint) {
        bound = bound.max(band_bound(wc, potential, a, b, &band));
    }
    Ok(bound)
}

fn bands(c: &Constraint) -> Vec<((f64, f64), f64, f64)> {
    match c {
        Constraint::Band { window, lo, hi } => {
            vec![(*window, lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))]
        }
        Constraint::AllOf(list) => list.iter().flat_map(bands).collect(),
        _ => vec![],
    }
}

fn band_bound(wc: &WellConstants, potential: &Potential, a: f64, b: f64, (w, lo, hi): &((f64, f64), f64, f64)) -> f64 {
    let (lo, hi) = (lo.max(-4.0), hi.min(4.0));
    if lo > hi {
        return f64::INFINITY;
    }
    let k = 64;
    let pts: Vec<f64> = (0..=k).map(|j| lo + (hi - lo) * j as f64 / k as f64).collect();
    let vmin = pts.iter().map(|&u| potential.eval(u)).fold(f64::INFINITY, f64::min);
    // Potential minimum on the band, conservative between samples for these smooth V.
    let vmin = if lo <= 1.0 && hi >= 1.0 || lo <= -1.0 && hi >= -1.0 { 0.0 } else { vmin * 0.999 };
    let floor = (w.1 - w.0) * vmin;
    let mut best = f64::INFINITY;
    for &p in &pts {
        let left = wc.mm_cost(a, p);
        for &q in &pts {
            let mid = floor.max(wc.mm_cost(p, q));
            best = best.min(left + mid + wc.mm_cost(q, b));
        }
    }
    // Grid sampling of p and q can only overshoot the infimum by the φ change across
    // one sample step.
    let step = (hi - lo) / k as f64;
    let slack = 2.0 * step * pts.iter().map(|&u| potential.sqrt_2v(u)).fold(0.0, f64::max);
    best - slack
}

// ---------------------------------------------------------------------------------
// Energy inequalities.

/// The energy inequalities checked numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyLemma {
    /// Staying inside `[-1+δ, 1-δ]` on `[-ℓ, ℓ]` costs at least `2δ²ℓ/C₁`.
    LongTransition,
    /// A wasted δ⁻ excursion costs at least `c₀ - Cδ`.
    WastedExcursion,
    /// The δ⁺ pre-excursion class costs at most `c₀ + Cδ` for `u_± ≤ 0`.
    DeltaPlusPre,
    /// `m` disjoint wasted excursions cost at most `c₀ + Cδ` each.
    DisjointExcursions,
    /// Reaching `-δ/2` under the ceiling `1 - δ/2` costs at least `c₀ - Cδ`.
    PointFloor,
    /// Staying `(1-δ)/2` away from `-1` at the centre costs at least `c₁ - Cδ`.
    MidpointAway,
}

impl EnergyLemma {
    pub const ALL: [EnergyLemma; 6] = [
        EnergyLemma::LongTransition,
        EnergyLemma::WastedExcursion,
        EnergyLemma::DeltaPlusPre,
        EnergyLemma::DisjointExcursions,
        EnergyLemma::PointFloor,
        EnergyLemma::MidpointAway,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnergyLemma::LongTransition => "long-transition",
            EnergyLemma::WastedExcursion => "wasted-excursion",
            EnergyLemma::DeltaPlusPre => "delta-plus-pre",
            EnergyLemma::DisjointExcursions => "disjoint-excursions",
            EnergyLemma::PointFloor => "point-floor",
            EnergyLemma::MidpointAway => "midpoint-away",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    /// Boundary values the inequality is stated for, as `[lo, hi]` per side.
    fn admissible(self, m: f64, delta: f64) -> (f64, f64) {
        match self {
            EnergyLemma::DeltaPlusPre => (-m, 0.0),
            EnergyLemma::PointFloor => (-m, 1.0 - delta),
            // For positive boundary values both classes ride just under their window
            // ceilings and the reference pays more, so the gap falls linearly in ℓ until
            // the reference leaves the +1 well at ℓ far beyond desk scale.
            EnergyLemma::MidpointAway => (-(m - delta), 0.0),
            _ => (-m, m),
        }
    }

    /// `(K, upper)`: the inequality reads `gap ≥ K - Cδ`, or `gap ≤ K + Cδ` when upper.
    fn target(self, wc: &WellConstants) -> (f64, bool) {
        match self {
            EnergyLemma::WastedExcursion | EnergyLemma::PointFloor | EnergyLemma::LongTransition => (wc.c0, false),
            EnergyLemma::MidpointAway => (wc.c1, false),
            EnergyLemma::DeltaPlusPre | EnergyLemma::DisjointExcursions => (wc.c0, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaParams {
    pub deltas: Vec<f64>,
    /// Inner half-widths `ℓ`, the domain being `[-2ℓ, 2ℓ]`. The long-transition check
    /// solves all of them; the others stop at the first `ℓ` where the inequality holds.
    pub ells: Vec<f64>,
    /// Boundary values range over `[-M, M]` intersected with the admissible set.
    pub m_bound: f64,
    /// Number of excursions for the disjoint-excursions inequality.
    pub excursions: usize,
    /// Finest grid spacing; doubled until the grid has at most `max_nodes` points.
    pub dx: f64,
    pub max_nodes: usize,
    /// Explicit boundary pairs; when empty a 3 x 3 grid over the admissible box.
    #[serde(default)]
    pub boundary: Vec<(f64, f64)>,
    /// Largest `C` accepted as "order δ".
    pub max_constant: f64,
}

impl Default for LemmaParams {
    fn default() -> Self {
        Self {
            deltas: vec![0.05, 0.1],
            ells: vec![4.0, 8.0, 16.0, 32.0],
            m_bound: 2.0,
            excursions: 2,
            dx: 0.05,
            max_nodes: 2600,
            boundary: vec![],
            max_constant: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseStatus {
    /// The inequality holds with `C ≤ max_constant` at this `ℓ`.
    Holds,
    /// It does not hold at the largest swept `ℓ`, but the gap moves linearly towards the
    /// bound; `ell_star` is the extrapolated crossing.
    Grows,
    Fails,
    /// An earlier `ℓ` of an escalating case.
    Superseded,
    /// The solver could not produce a value.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCase {
    pub u_minus: f64,
    pub u_plus: f64,
    pub delta: f64,
    pub ell: f64,
    pub dx: f64,
    pub gap: f64,
    /// Modica-Mortola lower bound for the constrained energy minus the reference energy.
    pub mm_gap_bound: f64,
    /// Signed distance to the inequality: with the fitted constant for holding cases,
    /// with `max_constant` otherwise.
    pub margin: f64,
    pub converged: bool,
    pub status: CaseStatus,
    pub ell_star: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub params: LemmaParams,
    pub worst_margin: f64,
    pub fitted_constants: BTreeMap<String, f64>,
    pub per_case: Vec<LemmaCase>,
    /// Largest per-case `ℓ` from which the inequality holds, measured or extrapolated.
    pub ell_star: Option<f64>,
    /// Every solve stays above its Modica-Mortola bound within `1e-3`.
    pub sandwich_ok: bool,
    pub pass: bool,
}

fn spacing_for(ell: f64, p: &LemmaParams) -> f64 {
    let mut dx = p.dx;
    while 4.0 * ell / dx + 1.0 > p.max_nodes as f64 {
        dx *= 2.0;
    }
    dx
}

fn problem_for(lemma: EnergyLemma, ell: f64, delta: f64, p: &LemmaParams, bc: (f64, f64)) -> Result<EnergyProblem> {
    let grid = Grid::with_spacing(-2.0 * ell, 2.0 * ell, spacing_for(ell, p))?;
    let w = (-ell, ell);
    let mut prob = EnergyProblem::new(grid, bc.0, bc.1, Constraint::None);
    match lemma {
        EnergyLemma::LongTransition => {
            prob.constraint = Constraint::Band {
                window: w,
                lo: Some(-1.0 + delta),
                hi: Some(1.0 - delta),
            }
        }
        EnergyLemma::WastedExcursion => prob.constraint = Constraint::WastedDeltaMinus { window: w, delta },
        EnergyLemma::DeltaPlusPre => prob.constraint = Constraint::DeltaPlusPre { window: w, delta },
        EnergyLemma::DisjointExcursions => {
            prob.constraint = Constraint::DisjointExcursions {
                window: w,
                delta,
                m: p.excursions,
            }
        }
        EnergyLemma::PointFloor => {
            prob.constraint = Constraint::PointFloor {
                window: w,
                level: -delta / 2.0,
                ceiling: Some(1.0 - delta / 2.0),
            }
        }
        EnergyLemma::MidpointAway => {
            let probes = vec![-2.0 * ell, -ell, 0.0, ell, 2.0 * ell];
            prob.constraint = Constraint::AllOf(vec![
                Constraint::Band {
                    window: w,
                    lo: None,
                    hi: Some(1.0 - delta / 2.0),
                },
                Constraint::Probes {
                    points: probes.clone(),
                    bound: p.m_bound + delta,
                },
                Constraint::Away {
                    x: 0.0,
                    center: -1.0,
                    gap: (1.0 - delta) / 2.0,
                },
            ]);
            prob.reference = Constraint::AllOf(vec![
                Constraint::Band {
                    window: w,
                    lo: None,
                    hi: Some(1.0 - 2.0 * delta),
                },
                Constraint::Probes {
                    points: probes,
                    bound: p.m_bound - delta,
                },
            ]);
        }
    }
    Ok(prob)
}

fn boundary_sweep(lemma: EnergyLemma, p: &LemmaParams, delta: f64) -> Vec<(f64, f64)> {
    if !p.boundary.is_empty() {
        return p.boundary.clone();
    }
    let (lo, hi) = lemma.admissible(p.m_bound, delta);
    let vals = [lo, 0.5 * (lo + hi), hi];
    vals.iter().flat_map(|&a| vals.iter().map(move |&b| (a, b))).collect()
}

fn solve_case(
    lemma: EnergyLemma,
    params: &LemmaParams,
    potential: &Potential,
    wc: &WellConstants,
    delta: f64,
    ell: f64,
    bc: (f64, f64),
) -> Result<LemmaCase> {
    let prob = problem_for(lemma, ell, delta, params, bc)?;
    let mut case = LemmaCase {
        u_minus: bc.0,
        u_plus: bc.1,
        delta,
        ell,
        dx: prob.grid.dx,
        gap: f64::NAN,
        mm_gap_bound: f64::NAN,
        margin: f64::NAN,
        converged: false,
        status: CaseStatus::Inconclusive,
        ell_star: None,
    };
    if let Ok(r) = minimize_energy(&prob, potential) {
        case.gap = r.gap;
        case.converged = r.converged;
        case.mm_gap_bound = mm_lower_bound(&prob, potential, wc)? - r.reference_energy;
        case.status = CaseStatus::Holds;
    }
    Ok(case)
}

/// Sweeps boundary values, solves every case and fits the constant of the inequality.
pub fn verify_energy_lemma(lemma: EnergyLemma, params: &LemmaParams, potential: &Potential) -> Result<LemmaReport> {
    if params.deltas.is_empty() || params.ells.is_empty() {
        return Err(Error::config("lemma.params", "need at least one delta and one ell"));
    }
    if lemma == EnergyLemma::LongTransition && params.ells.len() < 2 {
        return Err(Error::config("lemma.ells", "the long-transition check fits a slope in ell"));
    }
    if !(params.dx > 0.0) || params.max_nodes < 16 {
        return Err(Error::config("lemma.dx", "need a positive spacing and at least 16 nodes"));
    }
    if !(params.max_constant >= 0.0) {
        return Err(Error::config("lemma.max_constant", "must be non-negative"));
    }
    let wc = well_constants(potential, 64)?;
    let mut ells = params.ells.clone();
    ells.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let jobs: Vec<(f64, (f64, f64))> = params
        .deltas
        .iter()
        .flat_map(|&d| boundary_sweep(lemma, params, d).into_iter().map(move |bc| (d, bc)))
        .collect();
    let mut fitted = BTreeMap::new();
    let (target, upper) = lemma.target(&wc);
    let scale = if lemma == EnergyLemma::DisjointExcursions {
        params.excursions as f64
    } else {
        1.0
    };
    // How much C a gap needs, and the gap at which the inequality holds with C = cmax.
    let need = |c: &LemmaCase| {
        let v = if upper { c.gap / scale - target } else { target - c.gap / scale };
        (v / c.delta).max(0.0)
    };
    let bound = |delta: f64, cmax: f64| {
        scale * if upper { target + cmax * delta } else { target - cmax * delta }
    };

    let (per_case, pass_form) = if lemma == EnergyLemma::LongTransition {
        let per_case: Vec<LemmaCase> = jobs
            .par_iter()
            .flat_map_iter(|&(d, bc)| ells.iter().map(move |&l| (d, l, bc)).collect::<Vec<_>>())
            .map(|(d, l, bc)| solve_case(lemma, params, potential, &wc, d, l, bc))
            .collect::<Result<_>>()?;
        let mut pass = true;
        let (mut c1_slope, mut c1_ref, mut min_r2): (f64, f64, f64) = (0.0, 0.0, 1.0);
        for chunk in per_case.chunks(ells.len()) {
            if chunk.iter().any(|c| c.status == CaseStatus::Inconclusive) {
                pass = false;
                continue;
            }
            let x: Vec<f64> = chunk.iter().map(|c| c.ell).collect();
            let y: Vec<f64> = chunk.iter().map(|c| c.gap).collect();
            let fit = linear_fit(&x, &y);
            let d = chunk[0].delta;
            min_r2 = min_r2.min(fit.r2);
            pass &= fit.slope > 0.0 && fit.r2 >= 0.98;
            c1_slope = c1_slope.max(2.0 * d * d / fit.slope.max(1e-300));
            c1_ref = c1_ref.max(d * d / potential.eval(1.0 - d));
        }
        // Smallest constant with gap ≥ 2δ²ℓ/C₁ in every case.
        let c1_cases = per_case
            .iter()
            .filter(|c| c.status == CaseStatus::Holds)
            .map(|c| 2.0 * c.delta * c.delta * c.ell / c.gap.max(1e-300))
            .fold(0.0, f64::max);
        let mut per_case = per_case;
        for c in per_case.iter_mut().filter(|c| c.status == CaseStatus::Holds) {
            c.margin = c.gap - 2.0 * c.delta * c.delta * c.ell / c1_cases;
            if c.gap <= 0.0 {
                c.status = CaseStatus::Fails;
                pass = false;
            }
        }
        fitted.insert("C1_slope".into(), c1_slope);
        fitted.insert("C1_cases".into(), c1_cases);
        fitted.insert("C1_reference".into(), c1_ref);
        fitted.insert("min_r2".into(), min_r2);
        (per_case, pass)
    } else {
        let rows: Vec<Vec<LemmaCase>> = jobs
            .par_iter()
            .map(|&(d, bc)| -> Result<Vec<LemmaCase>> {
                let mut rows: Vec<LemmaCase> = Vec::new();
                for &l in &ells {
                    let c = solve_case(lemma, params, potential, &wc, d, l, bc)?;
                    let done = c.status == CaseStatus::Inconclusive || need(&c) <= params.max_constant;
                    if let Some(prev) = rows.last_mut() {
                        prev.status = CaseStatus::Superseded;
                    }
                    rows.push(c);
                    if done {
                        break;
                    }
                }
                let k = rows.len();
                let last = &rows[k - 1];
                if last.status == CaseStatus::Holds && need(last) > params.max_constant {
                    let b = bound(d, params.max_constant);
                    let trend = if k >= 2 {
                        let prev = &rows[k - 2];
                        Some((last.gap - prev.gap) / (last.ell - prev.ell))
                    } else {
                        None
                    };
                    let towards = trend.filter(|&s| if upper { s < 0.0 } else { s > 0.0 });
                    let last = &mut rows[k - 1];
                    match towards {
                        Some(s) => {
                            last.status = CaseStatus::Grows;
                            last.ell_star = Some(last.ell + (b - last.gap) / s);
                        }
                        None => last.status = CaseStatus::Fails,
                    }
                    last.margin = if upper { b - last.gap } else { last.gap - b };
                } else if last.status == CaseStatus::Holds {
                    rows[k - 1].ell_star = Some(last.ell);
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        let mut per_case: Vec<LemmaCase> = rows.into_iter().flatten().collect();
        let cfit = per_case
            .iter()
            .filter(|c| c.status == CaseStatus::Holds)
            .map(need)
            .fold(0.0, f64::max);
        for c in per_case.iter_mut().filter(|c| c.status == CaseStatus::Holds) {
            let b = bound(c.delta, cfit);
            c.margin = if upper { b - c.gap } else { c.gap - b };
        }
        fitted.insert("C".into(), cfit);
        fitted.insert("target".into(), target);
        let pass = per_case
            .iter()
            .all(|c| !matches!(c.status, CaseStatus::Fails | CaseStatus::Inconclusive));
        (per_case, pass)
    };

    let solved = |c: &&LemmaCase| c.status != CaseStatus::Inconclusive;
    let sandwich_ok = per_case.iter().filter(solved).all(|c| c.gap >= c.mm_gap_bound - 1e-3);
    let finals = |c: &&LemmaCase| c.status != CaseStatus::Superseded && c.status != CaseStatus::Inconclusive;
    let worst_margin = per_case.iter().filter(finals).map(|c| c.margin).fold(f64::INFINITY, f64::min);
    let ell_star = if lemma == EnergyLemma::LongTransition {
        ells.first().copied()
    } else {
        per_case.iter().filter(finals).map(|c| c.ell_star).try_fold(0.0, |m: f64, s| s.map(|s| m.max(s)))
    };
    Ok(LemmaReport {
        lemma: lemma.name().to_string(),
        params: params.clone(),
        worst_margin,
        fitted_constants: fitted,
        per_case,
        ell_star,
        sandwich_ok,
        pass: pass_form && sandwich_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::optimal_profile;
    use crate::rng::RandomSource;

    fn quartic() -> Potential {
        Potential::quartic()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pot = quartic();
        let dx = 0.1;
        let mut rng = RandomSource::new(3, 0);
        let u: Vec<f64> = (0..30).map(|_| 1.5 * rng.normal()).collect();
        for i in 1..29 {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fd = (discrete_energy(&up, dx, &pot) - discrete_energy(&dn, dx, &pot)) / (2.0 * h);
            let an = scaled_gradient(&u, i, dx, &pot) * dx;
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "node {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn unconstrained_layer_matches_the_profile() {
        let pot = quartic();
        let g = Grid::with_spacing(-10.0, 10.0, 0.02).unwrap();
        let r = minimize_energy(&EnergyProblem::new(g, -1.0, 1.0, Constraint::None), &pot).unwrap();
        let c0 = 2.0 * 2f64.sqrt() / 3.0;
        assert!((r.energy - c0).abs() < 1e-3, "{}", r.energy);
        assert_eq!(r.gap, 0.0);
        // Compare against the translate that shares the zero crossing.
        let p = &r.argmin;
        let k = (0..p.len() - 1).find(|&k| p.values[k] <= 0.0 && p.values[k + 1] > 0.0).unwrap();
        let x0 = p.x(k) + p.values[k] / (p.values[k] - p.values[k + 1]) * g.dx;
        let m = optimal_profile(&pot, 12.0, 0.005).unwrap();
        let err = (0..p.len())
            .map(|i| (p.values[i] - m.value_at(p.x(i) - x0)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn constant_well_has_no_energy() {
        let g = Grid::with_spacing(-5.0, 5.0, 0.1).unwrap();
        let r = minimize_energy(&EnergyProblem::new(g, 1.0, 1.0, Constraint::None), &quartic()).unwrap();
        assert!(r.energy <= 1e-6);
    }

    #[test]
    fn band_cost_grows_at_the_potential_floor_rate() {
        let pot = quartic();
        let mut ls = vec![];
        let mut es = vec![];
        for ell in [3.0, 5.0, 7.0] {
            let g = Grid::with_spacing(-2.0 * ell, 2.0 * ell, 0.05).unwrap();
            let c = Constraint::Band {
                window: (-ell, ell),
                lo: Some(-0.8),
                hi: Some(0.8),
            };
            let r = minimize_energy(&EnergyProblem::new(g, -1.0, 1.0, c), &pot).unwrap();
            assert!(r.converged);
            let inside = (0..g.points()).filter(|&i| g.x(i).abs() <= ell).all(|i| r.argmin.values[i].abs() <= 0.8 + 1e-12);
            assert!(inside);
            ls.push(ell);
            es.push(r.energy);
        }
        let fit = linear_fit(&ls, &es);
        // Pointwise: ∫V over the window is at least 2ℓ·V(0.8).
        assert!(fit.slope >= 2.0 * pot.eval(0.8) - 1e-3, "{fit:?}");
    }

    #[test]
    fn wasted_excursion_costs_about_c0() {
        let pot = quartic();
        let ell = 8.0;
        let delta = 0.05;
        let g = Grid::with_spacing(-2.0 * ell, 2.0 * ell, 0.05).unwrap();
        let c = Constraint::WastedDeltaMinus {
            window: (-ell, ell),
            delta,
        };
        let r = minimize_energy(&EnergyProblem::new(g, -1.0, 1.0, c), &pot).unwrap();
        let c0 = 2.0 * 2f64.sqrt() / 3.0;
        let cfit = (r.gap - c0).abs() / delta;
        assert!(cfit <= 3.0, "gap {} C {cfit}", r.gap);
        // Witnesses are ordered, inside the window and satisfy their sets.
        let w = &r.witnesses;
        assert_eq!(w.len(), 3);
        assert!(w[0] < w[1] && w[1] < w[2]);
        assert!(r.argmin.value_at(w[1]).abs() <= delta + 1e-8);
    }

    #[test]
    fn delta_plus_pre_is_at_most_c0_plus_order_delta() {
        let pot = quartic();
        let (ell, delta) = (6.0, 0.05);
        let g = Grid::with_spacing(-2.0 * ell, 2.0 * ell, 0.05).unwrap();
        let c = Constraint::DeltaPlusPre {
            window: (-ell, ell),
            delta,
        };
        let gap = energy_gap(&EnergyProblem::new(g, -1.0, -1.0, c), &pot).unwrap();
        let c0 = 2.0 * 2f64.sqrt() / 3.0;
        assert!(gap <= c0 + 3.0 * delta, "{gap}");
        assert!(gap >= c0 - 3.0 * delta, "{gap}");
    }

    #[test]
    fn no_constraint_has_zero_gap() {
        let g = Grid::with_spacing(-3.0, 3.0, 0.1).unwrap();
        assert_eq!(energy_gap(&EnergyProblem::new(g, 0.3, -1.7, Constraint::None), &quartic()).unwrap(), 0.0);
    }

    #[test]
    fn monotone_in_delta() {
        let pot = quartic();
        let g = Grid::with_spacing(-12.0, 12.0, 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [0.05, 0.1, 0.2, 0.3] {
            let c = Constraint::WastedDeltaMinus {
                window: (-6.0, 6.0),
                delta,
            };
            let gap = energy_gap(&EnergyProblem::new(g, -1.0, 1.0, c), &pot).unwrap();
            assert!(gap <= prev + 1e-6, "delta {delta}: {gap} > {prev}");
            prev = gap;
        }
    }

    #[test]
    fn translation_of_the_window_barely_matters() {
        let pot = quartic();
        let g = Grid::with_spacing(-14.0, 14.0, 0.05).unwrap();
        let gap = |a: f64| {
            let c = Constraint::WastedDeltaMinus {
                window: (a - 4.0, a + 4.0),
                delta: 0.1,
            };
            energy_gap(&EnergyProblem::new(g, -1.0, -1.0, c), &pot).unwrap()
        };
        assert!((gap(-1.0) - gap(1.5)).abs() < 1e-3);
    }

    #[test]
    fn solver_never_undercuts_the_modica_mortola_bound() {
        let pot = quartic();
        let wc = well_constants(&pot, 64).unwrap();
        let g = Grid::with_spacing(-8.0, 8.0, 0.05).unwrap();
        let cases = [
            Constraint::WastedDeltaMinus {
                window: (-4.0, 4.0),
                delta: 0.1,
            },
            Constraint::Threshold {
                x: 0.0,
                level: 0.5,
                above: true,
            },
            Constraint::Band {
                window: (-2.0, 2.0),
                lo: Some(-0.5),
                hi: Some(0.5),
            },
            Constraint::PointFloor {
                window: (-4.0, 4.0),
                level: -0.05,
                ceiling: Some(0.95),
            },
        ];
        for c in cases {
            for bc in [(-1.0, -1.0), (-2.0, 1.5), (0.5, -0.3)] {
                let p = EnergyProblem::new(g, bc.0, bc.1, c.clone());
                let Ok(r) = minimize_energy(&p, &pot) else { continue };
                let lb = mm_lower_bound(&p, &pot, &wc).unwrap();
                assert!(r.energy >= lb - 1e-3, "{c:?} {bc:?}: {} < {lb}", r.energy);
            }
        }
    }

    #[test]
    fn midpoint_away_beats_c1_minus_order_delta() {
        let pot = quartic();
        let p = LemmaParams {
            deltas: vec![0.05],
            ells: vec![4.0],
            boundary: vec![(-1.0, -1.0), (-2.0, 0.0)],
            m_bound: 2.5,
            ..LemmaParams::default()
        };
        let rep = verify_energy_lemma(EnergyLemma::MidpointAway, &p, &pot).unwrap();
        let c1 = 5.0 / (12.0 * 2f64.sqrt());
        for c in &rep.per_case {
            assert!(c.gap >= c1 - 0.2, "{c:?}");
        }
        assert!(rep.sandwich_ok);
    }

    #[test]
    fn disjoint_excursions_cost_at_most_c0_each_plus_order_delta() {
        let pot = quartic();
        let (ell, delta) = (10.0, 0.05);
        let g = Grid::with_spacing(-2.0 * ell, 2.0 * ell, 0.05).unwrap();
        let c = Constraint::DisjointExcursions {
            window: (-ell, ell),
            delta,
            m: 2,
        };
        let r = minimize_energy(&EnergyProblem::new(g, -1.0, 1.0, c), &pot).unwrap();
        let c0 = 2.0 * 2f64.sqrt() / 3.0;
        assert!(r.gap / 2.0 <= c0 + 3.0 * delta, "{}", r.gap);
        assert_eq!(r.witnesses.len(), 6);
    }

    #[test]
    fn empty_classes_and_bad_params_are_errors() {
        let pot = quartic();
        let g = Grid::with_spacing(-3.0, 3.0, 0.1).unwrap();
        let c = Constraint::Band {
            window: (-1.0, 1.0),
            lo: Some(0.5),
            hi: Some(0.2),
        };
        assert!(minimize_energy(&EnergyProblem::new(g, 0.0, 0.0, c), &pot).is_err());
        let c = Constraint::WastedDeltaMinus {
            window: (-1.0, 1.0),
            delta: 0.7,
        };
        assert!(matches!(
            minimize_energy(&EnergyProblem::new(g, 0.0, 0.0, c), &pot),
            Err(Error::Config { .. })
        ));
        let two = Constraint::AllOf(vec![
            Constraint::WastedDeltaMinus {
                window: (-1.0, 1.0),
                delta: 0.1,
            },
            Constraint::PointFloor {
                window: (-1.0, 1.0),
                level: 0.0,
                ceiling: None,
            },
        ]);
        assert!(minimize_energy(&EnergyProblem::new(g, 0.0, 0.0, two), &pot).is_err());
    }

    #[test]
    fn lemma_report_serializes_its_fields() {
        let p = LemmaParams {
            deltas: vec![0.1],
            ells: vec![3.0],
            boundary: vec![(-1.0, -1.0)],
            dx: 0.1,
            ..LemmaParams::default()
        };
        let rep = verify_energy_lemma(EnergyLemma::WastedExcursion, &p, &quartic()).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        for k in ["lemma", "params", "worst_margin", "fitted_constants", "per_case"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(rep.worst_margin >= -1e-12);
    }
}
