use serde::{Deserialize, Serialize};

use super::Path;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Up,
    Down,
    DeltaMinusUp,
    DeltaMinusDown,
    DeltaPlusUp,
    DeltaPlusDown,
    WastedDeltaMinus,
    WastedDeltaPlus,
}

impl LayerKind {
    pub fn is_up(self) -> bool {
        matches!(self, LayerKind::Up | LayerKind::DeltaMinusUp | LayerKind::DeltaPlusUp)
    }
}

/// Which level family a layer connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelKind {
    /// `∓1` to `±1`.
    Full,
    /// `∓(1-δ)` to `±(1-δ)`.
    DeltaMinus,
    /// `∓(1+δ)` to `±(1+δ)`.
    DeltaPlus,
}

impl LevelKind {
    pub fn level(self, delta: f64) -> f64 {
        match self {
            LevelKind::Full => 1.0,
            LevelKind::DeltaMinus => 1.0 - delta,
            LevelKind::DeltaPlus => 1.0 + delta,
        }
    }

    fn kinds(self) -> (LayerKind, LayerKind) {
        match self {
            LevelKind::Full => (LayerKind::Up, LayerKind::Down),
            LevelKind::DeltaMinus => (LayerKind::DeltaMinusUp, LayerKind::DeltaMinusDown),
            LevelKind::DeltaPlus => (LayerKind::DeltaPlusUp, LayerKind::DeltaPlusDown),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WastedKind {
    DeltaMinus,
    DeltaPlus,
}

/// One located layer or excursion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEvent {
    pub kind: LayerKind,
    pub x_start: f64,
    pub x_end: f64,
    /// `(x_-, x_+)` for layers, `(x_-, x_0, x_+)` for excursions.
    pub witnesses: Vec<f64>,
    pub delta: f64,
    /// Index of the grid cell holding `x_start` (cell `k` spans points `k, k+1`).
    pub cell_start: usize,
    pub cell_end: usize,
    /// Position of `x_start` inside its cell, in `[0, 1]`.
    pub frac_start: f64,
    pub frac_end: f64,
}

impl LayerEvent {
    pub fn length(&self) -> f64 {
        self.x_end - self.x_start
    }

    /// Length counted in whole cells between the start and end cells.
    pub fn cell_length(&self, dx: f64) -> f64 {
        (self.cell_end - self.cell_start) as f64 * dx
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.x_start + self.x_end)
    }

    /// `[x_start, x_end] ⊆ [a, b]`.
    pub fn contained_in(&self, a: f64, b: f64) -> bool {
        self.x_start >= a && self.x_end <= b
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub events: Vec<LayerEvent>,
    pub delta: f64,
}

impl LayerReport {
    pub fn count(&self, kind: LayerKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn ups(&self) -> impl Iterator<Item = &LayerEvent> {
        self.events.iter().filter(|e| e.kind.is_up())
    }
}

/// Position of a value relative to the levels `±a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Region {
    Low,
    Mid,
    High,
}

#[inline]
pub(crate) fn region(u: f64, a: f64) -> Region {
    if u <= -a {
        Region::Low
    } else if u >= a {
        Region::High
    } else {
        Region::Mid
    }
}

/// Region changes along the segment from `u0` to `u1`, as `(t, new region)` with `t ∈ [0, 1]`.
#[inline]
pub(crate) fn crossings(u0: f64, u1: f64, a: f64) -> ([(f64, Region); 2], usize) {
    let mut out = [(0.0, Region::Mid); 2];
    let mut n = 0;
    let t = |c: f64| (c - u0) / (u1 - u0);
    if u1 > u0 {
        if u0 <= -a && -a < u1 {
            out[n] = (t(-a), Region::Mid);
            n += 1;
        }
        if u0 < a && a <= u1 {
            out[n] = (t(a), Region::High);
            n += 1;
        }
    } else if u1 < u0 {
        if u0 >= a && a > u1 {
            out[n] = (t(a), Region::Mid);
            n += 1;
        }
        if u0 > -a && -a >= u1 {
            out[n] = (t(-a), Region::Low);
            n += 1;
        }
    }
    (out, n)
}

/// Locates maximal layers between the levels `∓a` on the piecewise-linear path.
///
/// A layer runs from the last exit of one extreme region to the next entry into the
/// opposite one, so the open interval in between stays strictly inside `(-a, a)`.
pub fn detect_layers(path: &Path, kind: LevelKind, delta: f64) -> LayerReport {
    let a = kind.level(delta);
    let (up, down) = kind.kinds();
    let g = &path.grid;
    let v = &path.values;
    let mut events = Vec::new();
    let mut cur = region(v[0], a);
    let mut last: Option<(Region, f64, usize, f64)> = match cur {
        Region::Mid => None,
        r => Some((r, g.x(0), 0, 0.0)),
    };
    for k in 0..v.len() - 1 {
        let (cs, n) = crossings(v[k], v[k + 1], a);
        for &(t, next) in &cs[..n] {
            let x = g.x(k) + t * g.dx;
            if cur != Region::Mid {
                last = Some((cur, x, k, t));
            }
            if next != Region::Mid {
                if let Some((r, xs, ks, ts)) = last {
                    if r != next {
                        events.push(LayerEvent {
                            kind: if next == Region::High { up } else { down },
                            x_start: xs,
                            x_end: x,
                            witnesses: vec![xs, x],
                            delta: if kind == LevelKind::Full { 0.0 } else { delta },
                            cell_start: ks,
                            cell_end: k,
                            frac_start: ts,
                            frac_end: t,
                        });
                    }
                }
                last = Some((next, x, k, t));
            }
            cur = next;
        }
    }
    LayerReport { events, delta }
}

/// A point of the interpolated path used as a candidate witness.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    x: f64,
    u: f64,
}

fn candidates(path: &Path, levels: &[f64], window: (f64, f64)) -> Vec<Candidate> {
    let g = &path.grid;
    let v = &path.values;
    let (w0, w1) = window;
    let mut out = vec![Candidate {
        x: w0,
        u: path.value_at(w0),
    }];
    for k in 0..v.len() - 1 {
        let (x0, x1) = (g.x(k), g.x(k + 1));
        if x1 <= w0 || x0 >= w1 {
            continue;
        }
        if x0 > w0 {
            out.push(Candidate { x: x0, u: v[k] });
        }
        let (u0, u1) = (v[k], v[k + 1]);
        let mut cross: Vec<Candidate> = levels
            .iter()
            .filter(|&&c| (u0 - c) * (u1 - c) < 0.0)
            .map(|&c| Candidate {
                x: x0 + (c - u0) / (u1 - u0) * g.dx,
                u: c,
            })
            .filter(|c| c.x > w0 && c.x < w1)
            .collect();
        cross.sort_by(|a, b| a.x.total_cmp(&b.x));
        out.extend(cross);
    }
    out.push(Candidate {
        x: w1,
        u: path.value_at(w1),
    });
    out
}

const MEMBER_TOL: f64 = 1e-12;

struct WastedRule {
    delta: f64,
    kind: WastedKind,
}

impl WastedRule {
    fn levels(&self) -> Vec<f64> {
        let d = self.delta;
        match self.kind {
            WastedKind::DeltaMinus => vec![-1.0 - d, -1.0 + d, -d, d, 1.0 - d, 1.0 + d],
            WastedKind::DeltaPlus => vec![-1.0 - d, 0.0],
        }
    }

    /// Sign families for the outer witnesses.
    fn families(&self) -> &'static [f64] {
        match self.kind {
            WastedKind::DeltaMinus => &[-1.0, 1.0],
            WastedKind::DeltaPlus => &[-1.0],
        }
    }

    fn outer(&self, u: f64, s: f64) -> bool {
        match self.kind {
            WastedKind::DeltaMinus => (u - s).abs() <= self.delta + MEMBER_TOL,
            WastedKind::DeltaPlus => u <= -1.0 - self.delta + MEMBER_TOL,
        }
    }

    fn inner(&self, u: f64) -> bool {
        match self.kind {
            WastedKind::DeltaMinus => u.abs() <= self.delta + MEMBER_TOL,
            WastedKind::DeltaPlus => u.abs() <= MEMBER_TOL,
        }
    }
}

fn check_window(path: &Path, window: (f64, f64)) -> Result<()> {
    if !(window.1 > window.0) || !path.grid.contains(window.0) || !path.grid.contains(window.1) {
        return Err(Error::Domain(format!(
            "window [{}, {}] is not inside the path domain",
            window.0, window.1
        )));
    }
    Ok(())
}

/// Greedy left-to-right disjoint wasted excursions inside `window`.
///
/// For δ⁻ the outer witnesses sit within `δ` of the same well (either well);
/// for δ⁺ they sit at or below `-1-δ` and the middle witness is a zero.
pub fn detect_wasted_excursions(
    path: &Path,
    kind: WastedKind,
    delta: f64,
    window: (f64, f64),
) -> Result<LayerReport> {
    check_window(path, window)?;
    let rule = WastedRule { delta, kind };
    let cands = candidates(path, &rule.levels(), window);
    let g = &path.grid;
    let cell = |x: f64| (g.position(x).floor().max(0.0) as usize).min(g.n);
    let frac = |x: f64| (g.position(x) - cell(x) as f64).clamp(0.0, 1.0);
    let mut events = Vec::new();
    let mut start = 0usize;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for &s in rule.families() {
            let Some(i) = (start..cands.len()).find(|&i| rule.outer(cands[i].u, s)) else {
                continue;
            };
            let Some(j) = (i + 1..cands.len()).find(|&j| rule.inner(cands[j].u)) else {
                continue;
            };
            let Some(k) = (j + 1..cands.len()).find(|&k| rule.outer(cands[k].u, s)) else {
                continue;
            };
            if best.is_none_or(|b| k < b.2) {
                best = Some((i, j, k));
            }
        }
        let Some((i, j, k)) = best else { break };
        let (xm, x0, xp) = (cands[i].x, cands[j].x, cands[k].x);
        events.push(LayerEvent {
            kind: match kind {
                WastedKind::DeltaMinus => LayerKind::WastedDeltaMinus,
                WastedKind::DeltaPlus => LayerKind::WastedDeltaPlus,
            },
            x_start: xm,
            x_end: xp,
            witnesses: vec![xm, x0, xp],
            delta,
            cell_start: cell(xm),
            cell_end: cell(xp),
            frac_start: frac(xm),
            frac_end: frac(xp),
        });
        start = k + 1;
    }
    Ok(LayerReport { events, delta })
}

/// Maximal number of disjoint wasted excursions by exhaustive search over witness
/// triples; a reference for [`detect_wasted_excursions`] on short paths.
pub fn brute_force_wasted_count(
    path: &Path,
    kind: WastedKind,
    delta: f64,
    window: (f64, f64),
) -> Result<usize> {
    check_window(path, window)?;
    let rule = WastedRule { delta, kind };
    let c = candidates(path, &rule.levels(), window);
    let n = c.len();
    // best[e] = most disjoint triples using candidates 0..e (exclusive).
    let mut best = vec![0usize; n + 1];
    for e in 0..n {
        best[e + 1] = best[e];
        for i in 0..e {
            let mut valid = false;
            'outer: for &s in rule.families() {
                if !(rule.outer(c[i].u, s) && rule.outer(c[e].u, s)) {
                    continue;
                }
                for j in i + 1..e {
                    if rule.inner(c[j].u) {
                        valid = true;
                        break 'outer;
                    }
                }
            }
            if valid {
                best[e + 1] = best[e + 1].max(best[i] + 1);
            }
        }
    }
    Ok(best[n])
}

#[cfg(test)]
mod tests {
    use super::super::Grid;
    use super::*;
    use crate::potential::{optimal_profile, Potential};
    use proptest::prelude::*;

    fn profile_path() -> Path {
        let prof = optimal_profile(&Potential::quartic(), 10.0, 0.01).unwrap();
        Path::new(Grid::symmetric(10.0, 0.01).unwrap(), prof.m).unwrap()
    }

    #[test]
    fn profile_has_one_delta_minus_layer_at_artanh() {
        let p = profile_path();
        let r = detect_layers(&p, LevelKind::DeltaMinus, 0.1);
        assert_eq!(r.len(), 1);
        let e = &r.events[0];
        assert_eq!(e.kind, LayerKind::DeltaMinusUp);
        let xs = 2f64.sqrt() * 0.9f64.atanh();
        assert!((e.x_start + xs).abs() < 0.01);
        assert!((e.x_end - xs).abs() < 0.01);
        // The profile never reaches ±1, so there is no full layer.
        assert!(detect_layers(&p, LevelKind::Full, 0.0).is_empty());
    }

    #[test]
    fn zero_path_has_no_layers() {
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        let p = Path::constant(g, 0.0);
        for kind in [LevelKind::Full, LevelKind::DeltaMinus, LevelKind::DeltaPlus] {
            assert!(detect_layers(&p, kind, 0.2).is_empty());
        }
        for kind in [WastedKind::DeltaMinus, WastedKind::DeltaPlus] {
            // u ≡ 0 is a zero everywhere but never near a well.
            assert!(detect_wasted_excursions(&p, kind, 0.2, (-5.0, 5.0)).unwrap().is_empty());
        }
    }

    #[test]
    fn sawtooth_has_three_alternating_layers() {
        // Crosses ±1 six times: -1.2 → 1.2 → -1.2 → 1.2 with flat stretches.
        let g = Grid::symmetric(30.0, 0.05).unwrap();
        let p = Path::from_fn(g, |x| 1.2 * (std::f64::consts::PI * (x + 30.0) / 20.0 + std::f64::consts::PI).cos());
        let r = detect_layers(&p, LevelKind::Full, 0.0);
        let kinds: Vec<LayerKind> = r.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![LayerKind::Up, LayerKind::Down, LayerKind::Up]);
        for e in &r.events {
            let (a, b) = (p.value_at(e.x_start), p.value_at(e.x_end));
            let (ea, eb) = if e.kind == LayerKind::Up { (-1.0, 1.0) } else { (1.0, -1.0) };
            assert!((a - ea).abs() < 1e-12 && (b - eb).abs() < 1e-12);
        }
    }

    #[test]
    fn bump_gives_one_wasted_excursion() {
        // -1 + exp(-x^2) reaches 0 at x = 0 and sits within 0.25 of -1 at x = ±3.
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        let p = Path::from_fn(g, |x| -1.0 + (-x * x).exp());
        let r = detect_wasted_excursions(&p, WastedKind::DeltaMinus, 0.25, (-5.0, 5.0)).unwrap();
        assert_eq!(r.len(), 1);
        let w = &r.events[0].witnesses;
        assert!(w[0] < w[1] && w[1] < w[2]);
        assert_eq!(brute_force_wasted_count(&p, WastedKind::DeltaMinus, 0.25, (-5.0, 5.0)).unwrap(), 1);
    }

    #[test]
    fn constant_minus_one_has_no_excursions() {
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        let p = Path::constant(g, -1.0);
        for kind in [WastedKind::DeltaMinus, WastedKind::DeltaPlus] {
            assert!(detect_wasted_excursions(&p, kind, 0.2, (-5.0, 5.0)).unwrap().is_empty());
        }
    }

    #[test]
    fn delta_plus_excursion_from_below() {
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        let p = Path::from_fn(g, |x| -1.5 + 2.0 * (-x * x).exp());
        let r = detect_wasted_excursions(&p, WastedKind::DeltaPlus, 0.2, (-5.0, 5.0)).unwrap();
        assert_eq!(r.len(), 1);
        assert!(p.value_at(r.events[0].witnesses[1]).abs() < 1e-12);
    }

    #[test]
    fn window_outside_domain_is_rejected() {
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        let p = Path::constant(g, -1.0);
        assert!(detect_wasted_excursions(&p, WastedKind::DeltaMinus, 0.2, (-6.0, 0.0)).is_err());
    }

    fn smooth_path(coef: &[f64], l: f64, dx: f64, bc: (f64, f64)) -> Path {
        let g = Grid::symmetric(l, dx).unwrap();
        let mut p = Path::from_fn(g, |x| {
            let s = (x + l) / (2.0 * l);
            let mut v = bc.0 + (bc.1 - bc.0) * s;
            for (k, c) in coef.iter().enumerate() {
                v += c * ((k + 1) as f64 * std::f64::consts::PI * s).sin();
            }
            v
        });
        // sin(kπ) is not exactly zero in floating point.
        let last = p.len() - 1;
        p.values[0] = bc.0;
        p.values[last] = bc.1;
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn greedy_matches_brute_force(coef in prop::collection::vec(-1.5f64..1.5, 1..6), delta in 0.05f64..0.45) {
            let p = smooth_path(&coef, 2.0, 0.05, (-1.0, -1.0));
            for kind in [WastedKind::DeltaMinus, WastedKind::DeltaPlus] {
                let greedy = detect_wasted_excursions(&p, kind, delta, (-2.0, 2.0)).unwrap().len();
                let brute = brute_force_wasted_count(&p, kind, delta, (-2.0, 2.0)).unwrap();
                prop_assert_eq!(greedy, brute);
            }
        }

        #[test]
        fn full_layers_contain_delta_minus_layers(coef in prop::collection::vec(-2.0f64..2.0, 1..8), delta in 0.01f64..0.49) {
            let p = smooth_path(&coef, 5.0, 0.05, (-1.0, 1.0));
            let full = detect_layers(&p, LevelKind::Full, 0.0);
            let inner = detect_layers(&p, LevelKind::DeltaMinus, delta);
            for e in &full.events {
                let want = if e.kind == LayerKind::Up { LayerKind::DeltaMinusUp } else { LayerKind::DeltaMinusDown };
                prop_assert!(inner.events.iter().any(|d| d.kind == want && d.contained_in(e.x_start, e.x_end)));
            }
        }

        #[test]
        fn boundary_values_fix_layer_parity(coef in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let p = smooth_path(&coef, 5.0, 0.05, (-1.0, 1.0));
            let r = detect_layers(&p, LevelKind::Full, 0.0);
            let up = r.count(LayerKind::Up) as i64;
            let down = r.count(LayerKind::Down) as i64;
            prop_assert_eq!(up - down, 1);
        }

        #[test]
        fn layer_endpoints_hit_their_levels(coef in prop::collection::vec(-3.0f64..3.0, 1..8), delta in 0.01f64..0.49) {
            let p = smooth_path(&coef, 5.0, 0.05, (-1.0, 1.0));
            for kind in [LevelKind::Full, LevelKind::DeltaMinus, LevelKind::DeltaPlus] {
                let a = kind.level(delta);
                let tol = 10.0 * f64::EPSILON * p.max_abs().max(1.0);
                for e in &detect_layers(&p, kind, delta).events {
                    let s = if e.kind.is_up() { 1.0 } else { -1.0 };
                    prop_assert!((p.value_in_cell(e.cell_start, e.frac_start) + s * a).abs() <= tol);
                    prop_assert!((p.value_in_cell(e.cell_end, e.frac_end) - s * a).abs() <= tol);
                }
            }
        }
    }
}
