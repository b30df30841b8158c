//! Measure-preserving path transforms and a statistical check that they preserve the law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_domain::{detect_layers, stopping_point, LevelKind, Path, Side, StopRule, StoppingSpec};
use crate::rng::RandomSource;
use crate::stats::ks_two_sample;

/// Which transform to apply. Stopping points are always evaluated on the input path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReflectionSpec {
    /// `u ↦ -u`.
    Vertical,
    /// `u ↦ u(x_- + x_+ - x)`.
    Horizontal,
    /// Both of the above.
    Point,
    /// Negate on `[χ_l, χ_r]` when `χ_l < χ_r`, identity otherwise.
    BetweenStoppingPoints { left: StoppingSpec, right: StoppingSpec },
    /// Nested negations, `pairs[0]` outermost. Pair `i` holds `(χ_{i+1}, χ_{2n-i})`.
    Composed { pairs: Vec<(StoppingSpec, StoppingSpec)> },
    /// Point reflection between the first hit of `low` in `source` and the last hit
    /// of `high` in `target`.
    PointBetweenHits {
        source: (f64, f64),
        target: (f64, f64),
        low: f64,
        high: f64,
    },
    /// Negation on a fixed window. Does not preserve the measure; used as a control.
    FixedWindow { a: f64, b: f64 },
}

impl ReflectionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ReflectionSpec::Vertical => "vertical",
            ReflectionSpec::Horizontal => "horizontal",
            ReflectionSpec::Point => "point",
            ReflectionSpec::BetweenStoppingPoints { .. } => "between-stopping-points",
            ReflectionSpec::Composed { .. } => "composed",
            ReflectionSpec::PointBetweenHits { .. } => "point-between-hits",
            ReflectionSpec::FixedWindow { .. } => "fixed-window",
        }
    }

    /// The reflection used for the uniformity argument with hit levels `∓1`.
    pub fn between_hits(source: (f64, f64), target: (f64, f64)) -> Self {
        ReflectionSpec::PointBetweenHits {
            source,
            target,
            low: -1.0,
            high: 1.0,
        }
    }

    /// Zero crossings after `|u| = 1 - δ`, searched from the ends of `window` inwards.
    pub fn between_zeros(window: (f64, f64), delta: f64) -> Self {
        let rule = StopRule::TwoStage {
            trigger: 1.0 - delta,
            target: 0.0,
        };
        ReflectionSpec::BetweenStoppingPoints {
            left: StoppingSpec::left(window, rule),
            right: StoppingSpec::right(window, rule),
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let side_ok = |l: &StoppingSpec, r: &StoppingSpec| {
            if l.side != Side::Left || r.side != Side::Right {
                return Err(Error::config(
                    "reflection.pairs",
                    "each pair needs a left then a right stopping point",
                ));
            }
            Ok(())
        };
        let g = &path.grid;
        let window_ok = |field: &str, (a, b): (f64, f64)| {
            if !(a <= b) || !g.contains(a) || !g.contains(b) {
                return Err(Error::config(field, "window must be an interval inside the domain"));
            }
            Ok(())
        };
        match self {
            ReflectionSpec::BetweenStoppingPoints { left, right } => side_ok(left, right),
            ReflectionSpec::Composed { pairs } => {
                if pairs.is_empty() {
                    return Err(Error::config("reflection.pairs", "need at least one pair"));
                }
                pairs.iter().try_for_each(|(l, r)| side_ok(l, r))
            }
            ReflectionSpec::PointBetweenHits {
                source,
                target,
                low,
                high,
            } => {
                window_ok("reflection.source", *source)?;
                window_ok("reflection.target", *target)?;
                if !low.is_finite() || !high.is_finite() || *low != -*high {
                    return Err(Error::config(
                        "reflection.levels",
                        "hit levels must be finite and mirror images",
                    ));
                }
                Ok(())
            }
            ReflectionSpec::FixedWindow { a, b } => window_ok("reflection.window", (*a, *b)),
            _ => Ok(()),
        }
    }
}

/// Stopping points a transform acts on, in the order its kind expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Anchors {
    None,
    /// `(χ_l, χ_r)` per pair, outermost first.
    Pairs(Vec<(f64, f64)>),
    /// `(χ_-, χ_+)`.
    Hits(f64, f64),
}

/// Evaluates the stopping points of `spec` on `path`.
pub fn anchors(path: &Path, spec: &ReflectionSpec) -> Result<Anchors> {
    spec.validate(path)?;
    Ok(match spec {
        ReflectionSpec::BetweenStoppingPoints { left, right } => {
            Anchors::Pairs(vec![(stopping_point(path, left)?, stopping_point(path, right)?)])
        }
        ReflectionSpec::Composed { pairs } => Anchors::Pairs(
            pairs
                .iter()
                .map(|(l, r)| Ok((stopping_point(path, l)?, stopping_point(path, r)?)))
                .collect::<Result<_>>()?,
        ),
        ReflectionSpec::PointBetweenHits {
            source,
            target,
            low,
            high,
        } => {
            let lo = stopping_point(path, &StoppingSpec::left(*source, StopRule::Hit { level: *low }))?;
            let hi = stopping_point(path, &StoppingSpec::right(*target, StopRule::Hit { level: *high }))?;
            Anchors::Hits(lo, hi)
        }
        _ => Anchors::None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reflected {
    pub path: Path,
    /// Some pair of stopping points was out of order and left as the identity.
    pub degenerate: bool,
}

/// Applies `spec` to `path`, recomputing stopping points from `path`.
pub fn apply_reflection(path: &Path, spec: &ReflectionSpec) -> Result<Path> {
    Ok(reflect(path, spec, None)?.path)
}

/// As [`apply_reflection`], with the degenerate-pair flag. When `rng` is given, point
/// reflections evaluate the path between nodes with a Brownian-bridge draw of noise
/// level `epsilon` instead of the linear interpolant, so the reflected nodes keep
/// their fluctuations.
pub fn reflect(path: &Path, spec: &ReflectionSpec, rng: Option<(&mut RandomSource, f64)>) -> Result<Reflected> {
    let a = anchors(path, spec)?;
    apply_with_anchors(path, spec, &a, rng)
}

/// Applies `spec` with stopping points held fixed. With fixed anchors every kind is an
/// involution, bitwise for the negations and whenever `χ_- + χ_+` is a grid translate.
pub fn apply_with_anchors(
    path: &Path,
    spec: &ReflectionSpec,
    anchors: &Anchors,
    rng: Option<(&mut RandomSource, f64)>,
) -> Result<Reflected> {
    let g = path.grid;
    let mut out = path.clone();
    let mut degenerate = false;
    match (spec, anchors) {
        (ReflectionSpec::Vertical, _) => out = path.negated(),
        (ReflectionSpec::Horizontal, _) | (ReflectionSpec::Point, _) => {
            out.values.reverse();
            if matches!(spec, ReflectionSpec::Point) {
                out.values.iter_mut().for_each(|v| *v = -*v);
            }
        }
        (ReflectionSpec::BetweenStoppingPoints { .. }, Anchors::Pairs(p))
        | (ReflectionSpec::Composed { .. }, Anchors::Pairs(p)) => {
            // Innermost pair first, as in the nested composition.
            for &(l, r) in p.iter().rev() {
                if l < r {
                    negate_on(&mut out, l, r);
                } else {
                    degenerate = true;
                }
            }
            let flat: Vec<f64> = p.iter().map(|q| q.0).chain(p.iter().rev().map(|q| q.1)).collect();
            degenerate |= flat.windows(2).any(|w| w[0] >= w[1]);
        }
        (ReflectionSpec::PointBetweenHits { .. }, &Anchors::Hits(lo, hi)) => {
            if lo <= hi {
                point_reflect(path, &mut out, lo, hi, rng);
            }
        }
        (ReflectionSpec::FixedWindow { a, b }, _) => negate_on(&mut out, *a, *b),
        _ => {
            return Err(Error::Contract(format!(
                "anchors do not match a `{}` reflection",
                spec.name()
            )))
        }
    }
    debug_assert_eq!(out.grid, g);
    Ok(Reflected {
        path: out,
        degenerate,
    })
}

fn negate_on(path: &mut Path, a: f64, b: f64) {
    let g = path.grid;
    for i in 0..g.points() {
        let x = g.x(i);
        if x >= a && x <= b {
            path.values[i] = -path.values[i];
        }
    }
}

/// Nodes strictly inside `(lo, hi)` take `-u(lo + hi - x)`. The hit points act as
/// virtual nodes; the linear interpolant already passes through them.
fn point_reflect(src: &Path, out: &mut Path, lo: f64, hi: f64, mut rng: Option<(&mut RandomSource, f64)>) {
    let g = src.grid;
    for i in 0..g.points() {
        let x = g.x(i);
        if x <= lo || x >= hi {
            continue;
        }
        let y = lo + hi - x;
        let mut v = src.value_at(y);
        if let Some((r, eps)) = rng.as_mut() {
            let t = g.position(y);
            let k = t.floor();
            let (mut left, mut right) = (g.x_minus + k * g.dx, g.x_minus + (k + 1.0) * g.dx);
            if lo > left && lo < y {
                left = lo;
            }
            if hi < right && hi > y {
                right = hi;
            }
            let var = *eps * (y - left) * (right - y) / (right - left);
            if var > 0.0 {
                v += var.sqrt() * r.normal();
            }
        }
        out.values[i] = -v;
    }
}

/// Scalar path functionals used by [`invariance_test`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stat", rename_all = "kebab-case")]
pub enum Statistic {
    Integral,
    ValueAt { x: f64 },
    MaxAbs,
    /// Number of δ⁻ layers of either orientation.
    LayerCount { delta: f64 },
    /// `∫ u²`.
    SquareIntegral,
}

impl Statistic {
    pub fn eval(&self, path: &Path) -> f64 {
        match *self {
            Statistic::Integral => path.integral(),
            Statistic::ValueAt { x } => path.value_at(x),
            Statistic::MaxAbs => path.max_abs(),
            Statistic::LayerCount { delta } => detect_layers(path, LevelKind::DeltaMinus, delta).len() as f64,
            Statistic::SquareIntegral => {
                let sq = Path {
                    grid: path.grid,
                    values: path.values.iter().map(|v| v * v).collect(),
                };
                sq.integral()
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Statistic::Integral => "integral".into(),
            Statistic::ValueAt { x } => format!("u({x})"),
            Statistic::MaxAbs => "max|u|".into(),
            Statistic::LayerCount { delta } => format!("layers(delta={delta})"),
            Statistic::SquareIntegral => "integral u^2".into(),
        }
    }

    /// `∫u`, `u(0)`, `max|u|`, δ⁻ layer count and `u(probe)`.
    pub fn battery(delta: f64, probe: f64) -> Vec<Statistic> {
        vec![
            Statistic::Integral,
            Statistic::ValueAt { x: 0.0 },
            Statistic::MaxAbs,
            Statistic::LayerCount { delta },
            Statistic::ValueAt { x: probe },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub transform: String,
    pub statistics: Vec<String>,
    pub ks: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    pub samples: usize,
    /// Paths whose stopping points were out of order.
    pub degenerate: usize,
    pub pass: bool,
}

/// Two-sample Kolmogorov-Smirnov per statistic between `ensemble` and its image, with
/// a Bonferroni correction over the statistics. `noise` is `(epsilon, seed)` for the
/// bridge-aware evaluation of point reflections.
pub fn invariance_test(
    transform: &ReflectionSpec,
    ensemble: &[Path],
    statistics: &[Statistic],
    alpha: f64,
    noise: Option<(f64, u64)>,
) -> Result<TestReport> {
    if ensemble.is_empty() {
        return Err(Error::Contract("invariance test needs a non-empty ensemble".into()));
    }
    if statistics.is_empty() {
        return Err(Error::config("statistics", "need at least one statistic"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha", "must lie in (0, 1)"));
    }
    let mut rng = noise.map(|(eps, seed)| (RandomSource::new(seed, 0), eps));
    let mut images = Vec::with_capacity(ensemble.len());
    let mut degenerate = 0;
    for p in ensemble {
        let r = reflect(p, transform, rng.as_mut().map(|(r, e)| (r, *e)))?;
        degenerate += usize::from(r.degenerate);
        images.push(r.path);
    }
    let mut ks = Vec::new();
    let mut p_values = Vec::new();
    for s in statistics {
        let a: Vec<f64> = ensemble.iter().map(|p| s.eval(p)).collect();
        let b: Vec<f64> = images.iter().map(|p| s.eval(p)).collect();
        let (d, p) = ks_two_sample(&a, &b);
        ks.push(d);
        p_values.push(p);
    }
    let threshold = alpha / statistics.len() as f64;
    Ok(TestReport {
        transform: transform.name().to_string(),
        statistics: statistics.iter().map(Statistic::label).collect(),
        pass: p_values.iter().all(|&p| p >= threshold),
        ks,
        p_values,
        alpha,
        samples: ensemble.len(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_domain::{detect_wasted_excursions, energy, Grid, LayerKind, WastedKind};
    use crate::potential::{optimal_profile, Potential};
    use proptest::prelude::*;

    fn profile(l: f64, dx: f64) -> Path {
        let g = Grid::symmetric(l, dx).unwrap();
        let m = optimal_profile(&Potential::quartic(), l + 1.0, dx / 4.0).unwrap();
        let mut p = Path::from_fn(g, |x| m.value_at(x));
        let last = p.len() - 1;
        p.values[0] = -1.0;
        p.values[last] = 1.0;
        p
    }

    #[test]
    fn fixed_anchor_involutions_are_bitwise() {
        let p = Path::from_fn(Grid::symmetric(3.0, 0.1).unwrap(), |x| (1.3 * x).sin() + 0.2 * x);
        let specs = [
            ReflectionSpec::Vertical,
            ReflectionSpec::Horizontal,
            ReflectionSpec::Point,
            ReflectionSpec::between_zeros((-3.0, 3.0), 0.1),
            ReflectionSpec::FixedWindow { a: -1.0, b: 0.5 },
        ];
        for s in &specs {
            let a = anchors(&p, s).unwrap();
            let once = apply_with_anchors(&p, s, &a, None).unwrap().path;
            let twice = apply_with_anchors(&once, s, &a, None).unwrap().path;
            assert_eq!(twice.values, p.values, "{}", s.name());
        }
        // Grid-aligned hits map nodes onto nodes.
        let s = ReflectionSpec::between_hits((-3.0, 0.0), (0.0, 3.0));
        let a = Anchors::Hits(-2.0, 1.5);
        let once = apply_with_anchors(&p, &s, &a, None).unwrap().path;
        let twice = apply_with_anchors(&once, &s, &a, None).unwrap().path;
        let diff = twice.values.iter().zip(&p.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn recomputed_stopping_points_reproduce_the_pair() {
        // Zeros on nodes, so negation keeps every crossing where it was.
        let p = Path::from_fn(Grid::symmetric(4.0, 0.05).unwrap(), |x| {
            let v = (std::f64::consts::PI * x).sin();
            if v.abs() < 1e-9 { 0.0 } else { v }
        });
        let s = ReflectionSpec::between_zeros((-3.5, 3.5), 0.1);
        let a = anchors(&p, &s).unwrap();
        assert_eq!(a, Anchors::Pairs(vec![(-3.0, 3.0)]));
        let q = apply_reflection(&p, &s).unwrap();
        assert_ne!(q.values, p.values);
        assert_eq!(anchors(&q, &s).unwrap(), a);
        assert_eq!(apply_reflection(&q, &s).unwrap().values, p.values);
    }

    #[test]
    fn profile_between_its_zero_points_becomes_a_wasted_excursion() {
        let p = profile(10.0, 0.01);
        let rule = StopRule::TwoStage {
            trigger: 0.9,
            target: 0.0,
        };
        // From the zero of the layer to the pinned right end.
        let spec = ReflectionSpec::BetweenStoppingPoints {
            left: StoppingSpec::left((-10.0, 10.0), rule),
            right: StoppingSpec::right((-10.0, 10.0), StopRule::Hit { level: 1.0 }),
        };
        let q = apply_reflection(&p, &spec).unwrap();
        let layers = detect_layers(&q, LevelKind::Full, 0.0);
        assert_eq!(layers.count(LayerKind::Up), 0);
        let w = detect_wasted_excursions(&q, WastedKind::DeltaMinus, 0.1, (-10.0, 10.0)).unwrap();
        assert!(!w.is_empty());
    }

    #[test]
    fn vertical_between_zero_hits_removes_the_layer() {
        // A path with three zeros: up, down, up. Flipping between the outer zeros
        // leaves one layer and a wasted excursion.
        let g = Grid::symmetric(12.0, 0.02).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let p = Path::from_fn(g, |x| {
            ((x + 6.0) / s2).tanh() - ((x) / s2).tanh() + ((x - 6.0) / s2).tanh()
        });
        let spec = ReflectionSpec::between_zeros((-12.0, 12.0), 0.1);
        let r = reflect(&p, &spec, None).unwrap();
        assert!(!r.degenerate);
        let before = detect_layers(&p, LevelKind::DeltaMinus, 0.1);
        let after = detect_layers(&r.path, LevelKind::DeltaMinus, 0.1);
        assert_eq!(before.len(), 3);
        assert_eq!(after.len(), 1);
        let w = detect_wasted_excursions(&r.path, WastedKind::DeltaMinus, 0.1, (-12.0, 12.0)).unwrap();
        assert!(w.len() >= 1);
    }

    #[test]
    fn composed_reflection_flips_alternate_stretches() {
        let g = Grid::symmetric(8.0, 0.1).unwrap();
        let p = Path::constant(g, 0.5);
        // Anchor ends sit between nodes.
        let hit = |a: f64, b: f64, side: Side| StoppingSpec {
            side,
            anchor: (a, b),
            rule: StopRule::Hit { level: 0.5 },
        };
        // Constant 0.5 is hit at the start of every anchor window (left) or its end (right).
        let spec = ReflectionSpec::Composed {
            pairs: vec![
                (hit(-5.95, 8.0, Side::Left), hit(-8.0, 5.95, Side::Right)),
                (hit(-1.95, 8.0, Side::Left), hit(-8.0, 1.95, Side::Right)),
            ],
        };
        let r = reflect(&p, &spec, None).unwrap();
        assert!(!r.degenerate);
        for i in 0..g.points() {
            let x = g.x(i);
            let flipped = x.abs() > 1.95 && x.abs() < 5.95;
            let expect = if flipped { -0.5 } else { 0.5 };
            assert_eq!(r.path.values[i], expect, "x = {x}");
        }
        // Crossed inner pair: identity for that pair, flagged.
        let bad = ReflectionSpec::Composed {
            pairs: vec![
                (hit(-5.95, 8.0, Side::Left), hit(-8.0, 5.95, Side::Right)),
                (hit(3.05, 8.0, Side::Left), hit(-8.0, 1.95, Side::Right)),
            ],
        };
        let r = reflect(&p, &bad, None).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn point_between_hits_moves_the_layer_right() {
        // Layer at -4; small ripples give hits of -1 and +1 on the plateaus.
        let g = Grid::symmetric(20.0, 0.05).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let p = Path::from_fn(g, |x| ((x + 4.0) / s2).tanh() + 0.05 * x.sin());
        let (y, z, d, ell, h) = (-4.0, 6.0, 2.0, 3.0, 3.0);
        let source = (y - d - 2.0 * ell - h, y - d - 2.0 * ell);
        let target = (z + d + 2.0 * ell, z + d + 2.0 * ell + h);
        let spec = ReflectionSpec::between_hits(source, target);
        let Anchors::Hits(lo, hi) = anchors(&p, &spec).unwrap() else {
            panic!("expected hits")
        };
        assert!(lo < hi);
        let q = apply_reflection(&p, &spec).unwrap();
        let ups: Vec<_> = detect_layers(&q, LevelKind::DeltaMinus, 0.1).ups().cloned().collect();
        assert_eq!(ups.len(), 1);
        let ext = (z - d - 3.0 * ell - h, z + d + 3.0 * ell + h);
        assert!(ups[0].contained_in(ext.0, ext.1), "{:?} not in {ext:?}", ups[0]);
        assert!(ups[0].length() <= 2.0 * ell);
        assert!(ups[0].midpoint() > z - d);
    }

    #[test]
    fn missing_hits_leave_the_path_alone() {
        let p = Path::constant(Grid::symmetric(5.0, 0.1).unwrap(), 0.3);
        let spec = ReflectionSpec::between_hits((-5.0, -2.0), (2.0, 5.0));
        assert_eq!(apply_reflection(&p, &spec).unwrap(), p);
    }

    #[test]
    fn bad_parameters_are_config_errors() {
        let p = Path::constant(Grid::symmetric(5.0, 0.1).unwrap(), 0.3);
        let spec = ReflectionSpec::between_hits((-6.0, -2.0), (2.0, 5.0));
        assert!(matches!(apply_reflection(&p, &spec), Err(Error::Config { .. })));
        let rule = StopRule::Hit { level: 0.0 };
        let swapped = ReflectionSpec::BetweenStoppingPoints {
            left: StoppingSpec::right((-5.0, 5.0), rule),
            right: StoppingSpec::left((-5.0, 5.0), rule),
        };
        assert!(matches!(apply_reflection(&p, &swapped), Err(Error::Config { .. })));
        assert!(invariance_test(&ReflectionSpec::Vertical, &[], &[Statistic::MaxAbs], 0.01, None).is_err());
    }

    #[test]
    fn energy_is_kept_between_zero_crossings() {
        let pot = Potential::quartic();
        for dx in [0.04, 0.02, 0.01] {
            let g = Grid::symmetric(6.0, dx).unwrap();
            let p = Path::from_fn(g, |x| (x + 0.013).sin());
            let spec = ReflectionSpec::between_zeros((-6.0, 6.0), 0.1);
            let q = apply_reflection(&p, &spec).unwrap();
            assert_ne!(q.values, p.values);
            let de = (energy(&q, &pot).e - energy(&p, &pot).e).abs();
            assert!(de <= 2.0 * dx, "dx = {dx}: {de}");
        }
    }

    #[test]
    fn identity_transform_passes() {
        let g = Grid::symmetric(2.0, 0.1).unwrap();
        let mut rng = RandomSource::new(1, 0);
        let ens: Vec<Path> = (0..300)
            .map(|_| {
                let mut p = Path::from_fn(g, |x| x);
                p.values.iter_mut().for_each(|v| *v += 0.1 * rng.normal());
                p
            })
            .collect();
        let spec = ReflectionSpec::Composed {
            pairs: vec![(
                StoppingSpec::left((-2.0, 2.0), StopRule::Hit { level: 5.0 }),
                StoppingSpec::right((-2.0, 2.0), StopRule::Hit { level: 5.0 }),
            )],
        };
        let r = invariance_test(&spec, &ens, &Statistic::battery(0.2, 1.0), 0.01, None).unwrap();
        assert!(r.pass);
        assert!(r.p_values.iter().all(|&p| p > 0.99));
        assert_eq!(r.degenerate, 300);
        let json = serde_json::to_value(&r).unwrap();
        for k in ["transform", "statistics", "p_values", "pass"] {
            assert!(json.get(k).is_some());
        }
    }

    #[test]
    fn bridge_noise_keeps_point_reflection_variance() {
        // Reflecting a free bridge at an off-grid centre: the interpolant shrinks the
        // variance of the reflected nodes, the bridge-aware draw restores it.
        let g = Grid::symmetric(2.0, 0.4).unwrap();
        let spec = crate::gaussian_bridge::BridgeSpec::new(g, 0.0, 0.0, 1.0).unwrap();
        let mut rng = RandomSource::new(4, 0);
        // Node 0 maps to the middle of the cell [-0.8, -0.4].
        let (lo, hi) = (-1.47, 0.87);
        let i = g.index_of(0.0).unwrap();
        let mut plain = Vec::new();
        let mut noisy = Vec::new();
        let mut noise = RandomSource::new(5, 0);
        let hits = ReflectionSpec::between_hits((-2.0, 0.0), (0.0, 2.0));
        for _ in 0..20000 {
            let p = crate::gaussian_bridge::sample_bridge(&spec, &mut rng);
            let a = Anchors::Hits(lo, hi);
            plain.push(apply_with_anchors(&p, &hits, &a, None).unwrap().path.values[i]);
            noisy.push(apply_with_anchors(&p, &hits, &a, Some((&mut noise, 1.0))).unwrap().path.values[i]);
        }
        let y = lo + hi;
        let exact = (y + 2.0) * (2.0 - y) / 4.0;
        let v_plain = crate::stats::variance(&plain);
        let v_noisy = crate::stats::variance(&noisy);
        assert!(v_plain < exact - 0.01, "{v_plain} vs {exact}");
        assert!((v_noisy - exact).abs() < 0.04 * exact, "{v_noisy} vs {exact}");
    }

    proptest! {
        #[test]
        fn fixed_window_negation_commutes_with_vertical(
            coef in prop::collection::vec(-1.5f64..1.5, 1..5), a in -3.0f64..0.0, w in 0.1f64..3.0
        ) {
            let g = Grid::symmetric(3.0, 0.1).unwrap();
            let p = Path::from_fn(g, |x| coef.iter().enumerate().map(|(k, c)| c * ((k + 1) as f64 * x).sin()).sum());
            let s = ReflectionSpec::FixedWindow { a, b: (a + w).min(3.0) };
            let q = apply_reflection(&apply_reflection(&p, &s).unwrap(), &ReflectionSpec::Vertical).unwrap();
            let r = apply_reflection(&apply_reflection(&p, &ReflectionSpec::Vertical).unwrap(), &s).unwrap();
            prop_assert_eq!(q.values, r.values);
        }
    }
}
