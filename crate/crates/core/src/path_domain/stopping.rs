use serde::{Deserialize, Serialize};

use super::layers::{detect_layers, LevelKind};
use super::{Grid, Path};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Infimum scanning rightwards; sentinel `x_plus`.
    Left,
    /// Supremum scanning leftwards; sentinel `x_minus`.
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// First hit of `target` after `|u| = trigger` has been seen, starting at the anchor.
    TwoStage { trigger: f64, target: f64 },
    /// First hit of `level` inside the anchor interval.
    Hit { level: f64 },
    /// First hit of `target` after `count` δ⁻ layers have been completed.
    AfterLayers { count: usize, delta: f64, target: f64 },
}

/// A one-sided stopping point: measurable from the path on one side of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingSpec {
    pub side: Side,
    /// Search interval `[a, b]`. Left specs start at `a`, right specs at `b`.
    pub anchor: (f64, f64),
    pub rule: StopRule,
}

impl StoppingSpec {
    pub fn left(anchor: (f64, f64), rule: StopRule) -> Self {
        Self {
            side: Side::Left,
            anchor,
            rule,
        }
    }

    pub fn right(anchor: (f64, f64), rule: StopRule) -> Self {
        Self {
            side: Side::Right,
            anchor,
            rule,
        }
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        let (a, b) = self.anchor;
        if !(a <= b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::config("stopping.anchor", "need a finite interval a <= b"));
        }
        if !grid.contains(a) || !grid.contains(b) {
            return Err(Error::config("stopping.anchor", "anchor interval leaves the domain"));
        }
        match self.rule {
            StopRule::TwoStage { trigger, target } => {
                if !(trigger > 0.0) || !target.is_finite() || trigger <= target.abs() {
                    return Err(Error::config(
                        "stopping.trigger",
                        "trigger level must be positive and above |target|",
                    ));
                }
            }
            StopRule::Hit { level } => {
                if !level.is_finite() {
                    return Err(Error::config("stopping.level", "must be finite"));
                }
            }
            StopRule::AfterLayers { count, delta, .. } => {
                if count == 0 || !(delta > 0.0 && delta < 0.5) {
                    return Err(Error::config(
                        "stopping.layers",
                        "need count >= 1 and delta in (0, 1/2)",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The interpolated path on `[a, b]` as `(x, u)` samples, oriented in scan direction.
fn scan(path: &Path, a: f64, b: f64, side: Side) -> Vec<(f64, f64)> {
    let g = &path.grid;
    let mut pts = vec![(a, path.value_at(a))];
    for i in 0..g.points() {
        let x = g.x(i);
        if x > a && x < b {
            pts.push((x, path.values[i]));
        }
    }
    if b > a {
        pts.push((b, path.value_at(b)));
    }
    if side == Side::Right {
        pts.reverse();
    }
    pts
}

/// First position along `pts` where `u = level`, strictly beyond `from_x` in scan
/// order when given, located by linear interpolation.
fn first_hit(pts: &[(f64, f64)], level: f64, from_x: Option<f64>) -> Option<f64> {
    let after = |x: f64, x0: f64, forward: bool| if forward { x > x0 } else { x < x0 };
    let forward = pts.len() < 2 || pts[1].0 >= pts[0].0;
    for w in 0..pts.len() {
        let (x, u) = pts[w];
        if u == level && from_x.is_none_or(|x0| after(x, x0, forward)) {
            return Some(x);
        }
        if w + 1 < pts.len() {
            let (x1, u1) = pts[w + 1];
            if (u - level) * (u1 - level) < 0.0 {
                let xc = x + (level - u) / (u1 - u) * (x1 - x);
                if from_x.is_none_or(|x0| after(xc, x0, forward)) {
                    return Some(xc);
                }
            }
        }
    }
    None
}

/// First position where `|u| = trigger`, excluding the starting point itself.
fn first_trigger(pts: &[(f64, f64)], trigger: f64) -> Option<f64> {
    let start = pts.first()?.0;
    let a = first_hit(pts, trigger, Some(start));
    let b = first_hit(pts, -trigger, Some(start));
    let forward = pts.len() < 2 || pts[1].0 >= pts[0].0;
    match (a, b) {
        (Some(x), Some(y)) => Some(if forward { x.min(y) } else { x.max(y) }),
        (x, y) => x.or(y),
    }
}

/// Evaluates one stopping point; returns the sentinel (`x_plus` for left, `x_minus`
/// for right) when the defining set is empty.
pub fn stopping_point(path: &Path, spec: &StoppingSpec) -> Result<f64> {
    spec.validate(&path.grid)?;
    let g = &path.grid;
    let sentinel = match spec.side {
        Side::Left => g.x_plus,
        Side::Right => g.x_minus,
    };
    let (a, b) = spec.anchor;
    let pts = scan(path, a, b, spec.side);
    let found = match spec.rule {
        StopRule::Hit { level } => first_hit(&pts, level, None),
        StopRule::TwoStage { trigger, target } => {
            first_trigger(&pts, trigger).and_then(|xt| first_hit(&pts, target, Some(xt)))
        }
        StopRule::AfterLayers {
            count,
            delta,
            target,
        } => {
            // Layers are counted on the stretch between the anchor and the scan front.
            let sub = restrict(path, a, b);
            let report = detect_layers(&sub, LevelKind::DeltaMinus, delta);
            let mut ends: Vec<f64> = report.events.iter().map(|e| e.x_end).collect();
            if spec.side == Side::Right {
                let starts: Vec<f64> = report.events.iter().map(|e| e.x_start).collect();
                ends = starts.into_iter().rev().collect();
            }
            ends.get(count - 1)
                .copied()
                .and_then(|xe| first_hit(&pts, target, Some(xe)))
        }
    };
    Ok(found.unwrap_or(sentinel))
}

/// The path on `[a, b]` resampled onto grid points of `path` inside it, endpoints interpolated.
fn restrict(path: &Path, a: f64, b: f64) -> Path {
    let g = &path.grid;
    let i0 = g.position(a).ceil().max(0.0) as usize;
    let i1 = (g.position(b).floor() as usize).min(g.n + 1);
    if i1 <= i0 + 1 {
        let grid = Grid::new(a, b.max(a + g.dx), 1).expect("grid");
        return Path::from_fn(grid, |x| path.value_at(x));
    }
    let grid = Grid::new(g.x(i0), g.x(i1), i1 - i0 - 1).expect("grid");
    Path {
        grid,
        values: path.values[i0..=i1].to_vec(),
    }
}

pub fn stopping_points(path: &Path, specs: &[StoppingSpec]) -> Result<Vec<f64>> {
    specs.iter().map(|s| stopping_point(path, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{optimal_profile, Potential};
    use proptest::prelude::*;

    fn profile_path() -> Path {
        let prof = optimal_profile(&Potential::quartic(), 10.0, 0.01).unwrap();
        Path::new(Grid::symmetric(10.0, 0.01).unwrap(), prof.m).unwrap()
    }

    #[test]
    fn profile_left_stopping_point_is_origin() {
        let p = profile_path();
        let spec = StoppingSpec::left(
            (-10.0, 10.0),
            StopRule::TwoStage {
                trigger: 0.9,
                target: 0.0,
            },
        );
        let chi = stopping_point(&p, &spec).unwrap();
        assert!(chi.abs() < 0.01, "chi = {chi}");
        let spec_r = StoppingSpec::right(
            (-10.0, 10.0),
            StopRule::TwoStage {
                trigger: 0.9,
                target: 0.0,
            },
        );
        assert!(stopping_point(&p, &spec_r).unwrap().abs() < 0.01);
    }

    #[test]
    fn trigger_never_fires_gives_sentinel() {
        let g = Grid::symmetric(4.0, 0.1).unwrap();
        let p = Path::constant(g, 0.5);
        let spec = StoppingSpec::left(
            (-4.0, 4.0),
            StopRule::TwoStage {
                trigger: 0.9,
                target: 0.0,
            },
        );
        assert_eq!(stopping_point(&p, &spec).unwrap(), 4.0);
        let spec_r = StoppingSpec { side: Side::Right, ..spec };
        assert_eq!(stopping_point(&p, &spec_r).unwrap(), -4.0);
    }

    #[test]
    fn plain_hit_of_constant_path() {
        let g = Grid::symmetric(4.0, 0.1).unwrap();
        let p = Path::constant(g, -1.0);
        let rule = StopRule::Hit { level: -1.0 };
        assert_eq!(stopping_point(&p, &StoppingSpec::left((-1.5, 2.0), rule)).unwrap(), -1.5);
        assert_eq!(stopping_point(&p, &StoppingSpec::right((-1.5, 2.0), rule)).unwrap(), 2.0);
    }

    #[test]
    fn malformed_specs_are_config_errors() {
        let g = Grid::symmetric(4.0, 0.1).unwrap();
        let p = Path::constant(g, 0.0);
        let bad = [
            StoppingSpec::left((1.0, -1.0), StopRule::Hit { level: 0.0 }),
            StoppingSpec::left((-1.0, 1.0), StopRule::TwoStage { trigger: -0.5, target: 0.0 }),
            StoppingSpec::left((-9.0, 1.0), StopRule::Hit { level: 0.0 }),
            StoppingSpec::left((-1.0, 1.0), StopRule::AfterLayers { count: 0, delta: 0.2, target: 0.0 }),
        ];
        for s in bad {
            assert!(matches!(stopping_point(&p, &s), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn after_layers_waits_for_the_count() {
        // Up, down, up: zeros at -20, 0 and 20.
        let g = Grid::symmetric(30.0, 0.05).unwrap();
        let p = Path::from_fn(g, |x| -1.2 * (std::f64::consts::PI * x / 20.0).sin().signum() * (std::f64::consts::PI * x / 20.0).sin().abs().sqrt());
        let spec = |count| {
            StoppingSpec::left(
                (-30.0, 30.0),
                StopRule::AfterLayers { count, delta: 0.2, target: 0.0 },
            )
        };
        let first = stopping_point(&p, &spec(1)).unwrap();
        let second = stopping_point(&p, &spec(2)).unwrap();
        assert!(first < second, "{first} {second}");
        assert_eq!(stopping_point(&p, &spec(9)).unwrap(), 30.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn left_points_ignore_the_path_beyond_them(coef in prop::collection::vec(-2.0f64..2.0, 1..6), junk in -3.0f64..3.0) {
            let g = Grid::symmetric(5.0, 0.05).unwrap();
            let p = Path::from_fn(g, |x| {
                let s = (x + 5.0) / 10.0;
                let mut v = -1.0 + 2.0 * s;
                for (k, c) in coef.iter().enumerate() {
                    v += c * ((k + 1) as f64 * std::f64::consts::PI * s).sin();
                }
                v
            });
            let spec = StoppingSpec::left((-5.0, 5.0), StopRule::TwoStage { trigger: 0.8, target: 0.0 });
            let chi = stopping_point(&p, &spec).unwrap();
            prop_assume!(chi < 5.0);
            // Overwrite everything from the next grid cell on.
            let cut = g.position(chi).floor() as usize + 1;
            let mut q = p.clone();
            for v in q.values.iter_mut().skip(cut + 1) {
                *v = junk;
            }
            prop_assert_eq!(stopping_point(&q, &spec).unwrap(), chi);
        }
    }
}
