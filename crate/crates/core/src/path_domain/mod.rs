//! Uniform grids, discretized paths, energies and the layer/excursion detectors.

mod archive;
mod layers;
mod stopping;

pub(crate) use archive::sha256;
pub use archive::{
    decode_archive, encode_archive, export_csv, read_archive, write_archive, ArchiveHeader,
    ARCHIVE_VERSION, PATH_MAGIC,
};
pub use layers::{
    brute_force_wasted_count, detect_layers, detect_wasted_excursions, LayerEvent, LayerKind,
    LayerReport, LevelKind, WastedKind,
};
pub use stopping::{stopping_point, stopping_points, Side, StopRule, StoppingSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::Potential;

/// Uniform grid on `[x_minus, x_plus]` with `n` interior points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_minus: f64,
    pub x_plus: f64,
    pub n: usize,
    pub dx: f64,
}

impl Grid {
    pub fn new(x_minus: f64, x_plus: f64, n: usize) -> Result<Self> {
        if !(x_plus > x_minus) || !x_minus.is_finite() || !x_plus.is_finite() {
            return Err(Error::Domain(format!("empty interval [{x_minus}, {x_plus}]")));
        }
        if n < 1 {
            return Err(Error::Domain("grid needs at least one interior point".into()));
        }
        Ok(Self {
            x_minus,
            x_plus,
            n,
            dx: (x_plus - x_minus) / (n + 1) as f64,
        })
    }

    /// Grid with spacing `dx`; the interval length must be a multiple of `dx`.
    pub fn with_spacing(x_minus: f64, x_plus: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::config("dx", "must be positive"));
        }
        let cells = (x_plus - x_minus) / dx;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-9 * rounded.max(1.0) || rounded < 2.0 {
            return Err(Error::config(
                "dx",
                format!("interval length {} is not a multiple of {dx}", x_plus - x_minus),
            ));
        }
        Self::new(x_minus, x_plus, rounded as usize - 1)
    }

    /// Symmetric grid on `[-l, l]` with spacing `dx`.
    pub fn symmetric(l: f64, dx: f64) -> Result<Self> {
        Self::with_spacing(-l, l, dx)
    }

    /// Number of points including both boundary points.
    #[inline]
    pub fn points(&self) -> usize {
        self.n + 2
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        if i == self.n + 1 {
            self.x_plus
        } else {
            self.x_minus + i as f64 * self.dx
        }
    }

    pub fn length(&self) -> f64 {
        self.x_plus - self.x_minus
    }

    /// Fractional index of `x`.
    pub fn position(&self, x: f64) -> f64 {
        (x - self.x_minus) / self.dx
    }

    /// Index of `x` if it is a grid point (relative tolerance `1e-9` of `dx`).
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let t = self.position(x);
        let k = t.round();
        if (t - k).abs() <= 1e-9 && k >= 0.0 && k <= (self.n + 1) as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Nearest grid index, clamped to the grid.
    pub fn nearest_index(&self, x: f64) -> usize {
        self.position(x).round().clamp(0.0, (self.n + 1) as f64) as usize
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_minus - 1e-12 && x <= self.x_plus + 1e-12
    }
}

/// Values of a continuous path at the grid points, boundary entries included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Path {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.points() {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                grid.points(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("path has non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.points()).map(|i| f(grid.x(i))).collect();
        Self { grid, values }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.values[0], self.values[self.values.len() - 1])
    }

    pub fn x(&self, i: usize) -> f64 {
        self.grid.x(i)
    }

    /// Piecewise-linear interpolant, constant extension outside the grid.
    pub fn value_at(&self, x: f64) -> f64 {
        let t = self.grid.position(x);
        let last = self.values.len() - 1;
        if t <= 0.0 {
            return self.values[0];
        }
        if t >= last as f64 {
            return self.values[last];
        }
        let k = t.floor() as usize;
        let s = t - k as f64;
        if s == 0.0 {
            return self.values[k];
        }
        self.values[k] + s * (self.values[k + 1] - self.values[k])
    }

    /// Interpolated value at fraction `t` of cell `k`.
    #[inline]
    pub fn value_in_cell(&self, k: usize, t: f64) -> f64 {
        if t == 0.0 {
            return self.values[k];
        }
        self.values[k] + t * (self.values[k + 1] - self.values[k])
    }

    /// Trapezoid of `u` over the whole domain.
    pub fn integral(&self) -> f64 {
        let v = &self.values;
        let inner: f64 = v[1..v.len() - 1].iter().sum();
        self.grid.dx * (inner + 0.5 * (v[0] + v[v.len() - 1]))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// The vertical mirror `-u`.
    pub fn negated(&self) -> Path {
        Path {
            grid: self.grid,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// `E = I + PV` with `I` the Dirichlet part and `PV` the potential part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Energy {
    pub e: f64,
    pub i: f64,
    pub pv: f64,
}

/// Energy of the piecewise-linear interpolant, potential term by the trapezoid rule.
pub fn energy(path: &Path, potential: &Potential) -> Energy {
    let dx = path.grid.dx;
    let v = &path.values;
    let mut i = 0.0;
    let mut pv = 0.0;
    for k in 0..v.len() - 1 {
        let d = v[k + 1] - v[k];
        i += d * d;
        pv += potential.eval(v[k]) + potential.eval(v[k + 1]);
    }
    let i = 0.5 * i / dx;
    let pv = 0.5 * pv * dx;
    Energy { e: i + pv, i, pv }
}

/// Dirichlet energy of the affine interpolant, the least Gaussian energy with these data.
pub fn min_gaussian_energy(u_minus: f64, u_plus: f64, x_minus: f64, x_plus: f64) -> Result<f64> {
    let len = x_plus - x_minus;
    if !(len > 0.0) {
        return Err(Error::Domain(format!("interval [{x_minus}, {x_plus}] has no length")));
    }
    Ok(0.5 * (u_plus - u_minus).powi(2) / len)
}

/// The affine function through `(x_minus, u_minus)` and `(x_plus, u_plus)` on `grid`.
pub fn affine_interpolant(u_minus: f64, u_plus: f64, grid: &Grid) -> Path {
    let len = grid.length();
    let values = (0..grid.points())
        .map(|i| {
            let x = grid.x(i);
            ((grid.x_plus - x) * u_minus + (x - grid.x_minus) * u_plus) / len
        })
        .collect();
    Path {
        grid: *grid,
        values,
    }
}

/// Result of replacing a stretch of a path by its chord.
#[derive(Clone, Debug)]
pub struct Linearized {
    pub path: Path,
    /// Set when a hat point was not on the grid and had to be snapped.
    pub snapped: bool,
}

/// Replaces `u` on `[xh_minus, xh_plus]` by the chord between its endpoint values.
pub fn piecewise_linearize(path: &Path, xh_minus: f64, xh_plus: f64) -> Result<Linearized> {
    if !(xh_plus > xh_minus) {
        return Err(Error::Domain("need xh_minus < xh_plus".into()));
    }
    if !path.grid.contains(xh_minus) || !path.grid.contains(xh_plus) {
        return Err(Error::Domain("hat points must lie in the path domain".into()));
    }
    let (a, sa) = match path.grid.index_of(xh_minus) {
        Some(k) => (k, false),
        None => (path.grid.nearest_index(xh_minus), true),
    };
    let (b, sb) = match path.grid.index_of(xh_plus) {
        Some(k) => (k, false),
        None => (path.grid.nearest_index(xh_plus), true),
    };
    let mut out = path.clone();
    if b > a + 1 {
        let (ua, ub) = (path.values[a], path.values[b]);
        let span = (b - a) as f64;
        for k in a + 1..b {
            let s = (k - a) as f64 / span;
            out.values[k] = ua + s * (ub - ua);
        }
    }
    Ok(Linearized {
        path: out,
        snapped: sa || sb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spacing_is_consistent() {
        let g = Grid::symmetric(5.0, 0.05).unwrap();
        assert_eq!(g.points(), 201);
        assert!((g.dx * (g.n + 1) as f64 - g.length()).abs() < 1e-12);
        assert_eq!(g.x(g.n + 1), 5.0);
        assert_eq!(g.index_of(0.0), Some(100));
        assert!(Grid::with_spacing(0.0, 1.0, 0.3).is_err());
        assert!(Grid::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn affine_energy_is_one_tenth() {
        let g = Grid::symmetric(10.0, 0.05).unwrap();
        let p = affine_interpolant(-1.0, 1.0, &g);
        let e = energy(&p, &Potential::zero());
        assert!((e.i - 0.1).abs() < 1e-12);
        assert_eq!(p.value_at(0.0), 0.0);
    }

    #[test]
    fn constant_one_has_zero_energy() {
        let g = Grid::symmetric(3.0, 0.1).unwrap();
        let e = energy(&Path::constant(g, 1.0), &Potential::quartic());
        assert_eq!(e.e, 0.0);
    }

    #[test]
    fn gaussian_energy_examples() {
        assert!((min_gaussian_energy(-1.0, 1.0, -10.0, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(min_gaussian_energy(0.3, 0.3, 1.0, 4.0).unwrap(), 0.0);
        assert!((min_gaussian_energy(0.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(min_gaussian_energy(0.0, 1.0, 2.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn affine_interpolant_value() {
        let g = Grid::new(0.0, 1.0, 3).unwrap();
        let h = affine_interpolant(0.0, 2.0, &g);
        assert!((h.value_at(0.25) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linearize_whole_interval_is_affine() {
        let g = Grid::symmetric(2.0, 0.1).unwrap();
        let p = Path::from_fn(g, |x| (3.0 * x).sin() + 0.2 * x);
        let lin = piecewise_linearize(&p, -2.0, 2.0).unwrap();
        let (a, b) = p.boundary();
        let h = affine_interpolant(a, b, &g);
        assert!(!lin.snapped);
        for (x, y) in lin.path.values.iter().zip(&h.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linearize_keeps_outside_and_flags_snapping() {
        let g = Grid::symmetric(2.0, 0.1).unwrap();
        let p = Path::from_fn(g, |x| x * x);
        let lin = piecewise_linearize(&p, -0.5, 0.53).unwrap();
        assert!(lin.snapped);
        let a = g.index_of(-0.5).unwrap();
        for k in 0..=a {
            assert_eq!(lin.path.values[k], p.values[k]);
        }
    }

    #[test]
    fn profile_energy_matches_c0_via_piecewise_linear_route() {
        let pot = Potential::quartic();
        let prof = crate::potential::optimal_profile(&pot, 10.0, 0.01).unwrap();
        let g = Grid::symmetric(10.0, 0.01).unwrap();
        let p = Path::new(g, prof.m.clone()).unwrap();
        let e = energy(&p, &pot);
        assert!((e.e - 2.0 * 2f64.sqrt() / 3.0).abs() < 1e-5, "E = {}", e.e);
    }
}
