//! Exact sampling of the Brownian-bridge reference measure and its Cameron-Martin shifts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_domain::{Grid, Path};
use crate::rng::RandomSource;

/// Brownian bridge on `grid` pinned at `u_minus`, `u_plus`, with variance `epsilon` per unit length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub grid: Grid,
    pub u_minus: f64,
    pub u_plus: f64,
    pub epsilon: f64,
}

impl BridgeSpec {
    /// `epsilon = 0` is accepted and gives the affine interpolant.
    pub fn new(grid: Grid, u_minus: f64, u_plus: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be finite and non-negative"));
        }
        if !u_minus.is_finite() || !u_plus.is_finite() {
            return Err(Error::config("boundary", "boundary values must be finite"));
        }
        Ok(Self {
            grid,
            u_minus,
            u_plus,
            epsilon,
        })
    }
}

/// Fills `values[1..last]` with a bridge between the fixed `values[0]` and `values[last]`.
///
/// Sequential conditioning: with `r` cells left to the right end, the next value is
/// normal with mean `a + (b - a)/r` and variance `ε·dx·(r - 1)/r`.
pub fn fill_bridge(values: &mut [f64], dx: f64, epsilon: f64, rng: &mut RandomSource) {
    let last = values.len() - 1;
    if last < 2 {
        return;
    }
    let b = values[last];
    let scale = epsilon * dx;
    for i in 0..last - 1 {
        let r = (last - i) as f64;
        let a = values[i];
        let mean = a + (b - a) / r;
        let var = scale * (r - 1.0) / r;
        values[i + 1] = if var > 0.0 {
            mean + var.sqrt() * rng.normal()
        } else {
            mean
        };
    }
}

pub fn sample_bridge(spec: &BridgeSpec, rng: &mut RandomSource) -> Path {
    let g = spec.grid;
    let mut values = vec![0.0; g.points()];
    values[0] = spec.u_minus;
    values[g.n + 1] = spec.u_plus;
    fill_bridge(&mut values, g.dx, spec.epsilon, rng);
    Path { grid: g, values }
}

/// Covariance of the centred bridge at `x1`, `x2`.
pub fn bridge_covariance(spec: &BridgeSpec, x1: f64, x2: f64) -> Result<f64> {
    let g = spec.grid;
    for x in [x1, x2] {
        if !(x >= g.x_minus && x <= g.x_plus) {
            return Err(Error::Domain(format!(
                "{x} lies outside [{}, {}]",
                g.x_minus, g.x_plus
            )));
        }
    }
    let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
    Ok(spec.epsilon * (lo - g.x_minus) * (g.x_plus - hi) / g.length())
}

/// Resamples the interior of `[xh_minus, xh_plus]` from the bridge pinned at the current values.
pub fn resample_subinterval(
    path: &Path,
    xh_minus: f64,
    xh_plus: f64,
    epsilon: f64,
    rng: &mut RandomSource,
) -> Result<Path> {
    let g = &path.grid;
    let a = g
        .index_of(xh_minus)
        .ok_or_else(|| Error::Domain(format!("{xh_minus} is not a grid point")))?;
    let b = g
        .index_of(xh_plus)
        .ok_or_else(|| Error::Domain(format!("{xh_plus} is not a grid point")))?;
    if b <= a {
        return Err(Error::Domain("need xh_minus < xh_plus".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::config("epsilon", "must be non-negative"));
    }
    let mut out = path.clone();
    fill_bridge(&mut out.values[a..=b], g.dx, epsilon, rng);
    Ok(out)
}

/// Log Radon-Nikodym derivative of the bridge shifted by `f` with respect to the bridge, at `u`.
///
/// `f` must vanish at both ends. On the grid the identity is exact: the left-point
/// stochastic integral of the piecewise-linear `f` is `Σ f'_i (u_{i+1} - u_i)`.
pub fn cameron_martin_logdensity(f: &Path, u: &Path, epsilon: f64) -> Result<f64> {
    if f.grid != u.grid {
        return Err(Error::Domain("shift and path live on different grids".into()));
    }
    let last = f.len() - 1;
    if f.values[0] != 0.0 || f.values[last] != 0.0 {
        return Err(Error::Domain("shift must vanish at both endpoints".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let dx = f.grid.dx;
    let mut i_f = 0.0;
    let mut stoch = 0.0;
    for k in 0..last {
        let df = f.values[k + 1] - f.values[k];
        i_f += df * df;
        stoch += df / dx * (u.values[k + 1] - u.values[k]);
    }
    let i_f = 0.5 * i_f / dx;
    Ok((stoch - i_f) / epsilon)
}

/// Entrywise comparison of an empirical bridge covariance with the exact kernel.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceCheck {
    pub samples: usize,
    /// Largest `|empirical - exact| / se` over all interior entries.
    pub max_z: f64,
    pub max_abs_error: f64,
}

pub fn covariance_check(spec: &BridgeSpec, samples: usize, rng: &mut RandomSource) -> CovarianceCheck {
    let g = spec.grid;
    let h = crate::path_domain::affine_interpolant(spec.u_minus, spec.u_plus, &g);
    let m = g.n;
    let mut draws = Vec::with_capacity(samples * m);
    for _ in 0..samples {
        let p = sample_bridge(spec, rng);
        draws.extend((1..=m).map(|i| p.values[i] - h.values[i]));
    }
    let nf = samples as f64;
    let mut max_z = 0.0f64;
    let mut max_abs = 0.0f64;
    for i in 0..m {
        for j in i..m {
            let (mut s, mut s2) = (0.0, 0.0);
            for k in 0..samples {
                let prod = draws[k * m + i] * draws[k * m + j];
                s += prod;
                s2 += prod * prod;
            }
            // The mean is known exactly, so the product average is unbiased.
            let emp = s / nf;
            let var = (s2 / nf - emp * emp).max(0.0);
            let se = (var / nf).sqrt();
            let exact = bridge_covariance(spec, g.x(i + 1), g.x(j + 1)).expect("grid point");
            max_abs = max_abs.max((emp - exact).abs());
            if se > 0.0 {
                max_z = max_z.max((emp - exact).abs() / se);
            }
        }
    }
    CovarianceCheck {
        samples,
        max_z,
        max_abs_error: max_abs,
    }
}
