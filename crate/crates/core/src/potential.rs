//! The double-well potential, its admissibility checks and derived constants.

use std::fmt;
use std::path::Path as FsPath;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quad::{dopri_scalar, gauss_legendre};

/// Where the potential values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Family {
    Quartic,
    Table,
    Closure,
}

#[derive(Clone)]
enum Kind {
    Quartic,
    Table(Spline),
    Closure(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// Growth parameters `(beta, C)` with `V(u) >= u^(1+beta)/C` for `u >= C`, when known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Growth {
    pub beta: f64,
    pub c: f64,
}

/// An even double-well potential `V` with wells at `±1`.
#[derive(Clone)]
pub struct Potential {
    kind: Kind,
    symmetrize: bool,
    pub growth: Option<Growth>,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("family", &self.family())
            .field("symmetrize", &self.symmetrize)
            .finish()
    }
}

impl Potential {
    /// `V(u) = (1 - u^2)^2 / 4`.
    pub fn quartic() -> Self {
        Self {
            kind: Kind::Quartic,
            symmetrize: false,
            growth: Some(Growth { beta: 3.0, c: 4.0 }),
        }
    }

    /// A user potential given as a closure. With `symmetrize` the even part is used.
    pub fn from_fn<F>(f: F, symmetrize: bool) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: Kind::Closure(Arc::new(f)),
            symmetrize,
            growth: None,
        }
    }

    /// The zero potential; the target measure then equals the Gaussian reference.
    pub fn zero() -> Self {
        Self::from_fn(|_| 0.0, false)
    }

    /// Tabulated `(u, V)` pairs interpolated by a natural cubic spline.
    pub fn from_table(u: Vec<f64>, v: Vec<f64>, symmetrize: bool) -> Result<Self> {
        Ok(Self {
            kind: Kind::Table(Spline::new(u, v)?),
            symmetrize,
            growth: None,
        })
    }

    /// Reads a CSV with columns `u,V`.
    pub fn from_csv(path: &FsPath, symmetrize: bool) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let iu = headers
            .iter()
            .position(|h| h.trim() == "u")
            .ok_or_else(|| Error::config("potential.table", "missing column `u`"))?;
        let iv = headers
            .iter()
            .position(|h| h.trim() == "V")
            .ok_or_else(|| Error::config("potential.table", "missing column `V`"))?;
        let (mut us, mut vs) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::config("potential.table", "unparsable number"))
            };
            us.push(parse(iu)?);
            vs.push(parse(iv)?);
        }
        Self::from_table(us, vs, symmetrize)
    }

    pub fn family(&self) -> Family {
        match self.kind {
            Kind::Quartic => Family::Quartic,
            Kind::Table(_) => Family::Table,
            Kind::Closure(_) => Family::Closure,
        }
    }

    pub fn is_quartic(&self) -> bool {
        matches!(self.kind, Kind::Quartic)
    }

    fn raw(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Quartic => {
                let w = 1.0 - u * u;
                0.25 * w * w
            }
            Kind::Table(s) => s.eval(u),
            Kind::Closure(f) => f(u),
        }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if self.symmetrize {
            0.5 * (self.raw(u) + self.raw(-u))
        } else {
            self.raw(u)
        }
    }

    #[inline]
    pub fn deriv(&self, u: f64) -> f64 {
        match self.kind {
            Kind::Quartic => u * (u * u - 1.0),
            _ => {
                let h = 1e-5 * (1.0 + u.abs());
                (self.eval(u + h) - self.eval(u - h)) / (2.0 * h)
            }
        }
    }

    #[inline]
    pub fn deriv2(&self, u: f64) -> f64 {
        match self.kind {
            Kind::Quartic => 3.0 * u * u - 1.0,
            _ => {
                let h = 1e-5 * (1.0 + u.abs());
                (self.eval(u + h) - 2.0 * self.eval(u) + self.eval(u - h)) / (h * h)
            }
        }
    }

    /// `sqrt(2 V(u))`, the integrand of the surface tension.
    #[inline]
    pub fn sqrt_2v(&self, u: f64) -> f64 {
        (2.0 * self.eval(u)).max(0.0).sqrt()
    }
}

/// Natural cubic spline through sorted nodes.
#[derive(Clone, Debug)]
struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 4 {
            return Err(Error::config("potential.table", "need at least 4 rows of equal length"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPotential("non-finite table entry".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("potential.table", "u column must be strictly increasing"));
        }
        let n = x.len();
        // Tridiagonal system for second derivatives, natural end conditions.
        let mut m = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            let a = h0 / 6.0;
            let b = (h0 + h1) / 3.0;
            let cc = h1 / 6.0;
            let rhs = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
            let denom = b - a * c[i - 1];
            c[i] = cc / denom;
            d[i] = (rhs - a * d[i - 1]) / denom;
        }
        for i in (1..n - 1).rev() {
            m[i] = d[i] - c[i] * m[i + 1];
        }
        Ok(Self { x, y, m })
    }

    fn eval(&self, u: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&xi| xi <= u) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - u) / h;
        let b = (u - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// One named clause of the admissibility check.
#[derive(Clone, Debug, Serialize)]
pub struct Clause {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub clauses: Vec<Clause>,
    /// Fitted exponent of `V(u) ~ u^p` on the upper half of the sample range.
    pub growth_exponent: f64,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }
}

/// Checks evenness, the zero set, the critical points, nondegenerate wells and
/// superlinear growth on a symmetric sample grid of `[-u_max, u_max]`.
pub fn check_assumptions(
    potential: &Potential,
    u_max: f64,
    n_samples: usize,
    tol: f64,
) -> Result<AssumptionReport> {
    if !(u_max >= 2.0) {
        return Err(Error::config("u_max", "must be at least 2"));
    }
    if n_samples < 100 {
        return Err(Error::config("n_samples", "must be at least 100"));
    }
    let us: Vec<f64> = (0..n_samples)
        .map(|k| -u_max + 2.0 * u_max * k as f64 / (n_samples - 1) as f64)
        .collect();
    let vs: Vec<f64> = us.iter().map(|&u| potential.eval(u)).collect();
    if let Some(k) = vs.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidPotential(format!("V({}) is not finite", us[k])));
    }
    let mut clauses = Vec::new();

    let mut worst_odd = 0.0f64;
    for &u in &us {
        let (a, b) = (potential.eval(u), potential.eval(-u));
        worst_odd = worst_odd.max((a - b).abs() / a.abs().max(1.0));
    }
    clauses.push(Clause {
        name: "evenness",
        pass: worst_odd <= tol,
        detail: format!("max |V(u)-V(-u)| = {worst_odd:.3e}"),
    });

    let vmin = vs.iter().cloned().fold(f64::INFINITY, f64::min);
    clauses.push(Clause {
        name: "nonnegativity",
        pass: vmin >= -tol,
        detail: format!("min V = {vmin:.3e}"),
    });

    let v_at_wells = potential.eval(1.0).abs().max(potential.eval(-1.0).abs());
    let spacing = 2.0 * u_max / (n_samples - 1) as f64;
    let stray_zero = us
        .iter()
        .zip(&vs)
        .filter(|(u, _)| (u.abs() - 1.0).abs() > 0.25 * spacing)
        .find(|(_, v)| **v <= tol);
    clauses.push(Clause {
        name: "zero_set",
        pass: v_at_wells <= tol && stray_zero.is_none(),
        detail: match stray_zero {
            Some((u, v)) => format!("V({u}) = {v:.3e} away from the wells"),
            None => format!("|V(±1)| = {v_at_wells:.3e}"),
        },
    });

    let bad_critical = us
        .iter()
        .filter(|&&u| u > 1e-3 && (u - 1.0).abs() > 1e-3)
        .find(|&&u| {
            let d = potential.deriv(u);
            if u < 1.0 {
                d >= 0.0
            } else {
                d <= 0.0
            }
        });
    clauses.push(Clause {
        name: "critical_points",
        pass: bad_critical.is_none(),
        detail: match bad_critical {
            Some(u) => format!("V' has the wrong sign at u = {u}"),
            None => "V' vanishes on (0, u_max] only at u = 1".into(),
        },
    });

    let v2 = potential.deriv2(1.0);
    clauses.push(Clause {
        name: "nondegenerate_wells",
        pass: v2 > 1e-6,
        detail: format!("V''(1) = {v2:.6e}"),
    });

    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (&u, &v) in us.iter().zip(&vs) {
        if u >= 0.5 * u_max && u > 1.0 && v > 0.0 {
            lx.push(u.ln());
            ly.push(v.ln());
        }
    }
    let growth_exponent = if lx.len() >= 2 {
        crate::stats::linear_fit(&lx, &ly).slope
    } else {
        f64::NAN
    };
    clauses.push(Clause {
        name: "superlinear_growth",
        pass: growth_exponent > 1.0,
        detail: format!("fitted exponent {growth_exponent:.3}"),
    });

    Ok(AssumptionReport {
        clauses,
        growth_exponent,
    })
}

/// Cumulative `Phi(u) = ∫_0^u sqrt(2V)` on a uniform table, with Hermite interpolation.
#[derive(Clone, Debug)]
pub struct PhiTable {
    u0: f64,
    h: f64,
    phi: Vec<f64>,
    slope: Vec<f64>,
}

impl PhiTable {
    fn build(potential: &Potential, range: f64, per_unit: usize) -> Self {
        let cells = (2.0 * range * per_unit as f64).round() as usize;
        let h = 2.0 * range / cells as f64;
        let u0 = -range;
        let mut phi = vec![0.0; cells + 1];
        for k in 0..cells {
            let a = u0 + k as f64 * h;
            phi[k + 1] = phi[k] + gauss_legendre(|u| potential.sqrt_2v(u), a, a + h, 1);
        }
        let mid = cells / 2;
        let shift = phi[mid];
        for p in &mut phi {
            *p -= shift;
        }
        let slope = (0..=cells)
            .map(|k| potential.sqrt_2v(u0 + k as f64 * h))
            .collect();
        Self { u0, h, phi, slope }
    }

    /// Signed `∫_0^u sqrt(2V)`.
    pub fn phi(&self, u: f64) -> f64 {
        let n = self.phi.len() - 1;
        let t = (u - self.u0) / self.h;
        if t <= 0.0 || t >= n as f64 {
            return f64::NAN;
        }
        let k = (t.floor() as usize).min(n - 1);
        let s = t - k as f64;
        let (p0, p1) = (self.phi[k], self.phi[k + 1]);
        let (m0, m1) = (self.slope[k] * self.h, self.slope[k + 1] * self.h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * p0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * p1
            + (s3 - s2) * m1
    }

    pub fn range(&self) -> (f64, f64) {
        (self.u0, self.u0 + self.h * (self.phi.len() - 1) as f64)
    }
}

/// Surface tension and related deterministic constants of a potential.
#[derive(Clone, Debug, Serialize)]
pub struct WellConstants {
    /// `∫_{-1}^{1} sqrt(2V)`.
    pub c0: f64,
    /// Twice the cheaper of the two half-excursion costs below `-1`.
    pub c1: f64,
    /// `sqrt(V''(1)/2)`.
    pub decay_rate: f64,
    #[serde(skip)]
    table: Option<Arc<PhiTable>>,
    #[serde(skip)]
    potential: Option<Potential>,
}

impl WellConstants {
    /// Signed `∫_0^u sqrt(2V)`; monotone, so `|phi(a) - phi(b)|` is the
    /// Modica-Mortola cost of moving between levels `a` and `b`.
    pub fn phi(&self, u: f64) -> f64 {
        let t = self.table.as_ref().expect("table");
        let (lo, hi) = t.range();
        if u > lo && u < hi {
            return t.phi(u);
        }
        let p = self.potential.as_ref().expect("potential");
        let (edge, base) = if u >= hi {
            (hi - t.h, t.phi(hi - t.h))
        } else {
            (lo + t.h, t.phi(lo + t.h))
        };
        let panels = ((u - edge).abs() * 64.0).ceil().max(1.0) as usize;
        base + gauss_legendre(|s| p.sqrt_2v(s), edge, u, panels)
    }

    /// `|∫_{-1}^{u} sqrt(2V)|`.
    pub fn phi_minus(&self, u: f64) -> f64 {
        (self.phi(u) - self.phi(-1.0)).abs()
    }

    /// `|∫_{u}^{1} sqrt(2V)|`.
    pub fn phi_plus(&self, u: f64) -> f64 {
        (self.phi(1.0) - self.phi(u)).abs()
    }

    /// Modica-Mortola cost between two levels.
    pub fn mm_cost(&self, a: f64, b: f64) -> f64 {
        (self.phi(a) - self.phi(b)).abs()
    }
}

const SPLIT: f64 = 1e-6;

/// `∫_a^b sqrt(2V)` where `a` or `b` may sit at a well; the last `SPLIT` before a
/// well is handled by the linear series `sqrt(2V) ≈ sqrt(V''(1)) |u ∓ 1|`.
fn well_integral(p: &Potential, a: f64, b: f64, panels: usize) -> f64 {
    let near_well = |u: f64| (u.abs() - 1.0).abs() < 1e-15;
    let (mut lo, mut hi) = (a, b);
    let mut tail = 0.0;
    let tail_piece = |edge: f64| {
        // f(edge ± SPLIT) is linear-to-first-order in the distance from the well.
        0.5 * SPLIT * p.sqrt_2v(edge)
    };
    if near_well(a) {
        lo = a + SPLIT;
        tail += tail_piece(lo);
    }
    if near_well(b) {
        hi = b - SPLIT;
        tail += tail_piece(hi);
    }
    gauss_legendre(|u| p.sqrt_2v(u), lo, hi, panels) + tail
}

fn checked_integral(p: &Potential, a: f64, b: f64, panels: usize) -> Result<f64> {
    let coarse = well_integral(p, a, b, panels);
    let fine = well_integral(p, a, b, 2 * panels);
    // Richardson cross-check of the composite rule.
    let diff = (fine - coarse).abs();
    if !fine.is_finite() || diff > 1e-9 * (1.0 + fine.abs()) {
        return Err(Error::Precision(format!(
            "quadrature on [{a}, {b}] did not converge (difference {diff:.3e})"
        )));
    }
    Ok(fine)
}

/// Computes `c0`, `c1`, the decay rate and the `phi` tables.
pub fn well_constants(potential: &Potential, quadrature_n: usize) -> Result<WellConstants> {
    let n = quadrature_n.max(4);
    let c0 = checked_integral(potential, -1.0, 1.0, n)?;
    let inner = checked_integral(potential, -1.0, -0.5, n)?;
    let outer = checked_integral(potential, -1.5, -1.0, n)?;
    let c1 = 2.0 * inner.min(outer);
    let v2 = potential.deriv2(1.0);
    if !(v2 > 0.0) {
        return Err(Error::InvalidPotential(format!("V''(1) = {v2} is not positive")));
    }
    let table = PhiTable::build(potential, 4.0, 1024);
    Ok(WellConstants {
        c0,
        c1,
        decay_rate: (0.5 * v2).sqrt(),
        table: Some(Arc::new(table)),
        potential: Some(potential.clone()),
    })
}

/// The centred increasing heteroclinic `m' = sqrt(2V(m))`, `m(0) = 0`, on a uniform grid.
#[derive(Clone, Debug, Serialize)]
pub struct OptimalProfile {
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    /// Index with `x = 0`, `m = 0`.
    pub center: usize,
    pub dx: f64,
}

impl OptimalProfile {
    /// Linear interpolation, constant beyond the ends.
    pub fn value_at(&self, x: f64) -> f64 {
        let t = (x - self.x[0]) / self.dx;
        if t <= 0.0 {
            return self.m[0];
        }
        let n = self.m.len() - 1;
        if t >= n as f64 {
            return self.m[n];
        }
        let k = t.floor() as usize;
        let s = t - k as f64;
        self.m[k] * (1.0 - s) + self.m[k + 1] * s
    }

    /// Energy `∫ ½ m'² + V(m)` by composite Simpson, with `m'` taken from the ODE.
    pub fn energy(&self, potential: &Potential) -> f64 {
        let f: Vec<f64> = self.m.iter().map(|&m| 2.0 * potential.eval(m)).collect();
        simpson(&f, self.dx)
    }

    /// Smallest `C` with `|m(x) - sign(x)| <= C exp(-rate |x|)` on the grid.
    pub fn fitted_decay_constant(&self, rate: f64) -> f64 {
        self.x
            .iter()
            .zip(&self.m)
            .map(|(&x, &m)| (m - x.signum()).abs() * (rate * x.abs()).exp())
            .fold(0.0, f64::max)
    }
}

fn simpson(f: &[f64], h: f64) -> f64 {
    let n = f.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let even = n - n % 2;
    let mut s = f[0] + f[even];
    for k in 1..even {
        s += if k % 2 == 1 { 4.0 * f[k] } else { 2.0 * f[k] };
    }
    let mut total = s * h / 3.0;
    if even < n {
        total += 0.5 * h * (f[n - 1] + f[n]);
    }
    total
}

/// Switch to exponential asymptotics once the profile is this close to a well.
const ASYMPTOTIC_GAP: f64 = 1e-8;

/// Integrates the first-order profile equation from `m(0) = 0` in both directions.
pub fn optimal_profile(potential: &Potential, half_width: f64, dx: f64) -> Result<OptimalProfile> {
    if !(dx > 0.0 && dx <= 0.1) {
        return Err(Error::config("dx", "must lie in (0, 0.1]"));
    }
    if !(half_width >= 5.0) {
        return Err(Error::config("half_width", "must be at least 5"));
    }
    let v2 = potential.deriv2(1.0);
    if !(v2 > 0.0) || !potential.eval(0.0).is_finite() {
        return Err(Error::InvalidPotential("profile needs V''(1) > 0".into()));
    }
    let kappa = v2.sqrt();
    let steps = (half_width / dx).round() as usize;
    let rhs = |m: f64| potential.sqrt_2v(m);
    let mut right = vec![0.0; steps + 1];
    let mut left = vec![0.0; steps + 1];
    for (side, out) in [(1.0f64, &mut right), (-1.0, &mut left)] {
        let target = side;
        let mut y = 0.0;
        let mut anchor: Option<(f64, f64)> = None;
        for k in 1..=steps {
            let x0 = side * (k - 1) as f64 * dx;
            let x1 = side * k as f64 * dx;
            y = match anchor {
                Some((xs, gap)) => target - side * gap * (-kappa * (x1 - xs).abs()).exp(),
                None => {
                    let stop = |m: f64| (target - m).abs() < ASYMPTOTIC_GAP;
                    let (xs, ys, stopped) = dopri_scalar(&rhs, x0, y, x1, 1e-13, &stop);
                    if stopped {
                        let gap = (target - ys).abs();
                        anchor = Some((xs, gap));
                        target - side * gap * (-kappa * (x1 - xs).abs()).exp()
                    } else {
                        ys
                    }
                }
            };
            y = y.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
            out[k] = y;
        }
    }
    let mut x = Vec::with_capacity(2 * steps + 1);
    let mut m = Vec::with_capacity(2 * steps + 1);
    for k in (1..=steps).rev() {
        x.push(-(k as f64) * dx);
        m.push(left[k]);
    }
    x.push(0.0);
    m.push(0.0);
    for k in 1..=steps {
        x.push(k as f64 * dx);
        m.push(right[k]);
    }
    Ok(OptimalProfile {
        x,
        m,
        center: steps,
        dx,
    })
}
