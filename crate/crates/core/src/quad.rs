//! Small quadrature and ODE helpers used by the deterministic constants.

const GL8_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_W: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Composite 8-point Gauss-Legendre rule with `panels` equal panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let mut s = 0.0;
        for k in 0..4 {
            s += GL8_W[k] * (f(mid - half * GL8_X[k]) + f(mid + half * GL8_X[k]));
        }
        total += s * half;
    }
    total
}

/// Dormand-Prince 5(4) for a scalar autonomous ODE y' = f(y), advancing from x0 to x1.
///
/// `stop` is checked after every accepted step; when it fires the integration halts and
/// the current (x, y) is returned so the caller can switch to an asymptotic formula.
pub fn dopri_scalar<F, S>(f: &F, x0: f64, y0: f64, x1: f64, tol: f64, stop: &S) -> (f64, f64, bool)
where
    F: Fn(f64) -> f64,
    S: Fn(f64) -> bool,
{
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;

    let dir = (x1 - x0).signum();
    let span = (x1 - x0).abs();
    let mut y = y0;
    let mut h = span.min(0.05);
    let mut done = 0.0;
    let mut guard = 0usize;
    while done < span {
        guard += 1;
        if guard > 1_000_000 {
            break;
        }
        if done + h > span {
            h = span - done;
        }
        let s = dir * h;
        let k1 = f(y);
        let k2 = f(y + s * A21 * k1);
        let k3 = f(y + s * (A31 * k1 + A32 * k2));
        let k4 = f(y + s * (A41 * k1 + A42 * k2 + A43 * k3));
        let k5 = f(y + s * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
        let k6 = f(y + s * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
        let y5 = y + s * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
        let k7 = f(y5);
        let err = (s * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)).abs();
        let scale = tol * (1.0 + y.abs());
        if err <= scale || h < 1e-14 {
            done += h;
            let x = x0 + dir * done;
            y = y5;
            if stop(y) {
                return (x, y, true);
            }
        }
        let fac = if err == 0.0 { 5.0 } else { 0.9 * (scale / err).powf(0.2) };
        h *= fac.clamp(0.2, 5.0);
    }
    (x1, y, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_degree_15() {
        let q = gauss_legendre(|x| x.powi(15) + 3.0 * x.powi(8), -1.0, 2.0, 1);
        let exact = (2f64.powi(16) - 1.0) / 16.0 + 3.0 * (2f64.powi(9) + 1.0) / 9.0;
        assert!((q - exact).abs() < 1e-10 * exact.abs());
    }

    #[test]
    fn dopri_exponential() {
        let (x, y, stopped) = dopri_scalar(&|y: f64| -y, 0.0, 1.0, 2.0, 1e-12, &|_| false);
        assert!(!stopped);
        assert_eq!(x, 2.0);
        assert!((y - (-2f64).exp()).abs() < 1e-10);
    }
}
