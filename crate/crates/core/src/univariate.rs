//! One-dimensional root finding and minimization.

use crate::error::{PplsError, Result};

const MAX_EXPANSIONS: usize = 200;

/// Coefficients of `c3 b³ + c2 b² + c1 b + c0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicCoeffs {
    pub c3: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CubicCoeffs {
    pub fn eval(&self, x: f64) -> f64 {
        ((self.c3 * x + self.c2) * x + self.c1) * x + self.c0
    }

    pub fn deriv(&self, x: f64) -> f64 {
        (3.0 * self.c3 * x + 2.0 * self.c2) * x + self.c1
    }

    /// Sum of absolute monomials at `x`, the scale for residual tests.
    pub fn scale(&self, x: f64) -> f64 {
        let x = x.abs();
        ((self.c3.abs() * x + self.c2.abs()) * x + self.c1.abs()) * x + self.c0.abs()
    }

    /// Number of sign changes in `(c3, c2, c1, c0)`, zeros skipped.
    pub fn sign_changes(&self) -> usize {
        let signs: Vec<f64> = [self.c3, self.c2, self.c1, self.c0]
            .into_iter()
            .filter(|c| *c != 0.0)
            .collect();
        signs.windows(2).filter(|w| w[0].signum() != w[1].signum()).count()
    }
}

/// The unique positive root of a cubic whose coefficients have exactly one
/// sign change. The bracket `[0, hi]` is grown geometrically from `hi = 1`,
/// then refined by Newton steps safeguarded with bisection.
pub fn cubic_positive_root(c: &CubicCoeffs) -> Result<f64> {
    if c.sign_changes() != 1 || c.c0 == 0.0 {
        return Err(PplsError::Numerical(format!(
            "cubic {c:?} does not have exactly one sign change"
        )));
    }
    // Normalize so the polynomial is negative at 0 and positive at infinity.
    let c = if c.c0 > 0.0 {
        CubicCoeffs {
            c3: -c.c3,
            c2: -c.c2,
            c1: -c.c1,
            c0: -c.c0,
        }
    } else {
        *c
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut expansions = 0;
    while c.eval(hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > MAX_EXPANSIONS || !hi.is_finite() {
            return Err(PplsError::RootBracketing { expansions });
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = c.eval(x);
        if fx.abs() <= 1e-12 * c.scale(x) {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dfx = c.deriv(x);
        let newton = x - fx / dfx;
        x = if dfx != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi {
            return Ok(x);
        }
    }
    Ok(x)
}

/// Result of a Brent minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrentMin {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

/// Brent's method (golden section with parabolic steps) for a local minimum
/// of `f` on `[a, b]`, with relative tolerance `rel_tol`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    max_iter: usize,
) -> BrentMin {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + GOLDEN * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let abs_tol = 1e-300;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let xm = 0.5 * (a + b);
        let tol1 = rel_tol * x.abs() + abs_tol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    BrentMin { x, fx, iterations }
}
