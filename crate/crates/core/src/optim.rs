//! Quasi-Newton (BFGS) minimization on an unconstrained 3-dimensional
//! space with central-difference gradients, plus the logit/log transform
//! that maps the parameter box onto it.

use nalgebra::{Matrix3, Vector3};

/// Evaluation cap shared by every optimization in the crate.
pub const MAX_EVALUATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Options {
    pub max_evals: usize,
    /// Stop when every coordinate moves less than this ...
    pub xtol: f64,
    /// ... and the objective changes less than this.
    pub ftol: f64,
    /// Or when the gradient sup-norm drops below this.
    pub gtol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options { max_evals: MAX_EVALUATIONS, xtol: 1e-8, ftol: 1e-10, gtol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vector3<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Central-difference step on the transformed scale.
#[inline]
pub(crate) fn fd_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-5)
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&Vector3<f64>) -> f64> Counted<F> {
    fn eval(&mut self, x: &Vector3<f64>) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn gradient(&mut self, x: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let h = fd_step(x[k]);
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            g[k] = (self.eval(&xp) - self.eval(&xm)) / (2.0 * h);
        }
        g
    }
}

const MAX_STEP: f64 = 5.0;

pub(crate) fn minimize<F>(f: F, x0: Vector3<f64>, opts: Options) -> Minimum
where
    F: FnMut(&Vector3<f64>) -> f64,
{
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0;
    let mut fx = obj.eval(&x);
    let mut g = obj.gradient(&x);
    let mut h_inv = Matrix3::<f64>::identity();
    let mut fresh = true;

    loop {
        let gnorm = g.amax();
        if !gnorm.is_finite() {
            return Minimum { x, value: fx, evals: obj.evals, converged: false, grad_norm: gnorm };
        }
        if gnorm < opts.gtol {
            return Minimum { x, value: fx, evals: obj.evals, converged: true, grad_norm: gnorm };
        }
        if obj.evals >= opts.max_evals {
            return Minimum { x, value: fx, evals: obj.evals, converged: false, grad_norm: gnorm };
        }

        let mut d = -(h_inv * g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h_inv = Matrix3::identity();
            fresh = true;
            d = -g;
            slope = g.dot(&d);
        }
        let longest = d.amax();
        if longest > MAX_STEP {
            d *= MAX_STEP / longest;
            slope = g.dot(&d);
        }

        // backtracking Armijo search
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-14 {
            let xn = x + d * alpha;
            let fn_ = obj.eval(&xn);
            if fn_ <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }

        let Some((xn, fn_)) = accepted else {
            if fresh {
                // no descent along the steepest direction: numerical floor
                return Minimum { x, value: fx, evals: obj.evals, converged: gnorm < 1e-3, grad_norm: gnorm };
            }
            h_inv = Matrix3::identity();
            fresh = true;
            continue;
        };

        let s = xn - x;
        let df = fx - fn_;
        let gn = obj.gradient(&xn);
        let y = gn - g;
        x = xn;
        fx = fn_;
        g = gn;

        if s.amax() < opts.xtol && df.abs() < opts.ftol {
            return Minimum { x, value: fx, evals: obj.evals, converged: true, grad_norm: g.amax() };
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // scale the initial inverse Hessian
                h_inv = Matrix3::identity() * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = Matrix3::<f64>::identity();
            let a = i - s * y.transpose() * rho;
            h_inv = a * h_inv * a.transpose() + s * s.transpose() * rho;
            fresh = false;
        }
    }
}

#[inline]
pub(crate) fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(phi1, phi2, lambda) -> (logit phi1, logit phi2, ln lambda)`.
pub(crate) fn to_unconstrained(theta: [f64; 3]) -> Vector3<f64> {
    Vector3::new(logit(theta[0]), logit(theta[1]), theta[2].ln())
}

pub(crate) fn to_constrained(u: &Vector3<f64>) -> [f64; 3] {
    [logistic(u[0]), logistic(u[1]), u[2].exp()]
}

/// Diagonal Jacobian `d theta / d u` of [`to_constrained`].
pub(crate) fn jacobian_diag(theta: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        theta[0] * (1.0 - theta[0]),
        theta[1] * (1.0 - theta[1]),
        theta[2],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock_like() {
        let f = |x: &Vector3<f64>| {
            (1.0 - x[0]).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2) + (x[2] - 0.5).powi(2)
        };
        let m = minimize(f, Vector3::new(-1.0, 2.0, 3.0), Options::default());
        assert!(m.converged);
        assert!((m.x - Vector3::new(1.0, 1.0, 0.5)).amax() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &Vector3<f64>| 3.0 * (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) + 0.5 * x[2] * x[2] + x[0] * x[2];
        let m = minimize(f, Vector3::zeros(), Options::default());
        assert!(m.converged);
        // stationary point solves [6 0 1; 0 2 0; 1 0 1] x = [12, -2, 0]
        let sol = Matrix3::new(6.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0)
            .try_inverse()
            .unwrap()
            * Vector3::new(12.0, -2.0, 0.0);
        assert!((m.x - sol).amax() < 1e-6);
    }

    #[test]
    fn transform_roundtrip() {
        let theta = [0.37, 0.91, 8.5];
        let back = to_constrained(&to_unconstrained(theta));
        for k in 0..3 {
            assert!((back[k] - theta[k]).abs() < 1e-14);
        }
    }
}
