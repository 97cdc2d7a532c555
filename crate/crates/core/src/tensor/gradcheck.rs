//! Central-difference gradient checking in double precision.

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        if other.max_rel_error > self.max_rel_error {
            GradCheck {
                checked: self.checked + other.checked,
                ..other
            }
        } else {
            GradCheck {
                checked: self.checked + other.checked,
                ..self
            }
        }
    }
}

/// Relative error of one component: `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` is a thousandth of the largest analytic magnitude, so components
/// that are negligible against the gradient as a whole are judged on the
/// gradient's scale instead of their own.
fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every component of `analytic` against `(f(x+e) - f(x-e)) / 2e`.
pub fn grad_check(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(x, analytic, eps, &all, f)
}

/// Denominator floor for gradients whose largest magnitude is `scale`.
pub fn scale_floor(scale: f64) -> f64 {
    (1e-3 * scale).max(1e-10)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_at(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
    f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    grad_check_scaled(x, analytic, eps, indices, scale_floor(scale), f)
}

/// [`grad_check_at`] with the floor supplied by the caller, for tensors that
/// belong to a larger gradient.
pub fn grad_check_scaled(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric, floor);
        if err > out.max_rel_error || out.checked == 0 {
            out.max_rel_error = err;
            out.worst_index = i;
        }
        out.checked += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = [0.3, -1.2, 4.0];
        let r = grad_check(&x, &[3.0, 3.0, 3.0], 1e-4, |v| v.iter().map(|a| 3.0 * a).sum());
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let r = grad_check(&x, &[2.0, 5.0], 1e-4, |v| v[0] * v[0] + v[1] * v[1]);
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn quadratic_matches() {
        let x = [1.0, -2.0, 0.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(&x, &g, 1e-4, |v| v.iter().map(|a| a * a).sum());
        assert!(r.max_rel_error < 1e-8);
    }
}
