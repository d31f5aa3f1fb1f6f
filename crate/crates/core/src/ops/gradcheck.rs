//! Central finite-difference validation of analytic gradients.
//!
//! The engine works on a flat f64 parameter vector: callers provide the
//! loss as a function of that vector, the analytic gradient they want
//! validated, and a naming function so failures point at the offending
//! layer. Checks always run in 64-bit precision.

use crate::error::Result;

/// Perturbation used by the central difference quotient.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error bound a gradient must stay under to pass.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Entries whose analytic and numeric magnitudes both fall below this are
/// treated as matching zeros.
const ZERO_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name of the entry with the largest relative error.
    pub worst: String,
    pub failures: Vec<GradCheckFailure>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed() {
            write!(
                f,
                "gradient check passed: {} entries, max relative error {:.3e} (worst: {})",
                self.checked, self.max_rel_err, self.worst
            )
        } else {
            write!(
                f,
                "gradient check FAILED at {} of {} entries (tolerance {:.1e}); worst offender {}: \
                 analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                self.failures.len(),
                self.checked,
                self.tolerance,
                self.failures[0].name,
                self.failures[0].analytic,
                self.failures[0].numeric,
                self.failures[0].rel_err
            )
        }
    }
}

/// Checks `analytic` against central differences of `f` at the entries in
/// `indices`. `theta` is restored bit-exactly after each probe. Failures
/// are sorted worst-first.
pub fn check_fd<F>(
    mut f: F,
    theta: &mut [f64],
    analytic: &[f64],
    name_of: impl Fn(usize) -> String,
    indices: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(theta.len(), analytic.len());
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        failures: Vec::new(),
        tolerance,
    };
    for &idx in indices {
        let orig = theta[idx];
        theta[idx] = orig + step;
        let lp = f(theta)?;
        theta[idx] = orig - step;
        let lm = f(theta)?;
        theta[idx] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < ZERO_FLOOR {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = name_of(idx);
        }
        if rel >= tolerance {
            report.failures.push(GradCheckFailure {
                name: name_of(idx),
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    report
        .failures
        .sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum x_i^2, grad = 2x
        let mut theta = vec![0.5, -1.25, 2.0];
        let analytic: Vec<f64> = theta.iter().map(|&v| 2.0 * v).collect();
        let report = check_fd(
            |t| Ok(t.iter().map(|v| v * v).sum()),
            &mut theta,
            &analytic,
            |i| format!("x[{i}]"),
            &[0, 1, 2],
            FD_STEP,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(theta, vec![0.5, -1.25, 2.0]); // restored
    }

    #[test]
    fn corrupted_gradient_fails_with_name() {
        let mut theta = vec![1.0, 2.0];
        let mut analytic = vec![2.0, 4.0];
        analytic[1] = 7.0; // corrupt
        let report = check_fd(
            |t| Ok(t.iter().map(|v| v * v).sum()),
            &mut theta,
            &analytic,
            |i| format!("layer{i}.weight"),
            &[0, 1],
            FD_STEP,
            FD_TOLERANCE,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures[0].name, "layer1.weight");
        assert!(format!("{report}").contains("layer1.weight"));
    }
}
