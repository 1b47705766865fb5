//! Piecewise-linear chord interpolation of one-dimensional convex quadratics,
//! so that quadratic objectives can be handed to the LP kernel.

use super::lp::LinearProgram;
use super::KernelError;

pub const DEFAULT_SEGMENTS: usize = 32;

/// Chord interpolant of `a·x² + b·x` on `[breakpoints[0], breakpoints[last]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlSegment {
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Value of the quadratic at the first breakpoint.
    pub base_value: f64,
    /// Upper bound on `|pwl(x) - q(x)|` over the interval.
    pub max_error: f64,
}

fn quad(a: f64, b: f64, x: f64) -> f64 {
    a * x * x + b * x
}

/// Uniform chord interpolation with `segments` pieces on `[lo, hi]`.
pub fn pwl_convexify(a: f64, b: f64, lo: f64, hi: f64, segments: usize) -> Result<PwlSegment, KernelError> {
    if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(KernelError::MalformedModel(format!("quadratic coefficient must be > 0, got {a}")));
    }
    if !lo.is_finite() || !hi.is_finite() || hi - lo < 1e-12 {
        return Err(KernelError::DegenerateInterval { lo, hi });
    }
    if segments < 2 {
        return Err(KernelError::MalformedModel("at least two segments are required".into()));
    }
    let width = (hi - lo) / segments as f64;
    let breakpoints: Vec<f64> = (0..=segments).map(|k| if k == segments { hi } else { lo + width * k as f64 }).collect();
    let slopes = breakpoints.windows(2).map(|w| (quad(a, b, w[1]) - quad(a, b, w[0])) / (w[1] - w[0])).collect();
    Ok(PwlSegment {
        breakpoints,
        slopes,
        base_value: quad(a, b, lo),
        max_error: a * width * width / 4.0,
    })
}

/// Like [`pwl_convexify`] for `a·(x - anchor)²`, but with `anchor` inserted
/// into the uniform grid so the interpolant is exact at its minimum. The
/// extra breakpoint only splits a segment, so the error bound is unchanged.
pub fn pwl_anchored(a: f64, lo: f64, hi: f64, anchor: f64, segments: usize) -> Result<PwlSegment, KernelError> {
    if !(a > 0.0) || !a.is_finite() || !anchor.is_finite() {
        return Err(KernelError::MalformedModel(format!("quadratic coefficient must be > 0, got {a}")));
    }
    if !lo.is_finite() || !hi.is_finite() || hi - lo < 1e-12 {
        return Err(KernelError::DegenerateInterval { lo, hi });
    }
    if segments < 2 {
        return Err(KernelError::MalformedModel("at least two segments are required".into()));
    }
    let anchor = anchor.clamp(lo, hi);
    let width = (hi - lo) / segments as f64;
    let mut breakpoints: Vec<f64> = (0..=segments).map(|k| if k == segments { hi } else { lo + width * k as f64 }).collect();
    // snap to an existing breakpoint when the split would be a sliver
    let nearest = breakpoints
        .iter()
        .enumerate()
        .min_by(|x, y| (x.1 - anchor).abs().total_cmp(&(y.1 - anchor).abs()))
        .map(|(k, _)| k)
        .unwrap();
    if (breakpoints[nearest] - anchor).abs() <= 1e-9 * width {
        breakpoints[nearest] = anchor;
    } else {
        let at = breakpoints.partition_point(|&b| b < anchor);
        breakpoints.insert(at, anchor);
    }
    let f = |x: f64| a * (x - anchor) * (x - anchor);
    let slopes = breakpoints.windows(2).map(|w| (f(w[1]) - f(w[0])) / (w[1] - w[0])).collect();
    Ok(PwlSegment {
        base_value: f(lo),
        breakpoints,
        slopes,
        max_error: a * width * width / 4.0,
    })
}

impl PwlSegment {
    pub fn lo(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn hi(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = self.base_value;
        for (w, s) in self.breakpoints.windows(2).zip(&self.slopes) {
            if x <= w[0] {
                break;
            }
            acc += s * (x.min(w[1]) - w[0]);
        }
        acc
    }

    /// Adds one bounded variable per segment, costed at `weight * slope`.
    /// The represented value is `lo + Σ segment vars`; convexity makes the
    /// LP fill segments in order, so no ordering constraints are needed.
    pub fn add_to_lp(&self, lp: &mut LinearProgram, weight: f64) -> PwlVar {
        let first = lp.num_vars;
        for (w, s) in self.breakpoints.windows(2).zip(&self.slopes) {
            lp.add_var(0.0, w[1] - w[0], weight * s);
        }
        PwlVar {
            first,
            count: self.slopes.len(),
            lo: self.lo(),
            constant: weight * self.base_value,
        }
    }
}

/// Handle on the segment variables of a PWL term inside an LP.
#[derive(Debug, Clone, Copy)]
pub struct PwlVar {
    pub first: usize,
    pub count: usize,
    pub lo: f64,
    /// Objective constant not represented in the LP.
    pub constant: f64,
}

impl PwlVar {
    /// Coefficients of `scale * (x - lo)` in terms of the segment variables.
    pub fn terms(&self, scale: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.first..self.first + self.count).map(move |j| (j, scale))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.lo + x[self.first..self.first + self.count].iter().sum::<f64>()
    }
}
