//! Bracketed bisection for monotone scalar equations.

/// Stopping rule for [`bisect`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Absolute width of the final bracket.
    pub abs: f64,
    pub max_iter: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-12,
            max_iter: 200,
        }
    }
}

/// Final bracket of a bisection run. The root lies in `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn sign_change(a: f64, b: f64) -> bool {
    (a <= 0.0 && b >= 0.0) || (a >= 0.0 && b <= 0.0)
}

/// Shrinks `[lo, hi]` around a sign change of `f`.
///
/// Returns `None` when the endpoints do not bracket a root or a residual is
/// NaN. An exact zero at an endpoint collapses the bracket to that point.
pub fn bisect<F>(f: F, lo: f64, hi: f64, tol: Tolerance) -> Option<Bracket>
where
    F: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo.is_nan() || f_hi.is_nan() || !sign_change(f_lo, f_hi) {
        return None;
    }
    if f_lo == 0.0 {
        return Some(Bracket { lo, hi: lo });
    }
    if f_hi == 0.0 {
        return Some(Bracket { lo: hi, hi });
    }

    for _ in 0..tol.max_iter {
        if hi - lo <= tol.abs {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket is down to adjacent floats
            break;
        }
        let f_mid = f(mid);
        if f_mid.is_nan() {
            return None;
        }
        if f_mid == 0.0 {
            return Some(Bracket { lo: mid, hi: mid });
        }
        if sign_change(f_lo, f_mid) {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
    }
    Some(Bracket { lo, hi })
}

/// Halves `x` from `start` until `f` changes sign relative to `f(start)`.
/// Returns the bracket `[x, 2x]`, or `None` once `x` would drop below `floor`.
pub fn expand_down<F>(f: &F, start: f64, floor: f64) -> Option<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let f_start = f(start);
    let mut hi = start;
    loop {
        let lo = hi * 0.5;
        if lo < floor {
            let f_floor = f(floor);
            return sign_change(f_start, f_floor).then_some((floor, hi));
        }
        if sign_change(f_start, f(lo)) {
            return Some((lo, hi));
        }
        hi = lo;
    }
}

/// Doubles `x` from `start` until `f` changes sign relative to `f(start)`.
/// Returns the bracket `[x/2, x]`, or `None` once `x` would exceed `cap`.
pub fn expand_up<F>(f: &F, start: f64, cap: f64) -> Option<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let f_start = f(start);
    let mut lo = start;
    loop {
        let hi = lo * 2.0;
        if hi > cap {
            let f_cap = f(cap);
            return sign_change(f_start, f_cap).then_some((lo, cap));
        }
        if sign_change(f_start, f(hi)) {
            return Some((lo, hi));
        }
        lo = hi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_two() {
        let b = bisect(|x| x * x - 2.0, 1.0, 2.0, Tolerance::default()).unwrap();
        assert!(b.width() <= 1e-12);
        assert!(b.lo <= std::f64::consts::SQRT_2 && std::f64::consts::SQRT_2 <= b.hi);
    }

    #[test]
    fn decreasing_function_and_reversed_bracket() {
        let b = bisect(|x| 1.0 - x, 3.0, 0.0, Tolerance::default()).unwrap();
        assert!((b.mid() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_sign_change() {
        assert!(bisect(|x| x * x + 1.0, -1.0, 1.0, Tolerance::default()).is_none());
        assert!(bisect(|_| f64::NAN, -1.0, 1.0, Tolerance::default()).is_none());
    }

    #[test]
    fn exact_zero_at_endpoint() {
        let b = bisect(|x| x - 1.0, 1.0, 2.0, Tolerance::default()).unwrap();
        assert_eq!(b, Bracket { lo: 1.0, hi: 1.0 });
    }

    #[test]
    fn expansion() {
        let f = |x: f64| x - 0.01;
        assert_eq!(expand_down(&f, 1.0, 1e-9), Some((0.0078125, 0.015625)));
        assert_eq!(expand_down(&|x: f64| x + 1.0, 1.0, 1e-9), None);
        let g = |x: f64| 100.0 - x;
        assert_eq!(expand_up(&g, 1.0, 1e9), Some((64.0, 128.0)));
        assert_eq!(expand_up(&|x: f64| x, 1.0, 1e9), None);
        // root between the last doubling and the cap
        let h = |x: f64| 1e9 - 1.0 - x;
        let (lo, hi) = expand_up(&h, 1.0, 1e9).unwrap();
        assert_eq!(hi, 1e9);
        assert!(lo < 1e9 - 1.0);
    }
}
