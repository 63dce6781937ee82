"""Special functions and numerical utilities shared by the whole package.

Standard normal CDF/quantile, Student-t CDF/quantile, adaptive Simpson
quadrature, and bracketed bisection.  Everything here is a pure function
of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from scipy import special as _special

from .errors import BracketError, DomainError, NumericalError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Tolerance:
    """Convergence budget for the iterative routines in this module."""

    abs_tol: float = 1e-9
    rel_tol: float = 0.0
    max_iter: int = 10_000

    def __post_init__(self) -> None:
        if not (self.abs_tol > 0.0):
            raise DomainError(f"abs_tol must be positive, got {self.abs_tol}")
        if self.rel_tol < 0.0:
            raise DomainError(f"rel_tol must be nonnegative, got {self.rel_tol}")
        if self.max_iter < 1:
            raise DomainError(f"max_iter must be >= 1, got {self.max_iter}")


def std_normal_cdf(x: float) -> float:
    """Standard normal distribution function, accurate into the far tails.

    Computed as erfc(-x/sqrt(2))/2, which keeps full relative precision
    for arguments as extreme as -37 where the naive 1 - cdf(-x) form
    would round to 0.
    """
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"std_normal_cdf requires finite x, got {x}")
    return 0.5 * math.erfc(-x / _SQRT2)


def std_normal_pdf(x: float) -> float:
    """Standard normal density."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"std_normal_pdf requires finite x, got {x}")
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


# Coefficients of Acklam's rational approximation to the normal quantile.
_ACKLAM_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_ACKLAM_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01,
    2.445134137142996e+00, 3.754408661907416e+00,
)


def _acklam_initial(p: float) -> float:
    p_low = 0.02425
    if p < p_low:
        z = math.sqrt(-2.0 * math.log(p))
        a, b, c, d, e, f = _ACKLAM_C
        g, h, i, j = _ACKLAM_D
        return (((((a * z + b) * z + c) * z + d) * z + e) * z + f) / (
            (((g * z + h) * z + i) * z + j) * z + 1.0)
    if p > 1.0 - p_low:
        return -_acklam_initial(1.0 - p)
    z = p - 0.5
    r = z * z
    a, b, c, d, e, f = _ACKLAM_A
    g, h, i, j, k = _ACKLAM_B
    return (((((a * r + b) * r + c) * r + d) * r + e) * r + f) * z / (
        ((((g * r + h) * r + i) * r + j) * r + k) * r + 1.0)


def std_normal_quantile(p: float) -> float:
    """Inverse of :func:`std_normal_cdf` on (0, 1).

    Rational initial guess refined by Newton steps on the accurate CDF;
    falls back to bisection if Newton stalls.  |cdf(result) - p| <= 1e-12
    wherever the density does not underflow.
    """
    p = float(p)
    if not (0.0 < p < 1.0) or not math.isfinite(p):
        raise DomainError(f"std_normal_quantile requires p in (0,1), got {p}")
    x = _acklam_initial(p)
    for _ in range(3):
        dens = std_normal_pdf(x)
        if dens < 1e-290:
            # |x| > 36: absolute CDF error is below 1e-280 regardless
            return x
        err = std_normal_cdf(x) - p
        step = err / dens
        # cap the step to stay inside the quadratic convergence basin
        step = max(-1.0, min(1.0, step))
        x -= step
        if abs(err) <= 1e-14:
            break
    if abs(std_normal_cdf(x) - p) > 1e-12:
        lo, hi = x - 1.0, x + 1.0
        while std_normal_cdf(lo) > p:
            lo -= 1.0
        while std_normal_cdf(hi) < p:
            hi += 1.0
        x = bisect_root(lambda t: std_normal_cdf(t) - p, lo, hi,
                        Tolerance(abs_tol=1e-14, max_iter=200))
    return x


def _validate_df(df: int) -> int:
    if isinstance(df, bool) or int(df) != df or int(df) < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {df}")
    return int(df)


def student_t_cdf(x: float, df: int) -> float:
    """Student-t distribution function with integer degrees of freedom."""
    df = _validate_df(df)
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"student_t_cdf requires finite x, got {x}")
    return float(_special.stdtr(df, x))


def student_t_quantile(p: float, df: int) -> float:
    """Inverse of :func:`student_t_cdf` in its first argument."""
    df = _validate_df(df)
    p = float(p)
    if not (0.0 < p < 1.0):
        raise DomainError(f"student_t_quantile requires p in (0,1), got {p}")
    return float(_special.stdtrit(df, p))


def adaptive_quadrature(f: Callable[[float], float], a: float, b: float,
                        tol: Tolerance | None = None) -> float:
    """Integrate f over [a, b] by adaptive Simpson subdivision.

    The error budget tol.abs_tol is split across subintervals by halving,
    so the accepted estimate carries total error of that order for smooth
    integrands.  Exceeding tol.max_iter subdivisions raises
    :class:`NumericalError` carrying the partial estimate.
    """
    if tol is None:
        tol = Tolerance()
    a, b = float(a), float(b)
    if not (math.isfinite(a) and math.isfinite(b)) or a > b:
        raise DomainError(f"invalid integration interval [{a}, {b}]")
    if a == b:
        return 0.0

    def simpson(lo: float, hi: float, flo: float, fmid: float, fhi: float) -> float:
        return (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)

    m0 = 0.5 * (a + b)
    fa, fm0, fb = float(f(a)), float(f(m0)), float(f(b))
    whole = simpson(a, b, fa, fm0, fb)
    budget = max(tol.abs_tol, tol.rel_tol * abs(whole))
    stack = [(a, b, fa, fm0, fb, whole, budget)]
    acc = 0.0
    splits = 0
    while stack:
        lo, hi, flo, fmid, fhi, s, eps = stack.pop()
        mid = 0.5 * (lo + hi)
        lmid = 0.5 * (lo + mid)
        rmid = 0.5 * (mid + hi)
        fl, fr = float(f(lmid)), float(f(rmid))
        s_left = simpson(lo, mid, flo, fl, fmid)
        s_right = simpson(mid, hi, fmid, fr, fhi)
        err = (s_left + s_right - s) / 15.0
        width_floor = (hi - lo) <= 1e-15 * max(abs(lo), abs(hi), 1.0)
        if abs(err) <= eps or width_floor:
            acc += s_left + s_right + err
            continue
        splits += 1
        if splits > tol.max_iter:
            partial = acc + s_left + s_right + sum(item[5] for item in stack)
            raise NumericalError(
                f"quadrature did not converge within {tol.max_iter} subdivisions",
                partial=partial)
        half = 0.5 * eps
        stack.append((lo, mid, flo, fl, fmid, s_left, half))
        stack.append((mid, hi, fmid, fr, fhi, s_right, half))
    return acc


def bisect_root(f: Callable[[float], float], lo: float, hi: float,
                tol: Tolerance | None = None) -> float:
    """Find a root of f on [lo, hi] by bisection.

    Requires a sign change on the bracket.  Iterates until the bracket
    width drops below tol.abs_tol, then returns the midpoint.
    """
    if tol is None:
        tol = Tolerance()
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise DomainError(f"invalid bracket [{lo}, {hi}]")
    flo, fhi = float(f(lo)), float(f(hi))
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0.0) == (fhi > 0.0):
        raise BracketError(
            f"no sign change on [{lo}, {hi}]: f(lo)={flo:.6g}, f(hi)={fhi:.6g}")
    mid = 0.5 * (lo + hi)
    for _ in range(tol.max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol.abs_tol:
            return mid
        fmid = float(f(mid))
        if fmid == 0.0:
            return mid
        if (fmid > 0.0) == (fhi > 0.0):
            hi, fhi = mid, fmid
        else:
            lo, flo = mid, fmid
    raise NumericalError(
        f"bisection did not reach width {tol.abs_tol} in {tol.max_iter} iterations",
        partial=mid)
