"""Log-gamma and the regularized incomplete beta function.

Lanczos approximation (g=7, nine coefficients) and the modified Lentz
continued fraction for I_x(a, b). Accurate to ~1e-14 over the parameter
ranges the two-sample tests use.
"""
from __future__ import annotations

import math

_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def lgamma(x: float) -> float:
    """log|Gamma(x)| for real x not a non-positive integer."""
    if x <= 0 and x == math.floor(x):
        raise ValueError("lgamma pole at non-positive integer")
    if x < 0.5:
        # reflection
        return math.log(math.pi / abs(math.sin(math.pi * x))) - lgamma(1.0 - x)
    x -= 1.0
    acc = _LANCZOS[0]
    for i in range(1, len(_LANCZOS)):
        acc += _LANCZOS[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(acc)


def _betacf(a: float, b: float, x: float, max_iter: int = 10_000, eps: float = 1e-16) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"betacf did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (lgamma(a + b) - lgamma(a) - lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, betainc(0.5 * df, 0.5, df / (df + t * t))))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail P(F >= f) of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return min(1.0, max(0.0, betainc(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))))


def kolmogorov_sf(lam: float, tol: float = 1e-10) -> float:
    """Asymptotic Kolmogorov tail 2 * sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lam^2).

    The series stops once a term drops below ``tol``; the result is clamped
    to [0, 1].
    """
    if lam < 0.1:
        # 1 - sf < exp(-pi^2 / (8 lam^2)) < 1e-53 here
        return 1.0
    total = 0.0
    j = 1
    while True:
        term = math.exp(-2.0 * j * j * lam * lam)
        total += term if j % 2 else -term
        if term < tol:
            break
        j += 1
    return min(1.0, max(0.0, 2.0 * total))
