# search.py - Scalar search routines

"""
One-dimensional search used throughout calibration and gradients.

golden_section_minimize assumes a unimodal objective on [a, b];
bisect_sup assumes a predicate that is true on a prefix of [lo, hi].
"""

import math

INV_PHI = (math.sqrt(5) - 1) / 2  # 1 / phi
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2  # 1 / phi^2


def golden_section_minimize(f, a, b, tol=1e-10, iterations=None):
    """
    Golden-section search for the minimum of a unimodal function

    Args:
        f (callable): Objective on [a, b]
        a (float): Left end
        b (float): Right end
        tol (float): Final bracket width (ignored when iterations is given)
        iterations (int): Fixed number of shrink steps

    Returns:
        tuple: (x_best, f_best, evaluations) over every point evaluated,
            including both ends of the initial bracket
    """
    a, b = min(a, b), max(a, b)
    best_x, best_f = a, f(a)
    fb = f(b)
    if fb < best_f:
        best_x, best_f = b, fb
    evaluations = 2

    h = b - a
    if iterations is None:
        if h <= tol:
            return best_x, best_f, evaluations
        iterations = int(math.ceil(math.log(tol / h) / math.log(INV_PHI)))

    c = a + INV_PHI_SQUARE * h
    d = a + INV_PHI * h
    yc = f(c)
    yd = f(d)
    evaluations += 2
    for x, y in ((c, yc), (d, yd)):
        if y < best_f:
            best_x, best_f = x, y

    for _ in range(max(iterations - 1, 0)):
        if yc < yd:
            b = d
            d = c
            yd = yc
            h = INV_PHI * h
            c = a + INV_PHI_SQUARE * h
            yc = f(c)
            x, y = c, yc
        else:
            a = c
            c = d
            yc = yd
            h = INV_PHI * h
            d = a + INV_PHI * h
            yd = f(d)
            x, y = d, yd
        evaluations += 1
        if y < best_f:
            best_x, best_f = x, y

    return best_x, best_f, evaluations


def bisect_sup(predicate, lo, hi, eps):
    """
    Bisection for the supremum of {x in [lo, hi] : predicate(x)}

    predicate(lo) is assumed true. The loop stops once the bracket is
    narrower than eps or can no longer be split in floating point.

    Args:
        predicate (callable): Monotone test, true then false
        lo (float): Known-feasible left end
        hi (float): Right end
        eps (float): Bracket tolerance (0 means full float precision)

    Returns:
        tuple: (lo, hi, iterations) - lo always satisfies the predicate
    """
    iterations = 0
    while hi - lo > eps:
        mid = (lo + hi) / 2
        if mid <= lo or mid >= hi:
            break
        if predicate(mid):
            lo = mid
        else:
            hi = mid
        iterations += 1
    return lo, hi, iterations
