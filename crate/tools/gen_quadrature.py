#!/usr/bin/env python3
"""Generate the quadrature tables in crates/mmns/src/geometry/tables.rs.

Triangle rules are Gauss-Legendre x Gauss-Jacobi(1,0) conical products on the
reference triangle (0,0)-(1,0)-(0,1); an n x n product is exact for bivariate
polynomials of total degree <= 2n-1 and all weights are positive.  Segment
rules are plain Gauss-Legendre on [0,1].  Nodes are Newton-refined to 40
significant digits and weights solved from moment systems, so the printed
17-digit values are correctly rounded f64.

Usage: python3 tools/gen_quadrature.py > crates/mmns/src/geometry/tables.rs
"""

import sys
from mpmath import mp, mpf, legendre, jacobi, diff, lu_solve, matrix, factorial

mp.dps = 40

MAX_TRI_DEGREE = 10
MAX_SEG_N = 8


def legendre_roots(n):
    """Roots of P_n on [-1,1], Newton-refined."""
    import numpy as np
    guess = np.polynomial.legendre.leggauss(n)[0]
    roots = []
    for g in guess:
        t = mpf(float(g))
        for _ in range(60):
            f = legendre(n, t)
            df = diff(lambda z: legendre(n, z), t)
            step = f / df
            t -= step
            if abs(step) < mpf(10) ** (-38):
                break
        roots.append(t)
    return roots


def jacobi_roots_10(n):
    """Roots of the Jacobi polynomial P_n^(1,0) on [-1,1], Newton-refined."""
    from scipy.special import roots_jacobi
    guess = roots_jacobi(n, 1.0, 0.0)[0]
    roots = []
    for g in guess:
        t = mpf(float(g))
        for _ in range(60):
            f = jacobi(n, 1, 0, t)
            df = diff(lambda z: jacobi(n, 1, 0, z), t)
            step = f / df
            t -= step
            if abs(step) < mpf(10) ** (-38):
                break
        roots.append(t)
    return roots


def weights_from_moments(nodes, moments):
    n = len(nodes)
    vand = matrix(n, n)
    rhs = matrix(n, 1)
    for k in range(n):
        for j in range(n):
            vand[k, j] = nodes[j] ** k
        rhs[k] = moments[k]
    sol = lu_solve(vand, rhs)
    return [sol[j] for j in range(n)]


def gauss_legendre_01(n):
    """Nodes/weights for int_0^1 f(x) dx."""
    nodes = [(t + 1) / 2 for t in legendre_roots(n)]
    moments = [mpf(1) / (k + 1) for k in range(n)]
    return nodes, weights_from_moments(nodes, moments)


def gauss_jacobi_01(n):
    """Nodes/weights for int_0^1 f(x) (1-x) dx."""
    nodes = [(t + 1) / 2 for t in jacobi_roots_10(n)]
    moments = [mpf(1) / (k + 1) - mpf(1) / (k + 2) for k in range(n)]
    return nodes, weights_from_moments(nodes, moments)


def conical_product(n):
    """Triangle rule exact to degree 2n-1, as (x, y, w) triples."""
    xi, wx = gauss_legendre_01(n)
    eta, we = gauss_jacobi_01(n)
    pts = []
    for j in range(n):
        for i in range(n):
            pts.append((xi[i] * (1 - eta[j]), eta[j], wx[i] * we[j]))
    return pts


def check_triangle(pts, degree):
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            got = sum(w * x ** a * y ** b for x, y, w in pts)
            err = abs(got - exact) / abs(exact)
            assert err < mpf(10) ** (-30), (a, b, err)


def check_segment(nodes, wts, degree):
    for a in range(degree + 1):
        exact = mpf(1) / (a + 1)
        got = sum(w * x ** a for x, w in zip(nodes, wts))
        assert abs(got - exact) / exact < mpf(10) ** (-30), (a,)


def fmt(x):
    s = mp.nstr(x, 17, strip_zeros=False)
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def main():
    out = sys.stdout
    tri = {}
    for deg in range(1, MAX_TRI_DEGREE + 1):
        n = (deg + 2) // 2
        if n not in tri:
            pts = conical_product(n)
            check_triangle(pts, 2 * n - 1)
            tri[n] = pts
    seg = {}
    for n in range(1, MAX_SEG_N + 1):
        nodes, wts = gauss_legendre_01(n)
        check_segment(nodes, wts, 2 * n - 1)
        seg[n] = list(zip(nodes, wts))

    out.write("//! Quadrature node/weight tables.\n")
    out.write("//!\n")
    out.write("//! Generated by tools/gen_quadrature.py; do not edit by hand.\n")
    out.write("//! Triangle rules are n x n Gauss-Legendre x Gauss-Jacobi conical\n")
    out.write("//! products on the reference triangle (0,0)-(1,0)-(0,1), exact for\n")
    out.write("//! total degree <= 2n-1 with strictly positive weights; segment rules\n")
    out.write("//! are Gauss-Legendre on [0,1].\n\n")
    out.write(f"pub const MAX_TRIANGLE_DEGREE: usize = {MAX_TRI_DEGREE};\n")
    out.write(f"pub const MAX_SEGMENT_DEGREE: usize = {2 * MAX_SEG_N - 1};\n\n")

    for n in sorted(tri):
        pts = tri[n]
        out.write(f"const TRI_{n}: [[f64; 3]; {len(pts)}] = [\n")
        for x, y, w in pts:
            out.write(f"    [{fmt(x)}, {fmt(y)}, {fmt(w)}],\n")
        out.write("];\n\n")

    for n in sorted(seg):
        out.write(f"const SEG_{n}: [[f64; 2]; {n}] = [\n")
        for x, w in seg[n]:
            out.write(f"    [{fmt(x)}, {fmt(w)}],\n")
        out.write("];\n\n")

    out.write("/// Reference-triangle rule exact for the given total degree.\n")
    out.write("pub fn triangle_rule(degree: usize) -> &'static [[f64; 3]] {\n")
    out.write("    assert!(degree >= 1 && degree <= MAX_TRIANGLE_DEGREE, \"unsupported triangle quadrature degree {degree}\");\n")
    out.write("    match (degree + 2) / 2 {\n")
    for n in sorted(tri):
        out.write(f"        {n} => &TRI_{n},\n")
    out.write("        _ => unreachable!(),\n")
    out.write("    }\n")
    out.write("}\n\n")
    out.write("/// Gauss-Legendre rule on [0,1] exact for the given degree.\n")
    out.write("pub fn segment_rule(degree: usize) -> &'static [[f64; 2]] {\n")
    out.write("    assert!(degree >= 1 && degree <= MAX_SEGMENT_DEGREE, \"unsupported segment quadrature degree {degree}\");\n")
    out.write("    match (degree + 2) / 2 {\n")
    for n in sorted(seg):
        out.write(f"        {n} => &SEG_{n},\n")
    out.write("        _ => unreachable!(),\n")
    out.write("    }\n")
    out.write("}\n")


if __name__ == "__main__":
    main()
