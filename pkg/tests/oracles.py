"""Slow, loop-based reference implementations used as independent test oracles.

Nothing here shares code with the package beyond plain Python and the
standard library (plus itertools for permutations).
"""
import itertools
import math


def circ(a, b):
    """Geodesic distance between two points of T^d given as sequences."""
    s = 0.0
    for x, y in zip(a, b):
        t = abs(x - y) % 1.0
        t = min(t, 1.0 - t)
        s += t * t
    return math.sqrt(s)


def psi(lam, beta, r):
    return lam / (1.0 + r * r) ** beta


def d2_pairs(x, v, w, lam, beta):
    """1/2 sum_ij w_i w_j psi(x_i - x_j) |v_i - v_j|^2, one pair at a time."""
    n = len(w)
    tot = 0.0
    for i in range(n):
        for j in range(n):
            dv = sum((a - b) ** 2 for a, b in zip(v[i], v[j]))
            tot += w[i] * w[j] * psi(lam, beta, circ(x[i], x[j])) * dv
    return 0.5 * tot


def cell_pairs(mass, u, centers, lam, beta, use_kernel=True):
    """sum_ab m_a m_b k(a,b) |u_a - u_b|^2 over cells."""
    tot = 0.0
    for a in range(len(mass)):
        for b in range(len(mass)):
            k = psi(lam, beta, circ(centers[a], centers[b])) if use_kernel else 1.0
            du = sum((p - q) ** 2 for p, q in zip(u[a], u[b]))
            tot += mass[a] * mass[b] * k * du
    return tot


def w2_by_permutations(x, y):
    """W2 between two uniform measures with equal atom counts on the circle."""
    n = len(x)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        c = sum(circ([x[i]], [y[perm[i]]]) ** 2 for i in range(n)) / n
        best = min(best, c)
    return math.sqrt(best)


def rk4_nbody(x, v, lam, beta, dt, steps):
    """N-body alignment with RK4 on plain lists (positions are not wrapped)."""
    n = len(x)

    def rhs(xs, vs):
        dv = []
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += psi(lam, beta, circ([xs[i]], [xs[j]])) * (vs[j] - vs[i])
            dv.append(acc / n)
        return list(vs), dv

    for _ in range(steps):
        k1x, k1v = rhs(x, v)
        k2x, k2v = rhs([a + 0.5 * dt * b for a, b in zip(x, k1x)], [a + 0.5 * dt * b for a, b in zip(v, k1v)])
        k3x, k3v = rhs([a + 0.5 * dt * b for a, b in zip(x, k2x)], [a + 0.5 * dt * b for a, b in zip(v, k2v)])
        k4x, k4v = rhs([a + dt * b for a, b in zip(x, k3x)], [a + dt * b for a, b in zip(v, k3v)])
        x = [a + dt / 6 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(x, k1x, k2x, k3x, k4x)]
        v = [a + dt / 6 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(v, k1v, k2v, k3v, k4v)]
    return x, v
