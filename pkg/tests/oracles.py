"""Independent brute-force reference implementations for the loss suite.

Everything here works pixel by pixel on plain Python floats and never
touches the library's tensor code paths, so it can serve as an oracle
for equivalence tests.
"""
import math

CLAMP_EPS = 1e-7


def oracle_penalty(z: float, kind: str, t: float) -> float:
    if kind == "scaled_relu":
        return t * max(0.0, z)
    if z <= -1.0 / (t * t):
        return -(1.0 / t) * math.log(-z)
    return t * z - (1.0 / t) * math.log(1.0 / (t * t)) + 1.0 / t


def oracle_emptiness(f, box):
    """-sum log(1 - f) over pixels outside the box (inclusive corners)."""
    rmin, cmin, rmax, cmax = box
    total = 0.0
    for r in range(len(f)):
        for c in range(len(f[0])):
            if rmin <= r <= rmax and cmin <= c <= cmax:
                continue
            p = min(max(float(f[r][c]), CLAMP_EPS), 1.0 - CLAMP_EPS)
            total += -math.log(1.0 - p)
    return total


def oracle_band_slacks(f, box, w):
    """(threshold - band mass) for every horizontal and vertical band."""
    rmin, cmin, rmax, cmax = box
    slacks = []
    r = rmin
    while r <= rmax:
        r_end = min(r + w - 1, rmax)
        mass = 0.0
        for rr in range(r, r_end + 1):
            for cc in range(cmin, cmax + 1):
                mass += float(f[rr][cc])
        slacks.append(float(min(w, r_end - r + 1)) - mass)
        r = r_end + 1
    c = cmin
    while c <= cmax:
        c_end = min(c + w - 1, cmax)
        mass = 0.0
        for cc in range(c, c_end + 1):
            for rr in range(rmin, rmax + 1):
                mass += float(f[rr][cc])
        slacks.append(float(min(w, c_end - c + 1)) - mass)
        c = c_end + 1
    return slacks


def oracle_tightness(f, box, w, kind, t):
    return sum(oracle_penalty(z, kind, t) for z in oracle_band_slacks(f, box, w))


def oracle_size(f, box, eps_lo, eps_hi, kind, t):
    rmin, cmin, rmax, cmax = box
    area = (rmax - rmin + 1) * (cmax - cmin + 1)
    mass = 0.0
    for row in f:
        for v in row:
            mass += float(v)
    return oracle_penalty(eps_lo * area - mass, kind, t) + oracle_penalty(
        mass - eps_hi * area, kind, t
    )


def oracle_total(f, box, w, lam_tight, lam_size, eps_lo, eps_hi, kind, t):
    return (
        oracle_emptiness(f, box)
        + lam_tight * oracle_tightness(f, box, w, kind, t)
        + lam_size * oracle_size(f, box, eps_lo, eps_hi, kind, t)
    )
