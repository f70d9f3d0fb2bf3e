"""Independent reference computations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np
from scipy import integrate
from scipy import stats as sps


def brute_dsc(u, g):
    su = {tuple(i) for i in np.argwhere(u)}
    sg = {tuple(i) for i in np.argwhere(g)}
    if not su and not sg:
        return 1.0
    return 2 * len(su & sg) / (len(su) + len(sg))


def enumerated_wilcoxon_p(d):
    """Two-sided exact p by listing every sign assignment of the ranks."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    sums = np.array(sums)
    lower = np.mean(sums <= w + 1e-9)
    upper = np.mean(sums >= w - 1e-9)
    return w, min(1.0, 2 * min(lower, upper))


def textbook_t(d):
    """t statistic by formula, p by integrating the Student-t density."""
    d = np.asarray(d, dtype=float)
    n = len(d)
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    t = mean / math.sqrt(var / n)
    nu = n - 1
    c = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2))
    dens = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    tail, _ = integrate.quad(dens, abs(t), np.inf, epsabs=1e-14, epsrel=1e-13)
    return t, 2 * tail


def scan_bbox(labels, organ, spacing, origin):
    """Exhaustive oracle: min/max world coordinate over every labeled voxel."""
    pts = []
    for idx in itertools.product(*(range(n) for n in labels.shape)):
        if labels[idx] == organ:
            pts.append([origin[a] + idx[a] * spacing[a] for a in range(3)])
    if not pts:
        return None
    pts = np.array(pts)
    return np.ravel(np.column_stack([pts.min(0), pts.max(0)]))
