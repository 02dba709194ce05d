"""Hand-derived reference values shared by the unit and acceptance tests."""

import math

import numpy as np

# 4 stations: links 0-1, 1-2, 1-3
TOPOLOGY = [(0, 1), (1, 2), (1, 3)]
PHYSICAL_W = {
    (0, 1): 1.0,
    (1, 0): 1 / 3, (1, 2): 1 / 3, (1, 3): 1 / 3,
    (2, 1): 1.0,
    (3, 1): 1.0,
}

# two-sample (inflow, outflow) series; DTW worked out cell by cell:
#   d01 = 2, d02 = 5, d03 = 1, d12 = 1 + sqrt(20), d13 = 1 + sqrt(2), d23 = sqrt(18)
SERIES = np.array([
    [[0.0, 0.0], [0.0, 0.0]],
    [[1.0, 0.0], [1.0, 0.0]],
    [[0.0, 0.0], [3.0, 4.0]],
    [[0.0, 0.0], [0.0, 1.0]],
])
DTW = {
    (0, 1): 2.0, (0, 2): 5.0, (0, 3): 1.0,
    (1, 2): 1 + math.sqrt(20), (1, 3): 1 + math.sqrt(2), (2, 3): math.sqrt(18),
}


def _pair(i, j, wi, wj):
    # two selected neighbours with similarity exp(-d): w = e^-di / (e^-di + e^-dj)
    di, dj = DTW[tuple(sorted((i, wi)))], DTW[tuple(sorted((i, wj)))]
    a = 1 / (1 + math.exp(di - dj))
    return {(i, wi): a, (i, wj): 1 - a}


# top_k(2): row 0 keeps {3, 1}, row 1 {0, 3}, row 2 {3, 0}, row 3 {0, 1}
SIMILARITY_W = {**_pair(0, 0, 3, 1), **_pair(1, 1, 0, 3), **_pair(2, 2, 3, 0), **_pair(3, 3, 0, 1)}
SIMILARITY_K = 2

# D(i, j) = trips j -> i
OD = np.array([
    [0.0, 30.0, 70.0, 0.0],
    [10.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
    [1.0, 4.0, 5.0, 0.0],
])
CORRELATION_TAU = 0.2
# row 0: C = [0, .3, .7, 0]; row 1: C = [1, 0, 0, 0]; row 2 empty; row 3: C = [.1, .4, .5, 0] -> {1, 2}
CORRELATION_W = {
    (0, 1): 0.3, (0, 2): 0.7,
    (1, 0): 1.0,
    (3, 1): 0.4 / 0.9, (3, 2): 0.5 / 0.9,
}


def brute_force_dtw(a, b):
    """Minimum over every monotone warping path, enumerated explicitly."""
    a, b = np.atleast_2d(np.asarray(a, float).T).T, np.atleast_2d(np.asarray(b, float).T).T
    n, m = len(a), len(b)
    best = math.inf

    def walk(u, v, acc):
        nonlocal best
        acc = acc + float(np.sqrt(np.sum((a[u] - b[v]) ** 2)))
        if u == n - 1 and v == m - 1:
            best = min(best, acc)
            return
        for du, dv in ((1, 0), (0, 1), (1, 1)):
            if u + du < n and v + dv < m:
                walk(u + du, v + dv, acc)

    walk(0, 0, 0.0)
    return best


def weights_dict(graph):
    return {(i, j): w for i, j, w in graph.edges}


def count_paths(n, m):
    """Delannoy number: monotone paths with unit right/down/diagonal steps."""
    return sum(math.comb(n - 1, k) * math.comb(m - 1, k) * 2 ** k for k in range(min(n, m)))


