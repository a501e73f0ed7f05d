"""NumPy implementations of the hot loops; used when the compiled module is absent."""
import numpy as np


def mean_max_softmax(scores, inv_t):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        raise ValueError("empty score matrix")
    z = (scores - scores.max(axis=1, keepdims=True)) * inv_t
    return float(np.mean(1.0 / np.exp(z).sum(axis=1)))


def combiner_errors(mass, cond, start, stop):
    mass = np.asarray(mass, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    n_cells, k = cond.shape
    idx = np.arange(start, stop, dtype=np.int64)
    err = np.zeros(idx.size)
    rem = idx.copy()
    for c in range(n_cells):
        digit = rem % k
        err += mass[c] * (1.0 - cond[c, digit])
        rem //= k
    return err
