"""Pure-Python implementation of the search kernels (used when _core is not built).

Mirrors ``_core.pyx`` call for call. The multiset key of a table set is the
pair of 64-bit sums of its members' key halves, so adding a table to a device
updates the key in O(1) and the key does not depend on insertion order.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1
_QSCALE_INV = 1.0 / 4294967296.0


class HeadEngine:
    """Memo of compute-head predictions keyed by table-multiset digest.

    The head is evaluated with the same operation order as the compiled
    kernel (row-by-row accumulation, sequential output sum), so both backends
    return bit-identical costs.
    """

    def __init__(self, W1, b1, w2, b2, y_scale, enabled=True):
        self.W1 = np.ascontiguousarray(W1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(w2, dtype=np.float64).reshape(-1)
        self.b2 = float(b2)
        self.y_scale = float(y_scale)
        self.enabled = enabled
        self._memo = {}
        self.hits = 0
        self.misses = 0
        self.evals = 0

    def _head(self, qsum):
        x = np.asarray(qsum, dtype=np.int64).astype(np.float64) * _QSCALE_INV
        h = self.b1.copy()
        for i in range(len(x)):
            h += x[i] * self.W1[i]
        terms = np.where(h > 0.0, h * self.w2, 0.0)
        out = (float(np.cumsum(terms)[-1]) + self.b2) * self.y_scale
        return out if out > 0.0 else 0.0

    def query(self, qsum, k1, k2):
        if self.enabled:
            key = (int(k1) & _MASK, int(k2) & _MASK)
            v = self._memo.get(key)
            if v is not None:
                self.hits += 1
                return v
            self.misses += 1
            v = self._head(qsum)
            self.evals += 1
            self._memo[key] = v
            return v
        self.misses += 1
        self.evals += 1
        return self._head(qsum)

    def __len__(self):
        return len(self._memo)

    def clear(self):
        self._memo.clear()
        self.hits = self.misses = self.evals = 0


def greedy_passes(engine, qemb, keys, dims, sizes, order, num_devices, mem_cap, grid):
    """Run one cost-greedy assignment per max-device-dim value in ``grid``.

    Returns ``(assign[M, T], device_cost[M, D], feasible[M])``.
    """
    T = len(dims)
    D = num_devices
    M = len(grid)
    assign = np.full((M, T), -1, dtype=np.int32)
    dev_cost = np.zeros((M, D), dtype=np.float64)
    feasible = np.zeros(M, dtype=np.uint8)
    k1s = [int(k) for k in keys[:, 0]]
    k2s = [int(k) for k in keys[:, 1]]
    dims_l = [int(d) for d in dims]
    sizes_l = [int(s) for s in sizes]
    order_l = [int(j) for j in order]
    for g in range(M):
        cap_dim = float(grid[g])
        q = [np.zeros(qemb.shape[1], dtype=np.int64) for _ in range(D)]
        k1 = [0] * D
        k2 = [0] * D
        dsum = [0] * D
        mem = [0] * D
        cost = [0.0] * D
        ok = True
        for j in order_l:
            best, best_c = -1, math.inf
            for d in range(D):
                if mem[d] + sizes_l[j] > mem_cap or dsum[d] + dims_l[j] > cap_dim:
                    continue
                c = engine.query(q[d] + qemb[j], (k1[d] + k1s[j]) & _MASK, (k2[d] + k2s[j]) & _MASK)
                if c < best_c:
                    best, best_c = d, c
            if best < 0:
                ok = False
                break
            q[best] = q[best] + qemb[j]
            k1[best] = (k1[best] + k1s[j]) & _MASK
            k2[best] = (k2[best] + k2s[j]) & _MASK
            dsum[best] += dims_l[j]
            mem[best] += sizes_l[j]
            cost[best] = best_c
            assign[g, j] = best
        if ok:
            feasible[g] = 1
            dev_cost[g] = cost
    return assign, dev_cost, feasible
