"""Online identity functions and the shared input standardizer.

Each model exposes ``step(z) -> (reconstruction, error)`` and a flat
``state()``/``load_state()`` pair (a JSON-able dict of scalars plus a dict of
numpy arrays) used for snapshots.
"""

from __future__ import annotations

import logging
from math import comb

import numpy as np

from .._accel import resolve_backend
from .kernels import KERNELS

log = logging.getLogger(__name__)


class _KernelUser:
    backend: str

    def _bind(self, backend: str | None) -> None:
        self.backend = resolve_backend(backend)
        self._k = KERNELS[self.backend]


class Standardizer(_KernelUser):
    """Running per-metric mean/variance; maps raw vectors to z-scores."""

    def __init__(self, dim: int, eps: float = 1e-9, backend: str | None = None):
        self._bind(backend)
        self.dim = dim
        self.eps = float(eps)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.count = np.zeros(1, dtype=np.int64)
        self.replaced = 0

    @property
    def variance(self) -> np.ndarray:
        n = int(self.count[0])
        return self.m2 / n if n else np.zeros(self.dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.dim)
        bad = self._k.standardize(self.mean, self.m2, self.count, np.ascontiguousarray(x, dtype=np.float64), self.eps, out)
        if bad:
            self.replaced += int(bad)
            log.debug("standardizer replaced %d non-finite values", bad)
        return out

    def state(self):
        return {"dim": self.dim, "eps": self.eps, "replaced": self.replaced}, {
            "mean": self.mean,
            "m2": self.m2,
            "count": self.count,
        }

    def load_state(self, meta, arrays) -> None:
        self.replaced = int(meta["replaced"])
        self.mean = arrays["mean"].copy()
        self.m2 = arrays["m2"].copy()
        self.count = arrays["count"].copy()


class BirchModel(_KernelUser):
    """Flat list of decaying CF micro-clusters; reconstruction = nearest centroid."""

    kind = "birch"

    def __init__(
        self,
        dim: int,
        threshold: float = 3.0,
        max_clusters: int = 50,
        decay: float = 0.001,
        prune_floor: float = 0.01,
        backend: str | None = None,
    ):
        if threshold <= 0:
            raise ValueError("distance threshold must be > 0")
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must be in [0, 1)")
        if max_clusters < 1:
            raise ValueError("max_clusters must be >= 1")
        self._bind(backend)
        self.dim = dim
        self.threshold = float(threshold)
        self.max_clusters = int(max_clusters)
        self.decay = float(decay)
        self.prune_floor = float(prune_floor)
        cap = self.max_clusters + 1
        self.n = np.zeros(cap)
        self.ls = np.zeros((cap, dim))
        self.ss = np.zeros(cap)
        self.dist = np.full((cap, cap), np.inf)
        self.k = 0

    @property
    def centroids(self) -> np.ndarray:
        return self.ls[: self.k] / self.n[: self.k, None]

    @property
    def weights(self) -> np.ndarray:
        return self.n[: self.k].copy()

    def radii(self) -> np.ndarray:
        c = self.centroids
        r2 = self.ss[: self.k] / self.n[: self.k] - (c * c).sum(axis=1)
        return np.sqrt(np.maximum(r2, 0.0))

    def step(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        recon = np.empty(self.dim)
        self.k, err = self._k.birch_insert(
            self.n, self.ls, self.ss, self.dist, self.k, z,
            self.threshold, 1.0 - self.decay, self.max_clusters, self.prune_floor, recon,
        )
        return recon, float(err)

    def params(self) -> dict:
        return {
            "threshold": self.threshold,
            "max_clusters": self.max_clusters,
            "decay": self.decay,
            "prune_floor": self.prune_floor,
        }

    def state(self):
        return {**self.params(), "k": self.k}, {"n": self.n, "ls": self.ls, "ss": self.ss, "dist": self.dist}

    def load_state(self, meta, arrays) -> None:
        self.k = int(meta["k"])
        self.n = arrays["n"].copy()
        self.ls = arrays["ls"].copy()
        self.ss = arrays["ss"].copy()
        self.dist = arrays["dist"].copy()


class ArimaModel(_KernelUser):
    """Independent ARIMA(p, d, q) per metric, coefficients fitted by RLS."""

    kind = "arima"

    def __init__(
        self,
        dim: int,
        p: int = 1,
        d: int = 1,
        q: int = 0,
        forget: float = 0.99,
        delta: float = 1000.0,
        trace_cap: float = 1e8,
        cond_cap: float = 1e8,
        backend: str | None = None,
    ):
        if min(p, d, q) < 0:
            raise ValueError("ARIMA orders must be >= 0")
        if not 0.0 < forget <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        self._bind(backend)
        self.dim = dim
        self.p, self.d, self.q = int(p), int(d), int(q)
        self.forget = float(forget)
        self.delta = float(delta)
        self.trace_cap = float(trace_cap)
        self.cond_cap = float(cond_cap)
        r = self.p + self.q
        self.coef = np.zeros((dim, r))
        self.P = np.repeat((self.delta * np.eye(r))[None], dim, axis=0)
        self.raw_hist = np.zeros((dim, self.d))
        self.diff_hist = np.zeros((dim, self.p))
        self.res_hist = np.zeros((dim, self.q))
        self.seen = 0
        self.resets = 0
        self._signs = np.array([(-1) ** k * comb(self.d, k) for k in range(self.d + 1)], dtype=np.float64)

    @property
    def ar_coef(self) -> np.ndarray:
        return self.coef[:, : self.p]

    @property
    def ma_coef(self) -> np.ndarray:
        return self.coef[:, self.p :]

    def step(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        pred = np.empty(self.dim)
        resets = self._k.arima_step(
            self.coef, self.P, self.raw_hist, self.diff_hist, self.res_hist, self.seen,
            z, self._signs, self.forget, self.delta, self.trace_cap, self.cond_cap, pred,
        )
        if resets:
            self.resets += int(resets)
            log.info("RLS covariance reset for %d metric(s)", resets)
        self.seen += 1
        diff = z - pred
        return pred, float(np.sqrt(diff @ diff))

    def params(self) -> dict:
        return {
            "p": self.p, "d": self.d, "q": self.q, "forget": self.forget,
            "delta": self.delta, "trace_cap": self.trace_cap, "cond_cap": self.cond_cap,
        }

    def state(self):
        return {**self.params(), "seen": self.seen, "resets": self.resets}, {
            "coef": self.coef,
            "P": self.P,
            "raw_hist": self.raw_hist,
            "diff_hist": self.diff_hist,
            "res_hist": self.res_hist,
        }

    def load_state(self, meta, arrays) -> None:
        self.seen = int(meta["seen"])
        self.resets = int(meta["resets"])
        for name in ("coef", "P", "raw_hist", "diff_hist", "res_hist"):
            setattr(self, name, arrays[name].copy())


class RnnModel(_KernelUser):
    """One LSTM cell plus linear readout, trained online one step at a time.

    The prediction for ``z`` is the readout of the hidden state before ``z``
    is seen. The readout starts at zero, so an untrained net predicts zeros.
    """

    kind = "rnn"

    def __init__(
        self,
        dim: int,
        hidden: int = 32,
        lr: float = 0.01,
        init_scale: float = 0.08,
        readout_scale: float = 0.0,
        seed: int = 0,
        backend: str | None = None,
    ):
        self._bind(backend)
        self.dim = dim
        self.hidden = H = int(hidden)
        self.lr = float(lr)
        self.init_scale = float(init_scale)
        self.readout_scale = float(readout_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.W = rng.uniform(-init_scale, init_scale, size=(4 * H, dim + H))
        self.b = rng.uniform(-init_scale, init_scale, size=4 * H)
        self.Wy = rng.uniform(-readout_scale, readout_scale, size=(dim, H)) if readout_scale else np.zeros((dim, H))
        self.by = np.zeros(dim)
        self.h = np.zeros(H)
        self.c = np.zeros(H)
        self.x_prev = np.zeros(dim)
        self.h_pp = np.zeros(H)
        self.c_pp = np.zeros(H)
        self.gates = np.zeros(4 * H)
        self.flags = np.zeros(1, dtype=np.int64)
        self.skipped = 0
        self._alloc_scratch()

    def _alloc_scratch(self) -> None:
        H, D = self.hidden, self.dim
        self._gW = np.zeros((4 * H, D + H))
        self._gb = np.zeros(4 * H)
        self._gWy = np.zeros((D, H))
        self._gby = np.zeros(D)

    def gradients(self, z: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Loss and gradients of the one-step prediction loss, without updating."""
        pred = np.empty(self.dim)
        loss = self._k.lstm_grads(
            self.W, self.b, self.Wy, self.by, self.h, self.c, self.x_prev, self.h_pp, self.c_pp,
            self.gates, bool(self.flags[0]), np.ascontiguousarray(z, dtype=np.float64),
            self._gW, self._gb, self._gWy, self._gby, pred,
        )
        return float(loss), {"W": self._gW.copy(), "b": self._gb.copy(), "Wy": self._gWy.copy(), "by": self._gby.copy()}

    def step(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        pred = np.empty(self.dim)
        err, ok = self._k.lstm_step(
            self.W, self.b, self.Wy, self.by, self.h, self.c, self.x_prev, self.h_pp, self.c_pp,
            self.gates, self.flags, z, self.lr, self._gW, self._gb, self._gWy, self._gby, pred,
        )
        if not ok:
            self.skipped += 1
            log.warning("non-finite gradient; update skipped and activations reset")
        return pred, float(err)

    def params(self) -> dict:
        return {
            "hidden": self.hidden, "lr": self.lr, "init_scale": self.init_scale,
            "readout_scale": self.readout_scale, "seed": self.seed,
        }

    def state(self):
        return {**self.params(), "skipped": self.skipped}, {
            name: getattr(self, name)
            for name in ("W", "b", "Wy", "by", "h", "c", "x_prev", "h_pp", "c_pp", "gates", "flags")
        }

    def load_state(self, meta, arrays) -> None:
        self.skipped = int(meta["skipped"])
        for name, arr in arrays.items():
            setattr(self, name, arr.copy())


MODEL_TYPES = {"birch": BirchModel, "arima": ArimaModel, "rnn": RnnModel}
