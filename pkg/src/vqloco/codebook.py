"""Vector-quantisation bottleneck with EMA dictionary learning."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .worldmodel import FrozenError

__all__ = ["Codebook", "straight_through", "commitment_loss", "codebook_usage"]


class Codebook:
    """K entries of width D. ``entries == sums / counts`` holds after every EMA update.

    Counts are floored at ``eps`` so dead codes never divide by zero; a floor (rather than
    redistributing mass across codes) keeps the entry unchanged when a code receives nothing."""

    def __init__(self, k=64, d=32, rng=None, decay=0.99, eps=1e-5, init_std=0.1):
        rng = np.random.default_rng(rng)
        self.k, self.d = k, d
        self.decay = decay
        self.eps = eps
        self.entries = rng.normal(0.0, init_std, size=(k, d))
        self.counts = np.ones(k)
        self.sums = self.entries.copy()
        self.frozen = False

    def freeze(self):
        self.frozen = True

    def quantize(self, z):
        """Nearest entry by Euclidean distance, lowest index on ties. ``z``: (D,) or (B, D)."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.d:
            raise ValueError(f"codebook width is {self.d}, got a vector of width {z.shape[-1]}")
        flat = z.reshape(-1, self.d)
        diff = flat[:, None, :] - self.entries[None, :, :]
        dist = np.sum(diff * diff, axis=-1)
        idx = np.argmin(dist, axis=-1)   # argmin returns the first minimum
        idx = idx.reshape(z.shape[:-1])
        return idx, self.entries[idx]

    def ema_update(self, z, idx):
        if self.frozen:
            raise FrozenError("codebook is frozen")
        z = np.asarray(z, dtype=float).reshape(-1, self.d)
        idx = np.asarray(idx, dtype=np.intp).reshape(-1)
        if len(idx) != len(z):
            raise ValueError("one assignment per vector is required")
        if np.any((idx < 0) | (idx >= self.k)):
            raise ValueError("assignment index out of range")
        n = np.bincount(idx, minlength=self.k).astype(float)
        total = np.zeros((self.k, self.d))
        np.add.at(total, idx, z)
        lam = self.decay
        self.counts = np.maximum(lam * self.counts + (1.0 - lam) * n, self.eps)
        self.sums = lam * self.sums + (1.0 - lam) * total
        self.entries = self.sums / self.counts[:, None]
        return self

    def params(self):
        return {"codebook.entries": self.entries, "codebook.counts": self.counts, "codebook.sums": self.sums}

    def digest(self):
        return dc.params_digest(self.params())

    def to_json(self):
        return {"k": self.k, "d": self.d, "decay": self.decay, "eps": self.eps, "frozen": self.frozen,
                "params": dc.params_to_json(self.params())}

    @classmethod
    def from_json(cls, doc):
        cb = cls(doc["k"], doc["d"], rng=0, decay=doc["decay"], eps=doc["eps"])
        p = dc.params_from_json(doc["params"])
        cb.entries, cb.counts, cb.sums = p["codebook.entries"], p["codebook.counts"], p["codebook.sums"]
        cb.frozen = bool(doc["frozen"])
        return cb


def straight_through(g: dc.Graph, z: dc.Node, z_hat) -> dc.Node:
    """Forward value ``z_hat``; backward treats the quantiser as the identity.

    Written as ``sg(z_hat) + (z - sg(z))`` rather than ``z + sg(z_hat - z)``: ``z - z`` is exactly
    zero, so the forward value is bit-identical to ``z_hat``."""
    z_hat = z_hat if isinstance(z_hat, dc.Node) else g.const(z_hat)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    return g.stop_gradient(z_hat) + (z - g.stop_gradient(z))


def commitment_loss(g: dc.Graph, z: dc.Node, z_hat, beta=0.05) -> dc.Node:
    """``beta * ||z - sg(z_hat)||^2`` summed over the code width, averaged over the batch."""
    z_hat = g.stop_gradient(z_hat if isinstance(z_hat, dc.Node) else g.const(z_hat))
    batch = z.value.shape[0] if z.value.ndim > 1 else 1
    return g.sum(g.square(z - z_hat)) * (beta / batch)


def codebook_usage(indices, k):
    """Per-code frequencies and perplexity ``exp(entropy)`` of an assignment history."""
    indices = np.asarray(indices, dtype=np.intp).ravel()
    if indices.size == 0:
        raise ValueError("usage needs at least one assignment")
    freq = np.bincount(indices, minlength=k).astype(float) / indices.size
    nz = freq[freq > 0]
    return freq, float(np.exp(-np.sum(nz * np.log(nz))))
