"""Linear layers: dense, basis-expanded (factorized), and finalized pairs.

All layers work on column batches: inputs are ``(in_features, B)`` and
outputs ``(out_features, B)``. ``forward`` caches its input so a following
``backward(dy)`` can fill ``self.grads`` and return the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, as_matrix, svd

MASS_RTOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def _check_input(x, in_features: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != in_features:
        raise ShapeError(f"expected input of shape ({in_features}, B), got {x.shape}")
    return x


class DenseLinear:
    kind = "dense"

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = None if bias is None else np.array(bias, dtype=np.float64)
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape}")
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    @classmethod
    def init(cls, in_features: int, out_features: int, rng: np.random.Generator, bias=True):
        w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features))
        return cls(w, np.zeros(out_features) if bias else None)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        x = _check_input(x, self.in_features)
        self._x = x
        y = self.weight @ x
        if self.bias is not None:
            y += self.bias[:, None]
        return y

    def backward(self, dy):
        x = self._x
        self.grads = {"weight": dy @ x.T}
        if self.bias is not None:
            self.grads["bias"] = dy.sum(axis=1)
        return self.weight.T @ dy

    def params(self) -> dict[str, np.ndarray]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.params())

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def materialize(self) -> np.ndarray:
        return self.weight.copy()


@dataclass
class LayerGradients:
    d_weights: np.ndarray
    d_extra_u: np.ndarray
    d_extra_v: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


class FactorizedLinear:
    """W~ = sum_i s_i u_i v_i^T + sum_j eu_j ev_j^T, plus a bias.

    ``base_u``/``base_v`` are fixed (read-only) and only ever lose columns
    through pruning. ``basis_index`` tracks each surviving column's position
    in the original SVD.
    """

    kind = "factorized"

    def __init__(self, base_u, base_v, weights, extra_u, extra_v, bias, basis_index=None):
        self.base_u = _frozen(base_u)
        self.base_v = _frozen(base_v)
        self.weights = np.array(weights, dtype=np.float64)
        self.extra_u = np.array(extra_u, dtype=np.float64)
        self.extra_v = np.array(extra_v, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        r = self.weights.shape[0]
        if basis_index is None:
            basis_index = np.arange(r)
        self.basis_index = np.asarray(basis_index, dtype=np.int64)
        n, m = self.base_u.shape[0], self.base_v.shape[0]
        if self.base_u.shape[1] != r or self.base_v.shape[1] != r or self.basis_index.shape != (r,):
            raise ShapeError("bases, weights and basis_index disagree on rank")
        if self.extra_u.shape[0] != n or self.extra_v.shape[0] != m:
            raise ShapeError("augmentation vectors do not match layer shape")
        if self.extra_u.shape[1] != self.extra_v.shape[1]:
            raise ShapeError("extra_u and extra_v disagree on additional dimension")
        if self.bias.shape != (n,):
            raise ShapeError(f"bias must have shape ({n},)")
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    @classmethod
    def from_dense(cls, w, bias=None, additional_dim: int = 0, seed=0) -> "FactorizedLinear":
        w = as_matrix(w, "weight")
        n, m = w.shape
        if additional_dim < 0:
            raise ValueError("additional_dim must be nonnegative")
        dec = svd(w)
        rng = np.random.default_rng(seed)
        extra_v = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, additional_dim))
        extra_u = np.zeros((n, additional_dim))
        b = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64)
        return cls(dec.u, dec.v, dec.s, extra_u, extra_v, b)

    @property
    def rank(self) -> int:
        return self.weights.shape[0]

    @property
    def additional_dim(self) -> int:
        return self.extra_u.shape[1]

    @property
    def in_features(self) -> int:
        return self.base_v.shape[0]

    @property
    def out_features(self) -> int:
        return self.base_u.shape[0]

    def forward(self, x):
        x = _check_input(x, self.in_features)
        self._x = x
        y = self.base_u @ (self.weights[:, None] * (self.base_v.T @ x))
        if self.additional_dim:
            y += self.extra_u @ (self.extra_v.T @ x)
        y += self.bias[:, None]
        return y

    def gradients(self, x, dy) -> LayerGradients:
        x = _check_input(x, self.in_features)
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != (self.out_features, x.shape[1]):
            raise ShapeError(f"upstream gradient shape {dy.shape} does not match output")
        ut_dy = self.base_u.T @ dy  # r x B
        vt_x = self.base_v.T @ x
        eut_dy = self.extra_u.T @ dy  # r~ x B
        evt_x = self.extra_v.T @ x
        return LayerGradients(
            d_weights=np.sum(ut_dy * vt_x, axis=1),
            d_extra_u=dy @ evt_x.T,
            d_extra_v=x @ eut_dy.T,
            d_bias=dy.sum(axis=1),
            d_input=self.base_v @ (self.weights[:, None] * ut_dy) + self.extra_v @ eut_dy,
        )

    def backward(self, dy):
        g = self.gradients(self._x, dy)
        self.grads = {
            "weights": g.d_weights,
            "extra_u": g.d_extra_u,
            "extra_v": g.d_extra_v,
            "bias": g.d_bias,
        }
        return g.d_input

    def params(self) -> dict[str, np.ndarray]:
        return {
            "weights": self.weights,
            "extra_u": self.extra_u,
            "extra_v": self.extra_v,
            "bias": self.bias,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        t = {"base_u": self.base_u, "base_v": self.base_v, "basis_index": self.basis_index}
        t.update(self.params())
        return t

    def num_params(self) -> int:
        # bases are fixed, so only the retrainable tensors count
        return sum(p.size for p in self.params().values())

    def materialize(self) -> np.ndarray:
        w = (self.base_u * self.weights) @ self.base_v.T
        if self.additional_dim:
            w += self.extra_u @ self.extra_v.T
        return w

    def keep(self, kept) -> None:
        """Drop every basis column not listed in ``kept`` (current positions)."""
        kept = np.asarray(kept, dtype=np.int64)
        self.base_u = _frozen(self.base_u[:, kept])
        self.base_v = _frozen(self.base_v[:, kept])
        self.weights = self.weights[kept].copy()
        self.basis_index = self.basis_index[kept]

    def finalize(self) -> "FinalizedLinear":
        return finalize(self)


def select_by_mass(weights, ratio: float) -> np.ndarray:
    """Positions of the shortest |w|-descending prefix holding ``ratio`` of the mass.

    Ties go to the lower position. Returned positions are in ascending order.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"keep ratio per pruning must be in (0, 1], got {ratio}")
    mag = np.abs(np.asarray(weights, dtype=np.float64))
    if mag.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-mag, kind="stable")
    total = mag.sum()
    if total == 0.0:
        return np.array([0], dtype=np.int64)
    cum = np.cumsum(mag[order])
    reached = cum >= ratio * total * (1.0 - MASS_RTOL)
    count = int(np.argmax(reached)) + 1 if reached.any() else mag.size
    return np.sort(order[:count])


def prune_by_mass(layer: FactorizedLinear, keep_ratio_per_pruning: float) -> int:
    """Prune low-|s| bases in place; return how many were removed."""
    if layer.rank < 1:
        raise ValueError("cannot prune a layer with no bases")
    kept = select_by_mass(layer.weights, keep_ratio_per_pruning)
    pruned = layer.rank - kept.size
    if pruned:
        layer.keep(kept)
    return pruned


class FinalizedLinear:
    """Two stacked dense maps: ``first`` (m -> r', no bias) then ``second`` (r' -> n)."""

    kind = "finalized"

    def __init__(self, first: DenseLinear, second: DenseLinear):
        if first.out_features != second.in_features:
            raise ShapeError("inner dimensions of finalized pair disagree")
        self.first = first
        self.second = second

    @property
    def rank(self) -> int:
        return self.first.out_features

    @property
    def in_features(self) -> int:
        return self.first.in_features

    @property
    def out_features(self) -> int:
        return self.second.out_features

    @property
    def grads(self) -> dict[str, np.ndarray]:
        g = {f"first.{k}": v for k, v in self.first.grads.items()}
        g.update({f"second.{k}": v for k, v in self.second.grads.items()})
        return g

    def forward(self, x):
        return self.second.forward(self.first.forward(x))

    def backward(self, dy):
        return self.first.backward(self.second.backward(dy))

    def params(self) -> dict[str, np.ndarray]:
        p = {f"first.{k}": v for k, v in self.first.params().items()}
        p.update({f"second.{k}": v for k, v in self.second.params().items()})
        return p

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.params())

    def num_params(self) -> int:
        return self.first.num_params() + self.second.num_params()

    def materialize(self) -> np.ndarray:
        return self.second.weight @ self.first.weight


def finalize(layer: FactorizedLinear) -> FinalizedLinear:
    w = layer.materialize()
    n, m = w.shape
    if not np.any(w):
        u, s, v = np.zeros((n, 0)), np.zeros(0), np.zeros((m, 0))
    else:
        dec = svd(w)
        u, s, v = dec.u, dec.s, dec.v
    first = DenseLinear(s[:, None] * v.T)
    second = DenseLinear(u, layer.bias.copy())
    return FinalizedLinear(first, second)


def low_rank_pair(u, s, v, bias) -> FinalizedLinear:
    """Finalized pair for W = u diag(s) v^T, used by the truncation baselines."""
    return FinalizedLinear(DenseLinear(np.asarray(s)[:, None] * np.asarray(v).T),
                           DenseLinear(u, np.array(bias, dtype=np.float64)))
