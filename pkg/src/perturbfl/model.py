"""Bias-free ReLU MLP with MSE loss, exact backprop and FedAvg.

This is the unperturbed reference path. Layer ``l`` (1-based in the maths,
0-based in ``MlpParams.layers``) maps ``n_{l-1}`` inputs to ``n_l`` outputs;
hidden layers apply ReLU and the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import as_vector

GradientSet = list  # list[np.ndarray], shape-matched to MlpParams.layers


@dataclass(frozen=True)
class LayerDims:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 3:
            raise UsageError(f"need at least one hidden layer, got dims {dims}")
        if any(d < 1 for d in dims):
            raise UsageError(f"layer widths must be >= 1, got {dims}")

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def shapes(self) -> list[tuple[int, int]]:
        return [(self.dims[i + 1], self.dims[i]) for i in range(self.depth)]


@dataclass
class MlpParams:
    layers: list[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        for i, w in enumerate(self.layers):
            if w.ndim != 2:
                raise ShapeError(f"layer {i + 1} is not a matrix")
            if i and w.shape[1] != self.layers[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i + 1} expects {w.shape[1]} inputs, "
                    f"layer {i} produces {self.layers[i - 1].shape[0]}"
                )

    @property
    def dims(self) -> LayerDims:
        return LayerDims((self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    target: np.ndarray


def init_params(dims: LayerDims, rng: np.random.Generator, std: float = 0.01) -> MlpParams:
    """Draw every weight from N(0, std^2)."""
    return MlpParams([rng.normal(0.0, std, size=shape) for shape in dims.shapes()])


def check_sample_shapes(w: MlpParams, x: np.ndarray, target: np.ndarray | None = None) -> None:
    d = w.dims.dims
    if x.shape[-1] != d[0]:
        raise ShapeError(f"input has {x.shape[-1]} features, model expects {d[0]}")
    if target is not None and target.shape[-1] != d[-1]:
        raise ShapeError(f"target has {target.shape[-1]} entries, model outputs {d[-1]}")


# -- batched kernels ------------------------------------------------------
# Shared by the plain and perturbed paths: the perturbed client runs exactly
# the same propagation on perturbed weights.


def forward_batch(layers: Sequence[np.ndarray], X: np.ndarray):
    """Forward a batch ``X`` of shape (N, n_0).

    Returns ``(acts, masks)`` where ``acts[0] = X`` and ``acts[l]`` is the
    output of layer ``l`` (N, n_l); ``masks[l-1]`` marks positive
    pre-activations of hidden layer ``l``.
    """
    acts = [X]
    masks = []
    h = X
    last = len(layers) - 1
    for i, w in enumerate(layers):
        z = h @ w.T
        if i < last:
            mask = z > 0.0
            masks.append(mask)
            h = np.where(mask, z, 0.0)
        else:
            h = z
        acts.append(h)
    return acts, masks


def backprop_deltas(layers, masks, seed: np.ndarray, start: int) -> list:
    """Vector-Jacobian deltas for a seed placed on the output of layer ``start``.

    ``seed`` has shape (N, ..., n_start) and is the upstream derivative with
    respect to that layer's output (post-activation). Returns a list indexed
    by 0-based layer whose entry ``i`` is the derivative w.r.t. the
    pre-activation of layer ``i + 1``; layers above ``start`` get ``None``.
    Weight gradients follow as ``outer(delta[i], acts[i])``.
    """
    deltas = [None] * len(layers)
    i = start - 1
    d = seed
    if i < len(layers) - 1:
        d = d * _expand(masks[i], d)
    deltas[i] = d
    while i > 0:
        d = (d @ layers[i]) * _expand(masks[i - 1], d)
        i -= 1
        deltas[i] = d
    return deltas


def _expand(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    # broadcast a (N, n) mask against (N, S, n) seeds
    while mask.ndim < like.ndim:
        mask = mask[:, None, :]
    return mask


def batch_gradient(layers, X: np.ndarray, T: np.ndarray):
    """Mean MSE-loss gradient over the batch plus the mean loss."""
    acts, masks = forward_batch(layers, X)
    err = acts[-1] - T
    loss = float(np.mean(0.5 * np.sum(err * err, axis=1)))
    deltas = backprop_deltas(layers, masks, err, len(layers))
    n = X.shape[0]
    grads = [deltas[i].T @ acts[i] / n for i in range(len(layers))]
    return grads, loss


# -- per-sample API -------------------------------------------------------


def forward_plain(w: MlpParams, x) -> list[np.ndarray]:
    """Activations ``[y1, ..., yL]`` for a single input vector."""
    x = as_vector(x)
    check_sample_shapes(w, x)
    acts, _ = forward_batch(w.layers, x[None, :])
    return [a[0] for a in acts[1:]]


def loss_mse(prediction, target) -> float:
    p = as_vector(prediction)
    t = as_vector(target)
    if p.shape != t.shape:
        raise ShapeError(f"loss_mse: {p.shape} vs {t.shape}")
    d = p - t
    return 0.5 * float(d @ d)


def backward_plain(w: MlpParams, activations, x, target) -> GradientSet:
    """Gradient of the MSE loss w.r.t. each weight matrix for one sample.

    ``activations`` must be the output of ``forward_plain(w, x)``. ReLU
    derivative is taken as 0 wherever the pre-activation is <= 0, which for
    a bias-free layer is the same as the activation being 0.
    """
    x = as_vector(x)
    target = as_vector(target)
    check_sample_shapes(w, x, target)
    if len(activations) != len(w.layers):
        raise ShapeError("activation list does not match model depth")
    acts = [x[None, :]] + [np.asarray(a, dtype=np.float64)[None, :] for a in activations]
    masks = [a > 0.0 for a in acts[1:-1]]
    err = acts[-1] - target[None, :]
    deltas = backprop_deltas(w.layers, masks, err, len(w.layers))
    return [np.outer(deltas[i][0], acts[i][0]) for i in range(len(w.layers))]


def _stack(w: MlpParams, dataset: Sequence[Sample]):
    if not dataset:
        raise UsageError("dataset is empty")
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in dataset])
    T = np.stack([np.asarray(s.target, dtype=np.float64) for s in dataset])
    check_sample_shapes(w, X, T)
    return X, T


def local_gradient_plain(w: MlpParams, dataset: Sequence[Sample]) -> GradientSet:
    """Average per-sample gradient over a client's data."""
    X, T = _stack(w, dataset)
    grads, _ = batch_gradient(w.layers, X, T)
    return grads


def mean_loss(w: MlpParams, dataset: Sequence[Sample]) -> float:
    X, T = _stack(w, dataset)
    acts, _ = forward_batch(w.layers, X)
    err = acts[-1] - T
    return float(np.mean(0.5 * np.sum(err * err, axis=1)))


def weighted_average(items: Sequence[tuple[Sequence[np.ndarray], int]]) -> list[np.ndarray]:
    """``sum_k (n_k / n) * items_k`` layer by layer."""
    total = sum(int(n) for _, n in items)
    if total <= 0:
        raise UsageError("total sample count must be positive")
    out = None
    for mats, n in items:
        wk = int(n) / total
        if out is None:
            out = [wk * np.asarray(m, dtype=np.float64) for m in mats]
        else:
            for i, m in enumerate(mats):
                out[i] = out[i] + wk * m
    return out


def apply_update(w: MlpParams, grad: Sequence[np.ndarray], lr: float) -> MlpParams:
    if len(grad) != len(w.layers):
        raise ShapeError("gradient depth does not match model")
    for g, p in zip(grad, w.layers):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter shape {p.shape}")
    return MlpParams([p - lr * g for p, g in zip(w.layers, grad)])


def fedavg_step(w: MlpParams, grads: Sequence[tuple[GradientSet, int]], lr: float) -> MlpParams:
    return apply_update(w, weighted_average(grads), lr)
