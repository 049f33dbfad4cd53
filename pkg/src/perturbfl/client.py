"""Client side of the perturbed protocol.

A client only ever holds the broadcast ``PerturbedModel`` (masked weights,
``r_add`` and the output partition). It trains on the masked weights as if
they were real and uploads, per layer, the perturbed gradient together with
``m`` group-contracted correction terms and the ``beta`` term the server
needs to cancel the noise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .model import Sample, backprop_deltas, batch_gradient, forward_batch
from .perturbation import PerturbedModel
from .tensor import as_vector

# Mutation hook for the verification battery: when set, sigma-tilde terms are
# emitted in reversed group order. Never enabled outside tests.
_SIGMA_ORDER_BUG = False


@contextlib.contextmanager
def injected_sigma_order_bug():
    global _SIGMA_ORDER_BUG
    prev = _SIGMA_ORDER_BUG
    _SIGMA_ORDER_BUG = True
    try:
        yield
    finally:
        _SIGMA_ORDER_BUG = prev


@dataclass
class PerturbedActivations:
    y_hat: list[np.ndarray]
    alpha: float


@dataclass
class LayerUpdate:
    g_hat: np.ndarray
    sigma_tilde: list[np.ndarray]
    beta: np.ndarray


@dataclass
class LossStats:
    """Per-client averages that let the server recover the true loss.

    true loss = perturbed - sum_s gamma_s * group_cross[s] + upsilon/2 * alpha_sq
    """

    perturbed: float
    group_cross: list[float]
    alpha_sq: float


@dataclass
class ClientUpdate:
    client_id: int
    round_id: int
    sample_count: int
    layers: list[LayerUpdate]
    loss: LossStats


def forward_perturbed(pm: PerturbedModel, x) -> PerturbedActivations:
    x = as_vector(x)
    if x.shape[0] != pm.layers[0].shape[1]:
        raise ShapeError(f"input has {x.shape[0]} features, model expects {pm.layers[0].shape[1]}")
    acts, _ = forward_batch(pm.layers, x[None, :])
    y_hat = [a[0] for a in acts[1:]]
    return PerturbedActivations(y_hat=y_hat, alpha=float(np.sum(y_hat[-2])))


def perturbed_loss(y_hat_last, target) -> float:
    p = as_vector(y_hat_last)
    t = as_vector(target)
    if p.shape != t.shape:
        raise ShapeError(f"perturbed_loss: {p.shape} vs {t.shape}")
    d = p - t
    return 0.5 * float(d @ d)


def _acts_from(x, acts: PerturbedActivations):
    full = [x[None, :]] + [np.asarray(a, dtype=np.float64)[None, :] for a in acts.y_hat]
    masks = [a > 0.0 for a in full[1:-1]]
    return full, masks


def backward_perturbed(pm: PerturbedModel, acts: PerturbedActivations, x, target) -> list[np.ndarray]:
    """Gradient of the perturbed loss w.r.t. each perturbed weight matrix."""
    x = as_vector(x)
    target = as_vector(target)
    if target.shape[0] != pm.layers[-1].shape[0] or x.shape[0] != pm.layers[0].shape[1]:
        raise ShapeError("sample does not match perturbed model dims")
    full, masks = _acts_from(x, acts)
    err = full[-1] - target[None, :]
    deltas = backprop_deltas(pm.layers, masks, err, len(pm.layers))
    return [np.outer(deltas[i][0], full[i][0]) for i in range(len(pm.layers))]


def output_jacobians(pm: PerturbedModel, acts: PerturbedActivations, x):
    """Per-layer Jacobians of the perturbed prediction and of ``alpha``.

    Returns ``(dy, da)`` where ``dy[l]`` has shape (n_L, n_l, n_{l-1}) with
    ``dy[l][i] = d y_hat_i / d W_hat^(l)`` and ``da[l]`` has shape
    (n_l, n_{l-1}); ``da`` is zero for the output layer. Computed with one
    backward pass per output coordinate plus one for ``alpha``.
    """
    x = as_vector(x)
    full, masks = _acts_from(x, acts)
    L = len(pm.layers)
    nL = pm.layers[-1].shape[0]
    seeds = np.eye(nL)[None, :, :]
    d_out = backprop_deltas(pm.layers, masks, seeds, L)
    a_seed = np.ones((1, pm.layers[-2].shape[0]))
    d_alpha = backprop_deltas(pm.layers, masks, a_seed, L - 1)
    dy, da = [], []
    for i in range(L):
        prev = full[i][0]
        dy.append(d_out[i][0][:, :, None] * prev[None, None, :])
        if d_alpha[i] is None:
            da.append(np.zeros(pm.layers[i].shape))
        else:
            da.append(np.outer(d_alpha[i][0], prev))
    return dy, da


def sigma_stack(pm: PerturbedModel, acts: PerturbedActivations, x, target) -> list[np.ndarray]:
    """Full per-output correction stack for one sample, shape (n_L, n_l, n_{l-1}).

    ``sigma[i] = alpha * d y_hat_i / dW_hat + (y_hat_i - target_i) * d alpha / dW_hat``.
    Clients never upload this; it is materialised for verification.
    """
    target = as_vector(target)
    dy, da = output_jacobians(pm, acts, x)
    resid = acts.y_hat[-1] - target
    return [acts.alpha * j + resid[:, None, None] * a[None, :, :] for j, a in zip(dy, da)]


def compute_sigma_beta(pm: PerturbedModel, acts: PerturbedActivations, x, target):
    """Group-contracted correction terms and beta for one sample.

    Returns ``(sigma_tilde, beta)``; ``sigma_tilde[l]`` is a list of ``m``
    matrices, ``sum_{i in I_s} r_add_i * sigma[i]``.
    """
    stacks = sigma_stack(pm, acts, x, target)
    _, da = output_jacobians(pm, acts, x)
    groups = list(pm.partition.groups)
    if _SIGMA_ORDER_BUG:
        groups = groups[::-1]
    sigma_tilde = []
    for st in stacks:
        sigma_tilde.append([np.tensordot(pm.r_add[list(g)], st[list(g)], axes=1) for g in groups])
    beta = [acts.alpha * a for a in da]
    return sigma_tilde, beta


def _batch_payload(pm: PerturbedModel, X: np.ndarray, T: np.ndarray):
    """Averaged (g_hat, sigma_tilde, beta) and loss statistics over a batch.

    Same algebra as the per-sample functions, vectorised over samples: the
    n_L unit-seed pullbacks are contracted with ``r_add`` per group before the
    outer product with the layer input, which avoids materialising the
    (N, n_L, n_l, n_{l-1}) stack.
    """
    layers = pm.layers
    L = len(layers)
    N = X.shape[0]
    acts, masks = forward_batch(layers, X)
    y_last = acts[-1]
    alpha = acts[-2].sum(axis=1)  # (N,)
    resid = y_last - T  # (N, n_L)

    deltas = backprop_deltas(layers, masks, resid, L)
    seeds = np.broadcast_to(np.eye(layers[-1].shape[0]), (N,) + (layers[-1].shape[0],) * 2)
    d_out = backprop_deltas(layers, masks, seeds, L)  # (N, n_L, n_l)
    d_alpha = backprop_deltas(layers, masks, np.ones((N, layers[-2].shape[0])), L - 1)

    groups = list(pm.partition.groups)
    if _SIGMA_ORDER_BUG:
        groups = groups[::-1]
    # C[s, i] = r_add_i if i in group s else 0
    C = np.zeros((len(groups), layers[-1].shape[0]))
    for s, g in enumerate(groups):
        C[s, list(g)] = pm.r_add[list(g)]
    cross = resid @ C.T  # (N, m): sum_{i in I_s} r_add_i (y_hat_i - t_i)

    out = []
    for i in range(L):
        prev = acts[i]  # (N, n_{l-1})
        g_hat = deltas[i].T @ prev / N
        contracted = np.einsum("si,nip->nsp", C, d_out[i])  # (N, m, n_l)
        lead = alpha[:, None, None] * contracted
        if d_alpha[i] is not None:
            lead = lead + cross[:, :, None] * d_alpha[i][:, None, :]
            beta = (alpha[:, None] * d_alpha[i]).T @ prev / N
        else:
            beta = np.zeros(layers[i].shape)
        sig = np.einsum("nsp,nq->spq", lead, prev) / N
        out.append(LayerUpdate(g_hat=g_hat, sigma_tilde=[sig[s] for s in range(len(groups))], beta=beta))

    loss = LossStats(
        perturbed=float(np.mean(0.5 * np.sum(resid * resid, axis=1))),
        group_cross=[float(v) for v in np.mean(alpha[:, None] * cross, axis=0)],
        alpha_sq=float(np.mean(alpha * alpha)),
    )
    return out, loss


def _stack_shard(shard: Sequence[Sample]):
    if not shard:
        raise UsageError("client shard is empty")
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in shard])
    T = np.stack([np.asarray(s.target, dtype=np.float64) for s in shard])
    return X, T


def local_update(pm: PerturbedModel, shard: Sequence[Sample], *, client_id: int = 0) -> ClientUpdate:
    X, T = _stack_shard(shard)
    if X.shape[1] != pm.layers[0].shape[1] or T.shape[1] != pm.layers[-1].shape[0]:
        raise ShapeError("shard does not match perturbed model dims")
    layers, loss = _batch_payload(pm, X, T)
    return ClientUpdate(
        client_id=client_id,
        round_id=pm.round_id,
        sample_count=len(shard),
        layers=layers,
        loss=loss,
    )


def local_update_plain(layers: Sequence[np.ndarray], shard: Sequence[Sample], *, client_id: int = 0, round_id: int = 0) -> ClientUpdate:
    """Unperturbed FedAvg upload: true gradient, no correction terms."""
    X, T = _stack_shard(shard)
    check_sample_shapes_layers(layers, X, T)
    grads, loss = batch_gradient(layers, X, T)
    return ClientUpdate(
        client_id=client_id,
        round_id=round_id,
        sample_count=len(shard),
        layers=[LayerUpdate(g_hat=g, sigma_tilde=[], beta=np.zeros_like(g)) for g in grads],
        loss=LossStats(perturbed=loss, group_cross=[], alpha_sq=0.0),
    )


def check_sample_shapes_layers(layers, X, T) -> None:
    if X.shape[1] != layers[0].shape[1] or T.shape[1] != layers[-1].shape[0]:
        raise ShapeError("shard does not match model dims")


class Client:
    """Stateful participant holding a private shard.

    ``batch_fn(round_id)`` returns the indices used in a round; the default
    is the whole shard.
    """

    def __init__(self, client_id: int, shard: Sequence[Sample], batch_fn=None):
        if not shard:
            raise UsageError(f"client {client_id} has no data")
        self.client_id = int(client_id)
        self.shard = list(shard)
        self.batch_fn = batch_fn

    def batch(self, round_id: int) -> list[Sample]:
        if self.batch_fn is None:
            return self.shard
        return [self.shard[i] for i in self.batch_fn(round_id)]

    def handle_broadcast(self, pm: PerturbedModel, plain: bool = False) -> ClientUpdate:
        data = self.batch(pm.round_id)
        if plain:
            return local_update_plain(pm.layers, data, client_id=self.client_id, round_id=pm.round_id)
        return local_update(pm, data, client_id=self.client_id)
