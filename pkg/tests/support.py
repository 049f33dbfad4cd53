"""Shared builders for the test-suite."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from perturbfl.client import forward_perturbed, perturbed_loss
from perturbfl.config import RunConfig
from perturbfl.data import build_federated
from perturbfl.model import LayerDims, MlpParams, local_gradient_plain, weighted_average
from perturbfl.net import TcpServerChannel, run_tcp_client
from perturbfl.perturbation import NoiseSecret, Partition, PerturbedModel
from perturbfl.server import make_client, run_training
from perturbfl.tensor import max_rel_error


def tiny_params() -> MlpParams:
    return MlpParams([np.array([[2.0]]), np.array([[3.0]])])


def tiny_secret() -> NoiseSecret:
    return NoiseSecret(
        dims=LayerDims((1, 1, 1)),
        r_hidden=[np.array([4.0])],
        r_add=np.array([0.5]),
        partition=Partition(((0,),)),
        gamma_groups=np.array([2.0]),
    )


def run_config(dims, clients, rounds, *, mode="perturbed", seed=0, n_samples=400, **extra) -> RunConfig:
    """Synthetic run for the given layer widths: regression for one output, classes otherwise."""
    n_in, *hidden, n_out = dims
    if n_out == 1:
        dataset = {"kind": "synthetic_regression", "n_features": n_in, "n_samples": n_samples, "seed": seed}
    else:
        dataset = {"kind": "synthetic_classification", "n_features": n_in, "n_classes": n_out,
                   "n_samples": n_samples, "seed": seed}
    base = dict(dataset=dataset, hidden=hidden, mode=mode, clients=clients, rounds=rounds,
                lr=0.05, seed=seed, init_std=0.1)
    base.update(extra)
    return RunConfig.from_dict(base)


@dataclass
class LosslessResult:
    dims: tuple
    clients: int
    rounds: int
    max_round_error: float = 0.0
    final_error: float = float("nan")
    loss_error: float = float("nan")
    moved: float = float("nan")
    seconds: float = 0.0
    rounds_checked: int = 0
    stopped_early: bool = False
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_round_error <= 1e-9 and self.final_error <= 1e-6 and not self.stopped_early


class _Violation(Exception):
    pass


def check_lossless(dims, clients, rounds=200, seed=0, stop_on_failure=False) -> LosslessResult:
    """Perturbed run against an independent plain oracle and against a plain run.

    Every round, the server's recovered gradient is compared with the
    sample-weighted average of per-client plain gradients at the same
    weights. At the end the perturbed and plain runs' weights are compared.
    """
    res = LosslessResult(tuple(dims), clients, rounds)
    t0 = time.perf_counter()
    cfg = run_config(dims, clients, rounds, seed=seed)
    data = build_federated(cfg.dataset, cfg.clients, cfg.split, cfg.seed)
    shards = [data.shard_samples(k) for k in range(clients)]

    def on_round(round_id, w_before, rec):
        oracle = weighted_average([(local_gradient_plain(w_before, s), len(s)) for s in shards])
        err = max(max_rel_error(a, b) for a, b in zip(rec.gradient, oracle))
        if not err <= res.max_round_error:
            res.max_round_error = err if err == err else float("inf")
        res.errors.append(err)
        res.rounds_checked += 1
        if stop_on_failure and not err <= 1e-9:
            raise _Violation

    try:
        pert = run_training(cfg, data=data, keep_gradients=True, on_round=on_round)
    except _Violation:
        res.stopped_early = True
        res.seconds = time.perf_counter() - t0
        return res
    plain = run_training(cfg.with_overrides(mode="plain"), data=data)
    res.final_error = max(max_rel_error(a, b) for a, b in zip(pert.params.layers, plain.params.layers))
    res.loss_error = max(abs(a.train_loss - b.train_loss) / max(abs(b.train_loss), 1e-300)
                         for a, b in zip(pert.records, plain.records)) if rounds else 0.0
    res.moved = max(max_rel_error(a, b) for a, b in zip(plain.params.layers, plain.initial.layers))
    res.seconds = time.perf_counter() - t0
    return res


def perturbed_fd(pm, x, t, h=1e-6):
    """Central differences of the perturbed loss in the masked weights, NaN near kinks."""
    base = [y > 0 for y in forward_perturbed(pm, x).y_hat[:-1]]
    out = []
    for li, layer in enumerate(pm.layers):
        g = np.empty_like(layer)
        for idx in np.ndindex(layer.shape):
            vals, crossed = [], False
            for sign in (1, -1):
                layers = [w.copy() for w in pm.layers]
                layers[li][idx] += sign * h * max(1.0, abs(layer[idx]))
                acts = forward_perturbed(PerturbedModel(layers, pm.r_add, pm.partition), x)
                crossed |= any(np.any((y > 0) != b) for y, b in zip(acts.y_hat[:-1], base))
                vals.append(perturbed_loss(acts.y_hat[-1], t))
            step = 2 * h * max(1.0, abs(layer[idx]))
            g[idx] = np.nan if crossed else (vals[0] - vals[1]) / step
        out.append(g)
    return out


def tcp_run(cfg, data, **client_kw):
    ch = TcpServerChannel("127.0.0.1", 0, cfg.clients, timeout_s=10)
    host, port = ch.address
    errors, rounds = [], []

    def join(k):
        try:
            rounds.append(run_tcp_client(host, port, make_client(cfg, data, k), timeout_s=10, **client_kw))
        except Exception as exc:  # surfaced to the test thread below
            errors.append(exc)

    threads = [threading.Thread(target=join, args=(k,)) for k in range(cfg.clients)]
    for t in threads:
        t.start()
    try:
        ch.open()
        res = run_training(cfg, data=data, channel=ch)
    finally:
        ch.close()
        for t in threads:
            t.join(10)
    return res, rounds, errors
