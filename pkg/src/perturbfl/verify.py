"""Randomised invariant battery for the masking algebra.

Each instance draws a small network, a secret, an input and a target, then
checks every relation the recovery relies on against an independent plain
computation. Errors are normwise relative (see ``tensor.max_rel_error``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .client import (
    backward_perturbed,
    compute_sigma_beta,
    forward_perturbed,
    local_update,
    sigma_stack,
)
from .model import (
    LayerDims,
    MlpParams,
    Sample,
    backward_plain,
    forward_plain,
    local_gradient_plain,
    mean_loss,
)
from .perturbation import NoiseConfig, NoiseSecret, perturb, recover_gradient, sample_noise
from .server import aggregate, recovered_loss
from .tensor import max_rel_error

log = logging.getLogger(__name__)

TOLERANCES = {
    "forward_hidden": 1e-10,
    "forward_output": 1e-9,
    "gradient_identity": 1e-9,
    "group_sum": 1e-9,
    "batch_vs_sample": 1e-9,
    "telescoping": 1e-12,
    "recovery": 1e-9,
    "loss_recovery": 1e-9,
}


@dataclass
class Instance:
    seed: int
    params: MlpParams
    secret: NoiseSecret
    x: np.ndarray
    target: np.ndarray
    shard: list[Sample]

    @property
    def dims(self) -> LayerDims:
        return self.params.dims


def random_dims(rng: np.random.Generator, regression: bool = False) -> LayerDims:
    depth = int(rng.integers(2, 5))
    widths = [int(rng.integers(1, 9))] + [int(rng.integers(2, 13)) for _ in range(depth - 1)]
    widths.append(1 if regression else int(rng.integers(2, 7)))
    return LayerDims(tuple(widths))


def random_instance(seed: int, dims: LayerDims | None = None, noise: NoiseConfig | None = None,
                    regression: bool = False, shard_size: int = 5) -> Instance:
    rng = np.random.default_rng(seed)
    if dims is None:
        dims = random_dims(rng, regression)
    d = dims.dims
    # fan-in scaled weights keep every layer O(1) so relative errors are meaningful
    layers = [rng.standard_normal((d[l + 1], d[l])) / np.sqrt(d[l]) for l in range(dims.depth)]
    m = int(rng.integers(1, d[-1] + 1))
    secret = sample_noise(dims, m, rng, noise)
    x = rng.standard_normal(d[0])
    target = rng.standard_normal(d[-1])
    shard = [Sample(x, target)] + [Sample(rng.standard_normal(d[0]), rng.standard_normal(d[-1])) for _ in range(shard_size - 1)]
    return Instance(seed, MlpParams(layers), secret, x, target, shard)


def _scaled_hidden(secret: NoiseSecret, l: int, n: int) -> np.ndarray:
    """r^(l) with the conventions r^(0) = r^(L) = 1."""
    if 1 <= l <= len(secret.r_hidden):
        return secret.r_hidden[l - 1]
    return np.ones(n)


def check_instance(inst: Instance) -> dict[str, float]:
    w, secret, x, t = inst.params, inst.secret, inst.x, inst.target
    L = w.dims.depth
    d = w.dims.dims
    pm = perturb(w, secret)
    errs: dict[str, float] = {}

    # masked activations against scaled plain activations
    y = forward_plain(w, x)
    acts = forward_perturbed(pm, x)
    errs["forward_hidden"] = max(
        max_rel_error(acts.y_hat[l], secret.r_hidden[l] * y[l]) for l in range(L - 1)
    )
    errs["forward_output"] = max_rel_error(acts.y_hat[-1], y[-1] + acts.alpha * secret.r)

    # masked gradient assembled from the plain gradient and the full correction stack
    g_plain = backward_plain(w, y, x, t)
    g_hat = backward_perturbed(pm, acts, x, t)
    stacks = sigma_stack(pm, acts, x, t)
    sig_t, beta = compute_sigma_beta(pm, acts, x, t)
    ident, group = 0.0, 0.0
    for l in range(L):
        r_sigma = np.tensordot(secret.r, stacks[l], axes=1)
        rhs = g_plain[l] / secret.r_mul[l] + r_sigma - secret.upsilon * beta[l]
        ident = max(ident, max_rel_error(g_hat[l], rhs))
        grouped = sum(secret.gamma_groups[s] * sig_t[l][s] for s in range(secret.partition.m))
        group = max(group, max_rel_error(grouped, r_sigma))
    errs["gradient_identity"] = ident
    errs["group_sum"] = group

    # vectorised client path against the per-sample path
    single = local_update(pm, [Sample(x, t)])
    bvs = 0.0
    for l, u in enumerate(single.layers):
        bvs = max(bvs, max_rel_error(u.g_hat, g_hat[l]), max_rel_error(u.beta, beta[l]))
        for s in range(secret.partition.m):
            bvs = max(bvs, max_rel_error(u.sigma_tilde[s], sig_t[l][s]))
    errs["batch_vs_sample"] = bvs

    # masks cancel across consecutive layers
    tele = 0.0
    for l in range(1, L + 1):
        r_prev = _scaled_hidden(secret, l - 1, d[l - 1])
        r_cur = _scaled_hidden(secret, l, d[l])
        lhs = (secret.r_mul[l - 1] * w.layers[l - 1]) * r_prev[None, :]
        tele = max(tele, max_rel_error(lhs, r_cur[:, None] * w.layers[l - 1]))
    errs["telescoping"] = tele

    # server recovery of gradient and loss from a shard upload
    agg = aggregate([local_update(pm, inst.shard)])
    rec = recover_gradient(agg.g_hat, agg.sigma, agg.beta, secret, round_id=pm.round_id)
    plain = local_gradient_plain(w, inst.shard)
    errs["recovery"] = max(max_rel_error(a, b) for a, b in zip(rec, plain))
    errs["loss_recovery"] = max_rel_error(np.array([recovered_loss(agg, secret)]), np.array([mean_loss(w, inst.shard)]))
    return errs


@dataclass
class VerifyReport:
    seed: int
    count: int
    max_errors: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[int, str, float]] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "instances": self.count,
            "max_errors": self.max_errors,
            "tolerances": dict(TOLERANCES),
            "failures": [{"instance_seed": s, "check": c, "error": e} for s, c, e in self.failures],
            "ok": self.ok,
        }


def instance_seed(seed: int, i: int) -> int:
    return seed * 1_000_003 + i


def run_battery(seed: int = 0, count: int = 100, sizes: Sequence[Sequence[int]] | None = None,
                noise: NoiseConfig | None = None) -> VerifyReport:
    """Check ``count`` instances; every fourth one has a single output."""
    report = VerifyReport(seed, count, {k: 0.0 for k in TOLERANCES})
    for i in range(count):
        s = instance_seed(seed, i)
        dims = LayerDims(tuple(sizes[i % len(sizes)])) if sizes else None
        inst = random_instance(s, dims, noise, regression=(i % 4 == 0))
        report.shapes.append(inst.dims.dims)
        for name, err in check_instance(inst).items():
            report.max_errors[name] = max(report.max_errors[name], err)
            if not err <= TOLERANCES[name]:
                report.failures.append((s, name, err))
                log.info("instance seed %d: %s error %.3e exceeds %.0e", s, name, err, TOLERANCES[name])
    return report
