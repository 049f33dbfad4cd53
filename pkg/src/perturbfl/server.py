"""Round orchestration: perturb and broadcast, aggregate, recover, update."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .client import Client, ClientUpdate
from .config import RunConfig
from .data import FederatedData, batch_indices, build_federated
from .errors import ProtocolError, UsageError
from .model import LayerDims, MlpParams, apply_update, init_params, weighted_average
from .net import Broadcast, InProcChannel, TcpServerChannel
from .perturbation import NoiseConfig, NoiseSecret, Partition, PerturbedModel, perturb, recover_gradient, sample_noise


@dataclass
class RoundState:
    round_id: int
    secret: NoiseSecret | None
    broadcast: PerturbedModel
    expected_clients: set[int]
    mode: str = "perturbed"
    received: dict[int, ClientUpdate] = field(default_factory=dict)

    def receive(self, u: ClientUpdate) -> None:
        if u.round_id != self.round_id:
            raise ProtocolError(f"update from client {u.client_id} is for round {u.round_id}, not {self.round_id}")
        if u.client_id not in self.expected_clients:
            raise ProtocolError(f"unexpected client {u.client_id}")
        if u.client_id in self.received:
            raise ProtocolError(f"duplicate update from client {u.client_id}")
        self.received[u.client_id] = u

    @property
    def complete(self) -> bool:
        return set(self.received) == self.expected_clients


@dataclass
class RoundRecord:
    round_id: int
    mode: str
    train_loss: float
    grad_norms: list[float]
    wall_ms: float
    gradient: list[np.ndarray] | None = None


@dataclass
class Aggregate:
    g_hat: list[np.ndarray]
    sigma: list[list[np.ndarray]]
    beta: list[np.ndarray]
    loss_perturbed: float
    loss_cross: list[float]
    alpha_sq: float
    total_samples: int


def aggregate(updates: Sequence[ClientUpdate], *, expected: set[int] | None = None,
              round_id: int | None = None) -> Aggregate:
    """Sample-weighted average of every uploaded quantity, in client-id order."""
    if not updates:
        raise ProtocolError("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    rounds = {u.round_id for u in ups}
    if len(rounds) != 1 or (round_id is not None and rounds != {round_id}):
        raise ProtocolError(f"updates span rounds {sorted(rounds)}")
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in round")
    if expected is not None and set(ids) != set(expected):
        missing = sorted(set(expected) - set(ids))
        raise ProtocolError(f"missing updates from clients {missing}" if missing else "unexpected client updates")
    depth = len(ups[0].layers)
    m = len(ups[0].layers[0].sigma_tilde)
    for u in ups:
        if u.sample_count < 1:
            raise ProtocolError(f"client {u.client_id} reported {u.sample_count} samples")
        if len(u.layers) != depth or any(len(l.sigma_tilde) != m for l in u.layers):
            raise ProtocolError(f"client {u.client_id} payload shape differs from its peers")

    counts = [u.sample_count for u in ups]
    g_hat = weighted_average([([l.g_hat for l in u.layers], n) for u, n in zip(ups, counts)])
    beta = weighted_average([([l.beta for l in u.layers], n) for u, n in zip(ups, counts)])
    sigma = []
    for li in range(depth):
        if m:
            sigma.append(weighted_average([(u.layers[li].sigma_tilde, n) for u, n in zip(ups, counts)]))
        else:
            sigma.append([])
    total = sum(counts)
    wts = [n / total for n in counts]
    loss_p = sum(w * u.loss.perturbed for w, u in zip(wts, ups))
    cross = [sum(w * u.loss.group_cross[s] for w, u in zip(wts, ups)) for s in range(len(ups[0].loss.group_cross))]
    a2 = sum(w * u.loss.alpha_sq for w, u in zip(wts, ups))
    return Aggregate(g_hat, sigma, beta, loss_p, cross, a2, total)


def recovered_loss(agg: Aggregate, secret: NoiseSecret) -> float:
    """True training loss from the perturbed-loss statistics."""
    corr = sum(g * c for g, c in zip(secret.gamma_groups, agg.loss_cross))
    return agg.loss_perturbed - corr + 0.5 * secret.upsilon * agg.alpha_sq


def noise_rng(seed: int, round_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x4015E, round_id])


class Server:
    """Single-threaded round state machine.

    In ``perturbed`` mode every round draws a fresh secret, which is
    destroyed as soon as the round's gradient has been recovered.
    """

    def __init__(self, params: MlpParams, *, mode: str = "perturbed", lr: float = 0.1,
                 noise: NoiseConfig | None = None, m: int | None = None, seed: int = 0,
                 expected_clients: Sequence[int] = (0,), keep_gradients: bool = False):
        if mode not in ("plain", "perturbed"):
            raise UsageError(f"unknown mode {mode!r}")
        nL = params.dims.dims[-1]
        self.m = m if m is not None else ((noise.m if noise else None) or nL)
        if not 1 <= self.m <= nL:
            raise UsageError(f"m must be in [1, {nL}], got {self.m}")
        self.params = params
        self.mode = mode
        self.lr = lr
        self.noise = noise or NoiseConfig()
        self.seed = seed
        self.expected = set(int(c) for c in expected_clients)
        self.keep_gradients = keep_gradients
        self.round_id = 0
        self.state: RoundState | None = None
        self._t0 = 0.0

    def begin_round(self) -> tuple[RoundState, PerturbedModel]:
        self._t0 = time.perf_counter()
        dims = self.params.dims
        if self.mode == "perturbed":
            secret = sample_noise(dims, self.m, noise_rng(self.seed, self.round_id), self.noise,
                                  round_id=self.round_id)
            pm = perturb(self.params, secret)
        else:
            secret = None
            nL = dims.dims[-1]
            pm = PerturbedModel([w.copy() for w in self.params.layers], np.zeros(nL),
                                Partition((tuple(range(nL)),)), self.round_id)
        self.state = RoundState(self.round_id, secret, pm, set(self.expected), self.mode)
        return self.state, pm

    def broadcast_message(self) -> Broadcast:
        st = self.state
        return Broadcast(st.round_id, st.mode, st.broadcast)

    def receive(self, u: ClientUpdate) -> None:
        if self.state is None:
            raise ProtocolError("no round in progress")
        self.state.receive(u)

    def recover_and_update(self) -> tuple[MlpParams, RoundRecord]:
        st = self.state
        if st is None:
            raise ProtocolError("no round in progress")
        if not st.complete:
            missing = sorted(st.expected_clients - set(st.received))
            raise ProtocolError(f"round {st.round_id}: recovery attempted before updates from {missing}")
        agg = aggregate(list(st.received.values()), expected=st.expected_clients, round_id=st.round_id)
        if st.mode == "perturbed":
            grad = recover_gradient(agg.g_hat, agg.sigma, agg.beta, st.secret, round_id=st.round_id)
            loss = recovered_loss(agg, st.secret)
            st.secret.destroy()
        else:
            grad = agg.g_hat
            loss = agg.loss_perturbed
        self.params = apply_update(self.params, grad, self.lr)
        rec = RoundRecord(
            round_id=st.round_id,
            mode=st.mode,
            train_loss=float(loss),
            grad_norms=[float(np.linalg.norm(g)) for g in grad],
            wall_ms=(time.perf_counter() - self._t0) * 1e3,
            gradient=[g.copy() for g in grad] if self.keep_gradients else None,
        )
        self.state = None
        self.round_id += 1
        return self.params, rec


# -- whole runs -----------------------------------------------------------


@dataclass
class TrainingResult:
    records: list[RoundRecord]
    params: MlpParams
    initial: MlpParams
    dims: LayerDims


def model_dims(cfg: RunConfig, data: FederatedData) -> LayerDims:
    return LayerDims((data.dataset.feature_dim, *cfg.hidden, data.dataset.target_dim))


def initial_params(cfg: RunConfig, dims: LayerDims) -> MlpParams:
    return init_params(dims, np.random.default_rng([cfg.seed, 0x1A17]), cfg.init_std)


def make_client(cfg: RunConfig, data: FederatedData, k: int) -> Client:
    shard = data.shard_samples(k)
    if cfg.batch.policy != "minibatch":
        return Client(k, shard)
    n, size, seed = len(shard), cfg.batch.size, cfg.seed

    def batch_fn(round_id):
        return batch_indices(n, size, seed, round_id, k)

    return Client(k, shard, batch_fn)


def make_server(cfg: RunConfig, params: MlpParams, keep_gradients: bool = False) -> Server:
    return Server(params, mode=cfg.mode, lr=cfg.lr, noise=cfg.noise, m=cfg.m, seed=cfg.seed,
                  expected_clients=range(cfg.clients), keep_gradients=keep_gradients)


def run_rounds(server: Server, channel, rounds: int,
               on_round: Callable[[int, MlpParams, RoundRecord], None] | None = None) -> list[RoundRecord]:
    records = []
    for _ in range(rounds):
        before = server.params
        state, _ = server.begin_round()
        channel.broadcast(server.broadcast_message())
        for u in channel.collect(state.round_id, len(state.expected_clients)):
            server.receive(u)
        _, rec = server.recover_and_update()
        channel.round_done(rec.round_id)
        records.append(rec)
        if on_round is not None:
            on_round(rec.round_id, before, rec)
    return records


def run_training(cfg: RunConfig, *, data: FederatedData | None = None, channel=None,
                 keep_gradients: bool = False, on_round=None) -> TrainingResult:
    """Run ``cfg.rounds`` rounds end to end.

    Without an explicit ``channel`` the in-proc transport is used when
    ``cfg.transport.kind == "inproc"``; for TCP a listening server channel is
    opened and waits for ``cfg.clients`` joins.
    """
    if data is None:
        data = build_federated(cfg.dataset, cfg.clients, cfg.split, cfg.seed)
    dims = model_dims(cfg, data)
    if cfg.m is not None and cfg.m > dims.dims[-1]:
        raise UsageError(f"m={cfg.m} exceeds output width {dims.dims[-1]}")
    w0 = initial_params(cfg, dims)
    server = make_server(cfg, w0, keep_gradients)
    own_channel = channel is None
    if channel is None:
        if cfg.transport.kind == "inproc":
            channel = InProcChannel([make_client(cfg, data, k) for k in range(cfg.clients)])
        else:
            t = cfg.transport
            channel = TcpServerChannel(t.host, t.port, cfg.clients, t.timeout_s, t.max_frame)
        channel.open()
    try:
        records = run_rounds(server, channel, cfg.rounds, on_round)
    finally:
        if own_channel:
            channel.close()
    return TrainingResult(records, server.params, w0, dims)


# -- outputs --------------------------------------------------------------


def metrics_csv(records: Sequence[RoundRecord], depth: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "mode", "loss"] + [f"grad_norm_l{i + 1}" for i in range(depth)] + ["wall_ms"])
    for r in records:
        w.writerow([r.round_id, r.mode, repr(r.train_loss)] + [repr(g) for g in r.grad_norms] + [f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def param_hash(params: MlpParams) -> str:
    """SHA-256 over the exact little-endian float64 bytes of every layer."""
    h = hashlib.sha256()
    for w in params.layers:
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return h.hexdigest()


def rounded_param_hash(params: MlpParams, sig_digits: int = 6) -> str:
    """Hash of the parameters rounded to ``sig_digits`` significant digits."""
    h = hashlib.sha256()
    fmt = f"{{:.{sig_digits - 1}e}}"
    for w in params.layers:
        for v in w.ravel():
            s = fmt.format(float(v))
            if float(s) == 0.0:
                s = fmt.format(0.0)
            h.update(s.encode())
            h.update(b",")
        h.update(b";")
    return h.hexdigest()


def manifest(cfg: RunConfig, result: TrainingResult) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "dims": list(result.dims.dims),
        "rounds_completed": len(result.records),
        "final_param_hash": rounded_param_hash(result.params),
        "final_param_sha256": param_hash(result.params),
    }


def write_outputs(cfg: RunConfig, result: TrainingResult, metrics_path=None, manifest_path=None) -> None:
    metrics_path = metrics_path or cfg.metrics_csv
    manifest_path = manifest_path or cfg.manifest
    if metrics_path:
        with open(metrics_path, "w", encoding="utf-8", newline="") as f:
            f.write(metrics_csv(result.records, result.dims.depth))
    if manifest_path:
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(manifest(cfg, result), f, indent=2)
            f.write("\n")
