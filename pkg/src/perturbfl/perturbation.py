"""Server-side round noise, parameter masking and gradient recovery.

The server masks the global weights with a per-layer multiplicative matrix
that telescopes through the ReLU layers, plus an additive last-layer term
whose per-group scale ``gamma`` is never disclosed. Clients get the masked
weights, the additive vector ``r_add`` and the output-class partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ProtocolError, ShapeError, UsageError
from .model import LayerDims, MlpParams
from .tensor import hadamard, hadamard_reciprocal


@dataclass(frozen=True)
class NoiseConfig:
    mult_low: float = 0.1
    mult_high: float = 10.0
    gamma_low: float = 1.0
    # recovery rounding grows with |gamma|^2; above ~2 converged runs pass 1e-9
    gamma_high: float = 2.0
    add_low: float = -1.0
    add_high: float = 1.0
    min_gap: float = 1e-3
    m: int | None = None  # number of output groups; None means n_L

    def __post_init__(self):
        if not 0 < self.mult_low <= self.mult_high:
            raise UsageError("multiplicative noise bounds must satisfy 0 < low <= high")
        if not 0 < self.gamma_low <= self.gamma_high:
            raise UsageError("gamma magnitude bounds must satisfy 0 < low <= high")
        if not self.add_low < self.add_high:
            raise UsageError("additive noise bounds must satisfy low < high")
        if self.min_gap < 0:
            raise UsageError("min_gap must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "NoiseConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown noise config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of the output indices ``0..n_L-1`` by ``m`` groups."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise UsageError("partition has no groups")
        flat = [i for g in groups for i in g]
        if any(len(g) == 0 for g in groups):
            raise UsageError("partition contains an empty group")
        if sorted(flat) != list(range(len(flat))):
            raise UsageError("partition groups must be disjoint and cover 0..n_L-1")

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.groups)

    def indicator(self) -> np.ndarray:
        """(m, n_L) 0/1 membership matrix."""
        P = np.zeros((self.m, self.size))
        for s, g in enumerate(self.groups):
            P[s, list(g)] = 1.0
        return P

    def group_of(self) -> np.ndarray:
        out = np.empty(self.size, dtype=np.int64)
        for s, g in enumerate(self.groups):
            out[list(g)] = s
        return out


def random_partition(n: int, m: int, rng: np.random.Generator) -> Partition:
    """Random permutation of ``0..n-1`` chopped into ``m`` near-equal groups."""
    if not 1 <= m <= n:
        raise UsageError(f"m must be in [1, {n}], got {m}")
    perm = rng.permutation(n)
    return Partition(tuple(tuple(sorted(int(i) for i in chunk)) for chunk in np.array_split(perm, m)))


@dataclass
class NoiseSecret:
    dims: LayerDims
    r_hidden: list[np.ndarray]
    r_add: np.ndarray
    partition: Partition
    gamma_groups: np.ndarray
    round_id: int = 0
    # derived in __post_init__
    gamma: np.ndarray = field(init=False)
    r: np.ndarray = field(init=False)
    upsilon: float = field(init=False)
    r_mul: list[np.ndarray] = field(init=False)
    r_add_matrix: np.ndarray = field(init=False)
    consumed: bool = field(default=False, init=False)

    def __post_init__(self):
        d = self.dims.dims
        L = self.dims.depth
        self.r_hidden = [np.asarray(v, dtype=np.float64) for v in self.r_hidden]
        self.r_add = np.asarray(self.r_add, dtype=np.float64)
        self.gamma_groups = np.asarray(self.gamma_groups, dtype=np.float64)
        if len(self.r_hidden) != L - 1:
            raise ShapeError(f"need {L - 1} hidden noise vectors, got {len(self.r_hidden)}")
        for l, v in enumerate(self.r_hidden, start=1):
            if v.shape != (d[l],):
                raise ShapeError(f"r^({l}) must have length {d[l]}")
            if np.any(v <= 0):
                raise UsageError(f"r^({l}) must be strictly positive")
        if self.r_add.shape != (d[-1],) or self.partition.size != d[-1]:
            raise ShapeError("additive noise / partition do not match the output width")
        if self.gamma_groups.shape != (self.partition.m,):
            raise ShapeError("need one gamma per partition group")

        self.gamma = self.gamma_groups[self.partition.group_of()]
        self.r = self.gamma * self.r_add
        self.upsilon = float(self.r @ self.r)
        self.r_mul = build_multiplicative(self.dims, self.r_hidden)
        self.r_add_matrix = np.repeat(self.r[:, None], d[-2], axis=1)

    def destroy(self) -> None:
        """Zero the secret material; any later use is a protocol error."""
        for v in self.r_hidden:
            v.fill(0.0)
        for R in self.r_mul:
            R.fill(0.0)
        self.gamma_groups.fill(0.0)
        self.gamma.fill(0.0)
        self.r.fill(0.0)
        self.r_add_matrix.fill(0.0)
        self.upsilon = 0.0
        self.consumed = True

    def is_identity(self) -> bool:
        return all(np.all(v == 1.0) for v in self.r_hidden) and not np.any(self.r)


def build_multiplicative(dims: LayerDims, r_hidden: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Per-layer multiplicative masks.

    Layer 1 scales row i by r1_i; middle layers use r_l[i] / r_{l-1}[j]; the
    output layer undoes the last hidden scaling with 1 / r_{L-1}[j].
    """
    d = dims.dims
    L = dims.depth
    out = []
    for l in range(1, L + 1):
        if l == 1:
            R = np.repeat(r_hidden[0][:, None], d[0], axis=1)
        elif l < L:
            R = r_hidden[l - 1][:, None] / r_hidden[l - 2][None, :]
        else:
            R = np.repeat((1.0 / r_hidden[L - 2])[None, :], d[L], axis=0)
        out.append(R)
    return out


def _sample_r_add(n: int, cfg: NoiseConfig, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    if n > 1 and cfg.min_gap * (n - 1) >= cfg.add_high - cfg.add_low:
        raise UsageError(f"cannot place {n} additive entries with gap {cfg.min_gap}")
    for _ in range(max_tries):
        v = rng.uniform(cfg.add_low, cfg.add_high, size=n)
        if n == 1 or np.min(np.diff(np.sort(v))) >= cfg.min_gap:
            return v
    raise UsageError("additive noise rejection sampling did not converge")


def sample_noise(
    dims: LayerDims,
    m: int | None,
    rng: np.random.Generator,
    config: NoiseConfig | None = None,
    *,
    round_id: int = 0,
    r_add: np.ndarray | None = None,
    partition: Partition | None = None,
) -> NoiseSecret:
    """Draw a fresh one-time secret.

    ``r_add`` and ``partition`` may be pinned, which is how a client-side
    adversary enumerates secrets consistent with what it was shown.
    """
    cfg = config or NoiseConfig()
    d = dims.dims
    nL = d[-1]
    if m is None:
        m = partition.m if partition is not None else (cfg.m or nL)
    if not 1 <= m <= nL:
        raise UsageError(f"m must be in [1, {nL}], got {m}")

    lo, hi = np.log(cfg.mult_low), np.log(cfg.mult_high)
    r_hidden = [np.exp(rng.uniform(lo, hi, size=d[l])) for l in range(1, dims.depth)]
    if r_add is None:
        r_add = _sample_r_add(nL, cfg, rng)
    if partition is None:
        partition = random_partition(nL, m, rng)
    elif partition.m != m:
        raise UsageError("pinned partition disagrees with m")
    mags = rng.uniform(cfg.gamma_low, cfg.gamma_high, size=partition.m)
    signs = np.where(rng.random(partition.m) < 0.5, -1.0, 1.0)
    return NoiseSecret(
        dims=dims,
        r_hidden=r_hidden,
        r_add=np.array(r_add, dtype=np.float64),
        partition=partition,
        gamma_groups=signs * mags,
        round_id=round_id,
    )


def identity_noise(dims: LayerDims, round_id: int = 0) -> NoiseSecret:
    """r^(l) = 1, gamma = 0: perturbation is a no-op."""
    d = dims.dims
    nL = d[-1]
    return NoiseSecret(
        dims=dims,
        r_hidden=[np.ones(d[l]) for l in range(1, dims.depth)],
        r_add=np.linspace(-1.0, 1.0, nL) if nL > 1 else np.zeros(1),
        partition=Partition((tuple(range(nL)),)),
        gamma_groups=np.zeros(1),
        round_id=round_id,
    )


@dataclass
class PerturbedModel:
    """What the server broadcasts. Deliberately holds no secret-derived field."""

    layers: list[np.ndarray]
    r_add: np.ndarray
    partition: Partition
    round_id: int = 0

    @property
    def dims(self) -> LayerDims:
        return LayerDims((self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers))


def _check_live(secret: NoiseSecret) -> None:
    if secret.consumed:
        raise ProtocolError(f"noise secret for round {secret.round_id} was already used")


def perturb(w: MlpParams, secret: NoiseSecret) -> PerturbedModel:
    _check_live(secret)
    if w.dims != secret.dims:
        raise ShapeError(f"model dims {w.dims.dims} vs secret dims {secret.dims.dims}")
    L = len(w.layers)
    layers = [hadamard(R, W) for R, W in zip(secret.r_mul, w.layers)]
    layers[L - 1] = layers[L - 1] + secret.r_add_matrix
    return PerturbedModel(
        layers=layers,
        r_add=secret.r_add.copy(),
        partition=secret.partition,
        round_id=secret.round_id,
    )


def unperturb(pm: PerturbedModel, secret: NoiseSecret) -> MlpParams:
    """Invert the masking for a given secret.

    With the true secret this returns the true weights; with any other
    secret it returns a different, equally consistent model.
    """
    _check_live(secret)
    if pm.dims != secret.dims:
        raise ShapeError("perturbed model and secret disagree on dims")
    L = len(pm.layers)
    out = []
    for l, (R, What) in enumerate(zip(secret.r_mul, pm.layers), start=1):
        if l == L:
            What = What - secret.r_add_matrix
        out.append(hadamard(hadamard_reciprocal(R), What))
    return MlpParams(out)


def recover_gradient(agg_g_hat, agg_sigma, agg_beta, secret: NoiseSecret, *, round_id: int | None = None):
    """True aggregated gradient from aggregated uploads.

    Per layer: ``R o (g_hat - sum_s gamma_s * sigma_s + upsilon * beta)``.
    ``agg_sigma[l]`` is the list of ``m`` group terms for layer ``l``.
    """
    _check_live(secret)
    if round_id is not None and round_id != secret.round_id:
        raise ProtocolError(f"updates for round {round_id} cannot be recovered with round {secret.round_id} secret")
    L = secret.dims.depth
    if not (len(agg_g_hat) == len(agg_sigma) == len(agg_beta) == L):
        raise ShapeError("aggregate depth does not match the secret")
    out = []
    for l in range(L):
        R = secret.r_mul[l]
        g_hat = np.asarray(agg_g_hat[l], dtype=np.float64)
        beta = np.asarray(agg_beta[l], dtype=np.float64)
        sig = agg_sigma[l]
        if g_hat.shape != R.shape or beta.shape != R.shape:
            raise ShapeError(f"layer {l + 1}: aggregate shape mismatch")
        if len(sig) != secret.partition.m:
            raise ShapeError(f"layer {l + 1}: expected {secret.partition.m} sigma terms, got {len(sig)}")
        corr = np.zeros_like(g_hat)
        for s in range(secret.partition.m):
            corr = corr + secret.gamma_groups[s] * np.asarray(sig[s], dtype=np.float64)
        out.append(hadamard(R, g_hat - corr + secret.upsilon * beta))
    return out
