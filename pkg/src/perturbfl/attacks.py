"""What a curious client can and cannot infer from a perturbed round.

Three experiments, all driven only by client-visible material:

* ambiguity witnesses: any fresh secret maps the broadcast back to a
  different, perfectly consistent set of true weights;
* prediction guessing: given the masked output, the per-sample scalar
  ``alpha``, ``r_add`` and the partition, guess the true argmax class;
* gradient ambiguity: an observed upload is consistent with many different
  true gradients, one per candidate secret.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .client import ClientUpdate
from .errors import ShapeError, UsageError
from .model import LayerDims, MlpParams
from .perturbation import (
    NoiseConfig,
    NoiseSecret,
    Partition,
    PerturbedModel,
    perturb,
    sample_noise,
    unperturb,
)
from .tensor import hadamard, hadamard_reciprocal, max_rel_error

NOT_APPLICABLE = "not-applicable"

# Attack experiments default to a wide gamma range. The training default is
# narrower to keep recovery near float64 precision, and with it the argmax
# adversary measurably beats 1/m (about 0.150 at m = nL = 10).
WIDE_NOISE = NoiseConfig(gamma_high=1e3)


# -- parameter ambiguity ------------------------------------------------------


@dataclass
class AmbiguityWitness:
    alternative_params: MlpParams
    alternative_secret: NoiseSecret
    target: PerturbedModel

    def reperturb_error(self) -> float:
        """Largest per-layer relative gap between perturb(W', secret') and the target."""
        again = perturb(self.alternative_params, self.alternative_secret)
        return max(max_rel_error(a, b) for a, b in zip(again.layers, self.target.layers))


def ambiguity_witness(
    target: PerturbedModel,
    rng: np.random.Generator,
    config: NoiseConfig | None = None,
) -> AmbiguityWitness:
    """Invert the broadcast under a freshly sampled secret.

    The public parts (``r_add`` and the partition) are pinned to what the
    client saw, so the witness is consistent with the whole observation.
    """
    secret = sample_noise(
        target.dims,
        target.partition.m,
        rng,
        config or WIDE_NOISE,
        round_id=target.round_id,
        r_add=target.r_add,
        partition=target.partition,
    )
    return AmbiguityWitness(unperturb(target, secret), secret, target)


# -- prediction guessing ------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """Exactly what a client sees about one prediction; carries no gamma."""

    y_hat: np.ndarray
    alpha: float
    r_add: np.ndarray
    partition: Partition


Adversary = Callable[[Observation, np.random.Generator], int]


def argmax_of_output(obs: Observation, rng: np.random.Generator) -> int:
    """Trust the masked output as if it were the true one."""
    return int(np.argmax(obs.y_hat))


def random_in_top_group(obs: Observation, rng: np.random.Generator) -> int:
    """Locate the group of the masked argmax, then pick a member at random."""
    top = int(np.argmax(obs.y_hat))
    group = obs.partition.groups[obs.partition.group_of()[top]]
    return int(group[rng.integers(len(group))])


def groupwise_argmax(obs: Observation, rng: np.random.Generator) -> int:
    """Take the masked argmax inside each group, then pick one group at random.

    Assumes the within-group order of the masked output matches the true
    order, which distinct ``r_add`` entries inside a group break.
    """
    winners = [max(g, key=lambda i: obs.y_hat[i]) for g in obs.partition.groups]
    return int(winners[rng.integers(len(winners))])


STRATEGIES: dict[str, Adversary] = {
    "argmax": argmax_of_output,
    "random-top-group": random_in_top_group,
    "groupwise-argmax": groupwise_argmax,
}


@dataclass
class GuessTrial:
    true_prediction: np.ndarray
    observed: Observation
    adversary_guess: int
    correct: bool


@dataclass
class GuessReport:
    m: int
    nL: int
    trials: int
    strategy: str
    success_rate: float
    ci95: tuple[float, float]
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.success_rate <= self.bound

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "nL": self.nL,
            "trials": self.trials,
            "strategy": self.strategy,
            "success_rate": self.success_rate,
            "ci95": list(self.ci95),
            "bound": self.bound,
        }


def monte_carlo_bound(m: int, trials: int) -> float:
    """1/m plus three standard errors of a Bernoulli(1/m) mean."""
    p = 1.0 / m
    return p + 3.0 * math.sqrt(p * (1.0 - p) / trials)


def draw_trial(
    nL: int,
    m: int,
    rng: np.random.Generator,
    config: NoiseConfig | None = None,
    hidden: int = 16,
) -> tuple[np.ndarray, Observation]:
    """One true prediction and the client's view of it.

    ``alpha`` is the sum of a masked ReLU hidden layer of width ``hidden``,
    drawn with the same multiplicative noise a real round would use.
    """
    dims = LayerDims((1, hidden, nL))
    secret = sample_noise(dims, m, rng, config or WIDE_NOISE)
    y = rng.standard_normal(nL)
    h = np.maximum(rng.standard_normal(hidden), 0.0)
    alpha = float(np.sum(secret.r_hidden[-1] * h))
    obs = Observation(y + alpha * secret.r, alpha, secret.r_add.copy(), secret.partition)
    return y, obs


def argmax_guess_experiment(
    nL: int,
    m: int,
    trials: int,
    adversary: Adversary | str,
    rng: np.random.Generator,
    config: NoiseConfig | None = None,
    *,
    hidden: int = 16,
    keep: list[GuessTrial] | None = None,
) -> GuessReport | str:
    """Empirical success rate of ``adversary`` at naming argmax(y).

    Returns ``NOT_APPLICABLE`` for a single output, where there is no class
    to guess.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    if not 1 <= m <= nL:
        raise UsageError(f"need 1 <= m <= nL, got m={m}, nL={nL}")
    if nL == 1:
        return NOT_APPLICABLE
    if isinstance(adversary, str):
        if adversary not in STRATEGIES:
            raise UsageError(f"unknown strategy {adversary!r}; choose from {sorted(STRATEGIES)}")
        name, fn = adversary, STRATEGIES[adversary]
    else:
        name, fn = getattr(adversary, "__name__", "custom"), adversary

    hits = 0
    for _ in range(trials):
        y, obs = draw_trial(nL, m, rng, config, hidden)
        guess = fn(obs, rng)
        ok = guess == int(np.argmax(y))
        hits += ok
        if keep is not None:
            keep.append(GuessTrial(y, obs, guess, ok))

    p = hits / trials
    half = 1.96 * math.sqrt(p * (1.0 - p) / trials)
    return GuessReport(m, nL, trials, name, p, (max(0.0, p - half), min(1.0, p + half)), monte_carlo_bound(m, trials))


# -- gradient ambiguity -------------------------------------------------------


@dataclass
class ObservedUpload:
    """One client's upload plus the public noise it was computed under."""

    g_hat: list[np.ndarray]
    sigma_tilde: list[list[np.ndarray]]
    beta: list[np.ndarray]
    r_add: np.ndarray
    partition: Partition

    @classmethod
    def from_update(cls, pm: PerturbedModel, update: ClientUpdate) -> "ObservedUpload":
        return cls(
            g_hat=[u.g_hat for u in update.layers],
            sigma_tilde=[u.sigma_tilde for u in update.layers],
            beta=[u.beta for u in update.layers],
            r_add=pm.r_add,
            partition=pm.partition,
        )

    @property
    def dims(self) -> LayerDims:
        return LayerDims((self.g_hat[0].shape[1],) + tuple(g.shape[0] for g in self.g_hat))


def identity_secret(observed: ObservedUpload) -> NoiseSecret:
    """All-ones multiplicative noise and zero gamma, on the observed public parts."""
    d = observed.dims
    return NoiseSecret(
        dims=d,
        r_hidden=[np.ones(d.dims[l]) for l in range(1, d.depth)],
        r_add=observed.r_add,
        partition=observed.partition,
        gamma_groups=np.zeros(observed.partition.m),
    )


def _group_sum(observed: ObservedUpload, secret: NoiseSecret, l: int) -> np.ndarray:
    sig = observed.sigma_tilde[l]
    if len(sig) != secret.partition.m:
        raise ShapeError(f"layer {l + 1}: {len(sig)} sigma terms for {secret.partition.m} groups")
    out = np.zeros_like(observed.g_hat[l])
    for s in range(secret.partition.m):
        out = out + secret.gamma_groups[s] * sig[s]
    return out


def implied_true_gradient(observed: ObservedUpload, secret: NoiseSecret) -> list[np.ndarray]:
    """The true gradient that would explain the upload if ``secret`` were real."""
    return [
        hadamard(secret.r_mul[l], observed.g_hat[l] - _group_sum(observed, secret, l) + secret.upsilon * observed.beta[l])
        for l in range(len(observed.g_hat))
    ]


def reproduce_upload(observed: ObservedUpload, secret: NoiseSecret, true_grad: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Forward direction: masked gradient from a true gradient and a secret."""
    return [
        hadamard(hadamard_reciprocal(secret.r_mul[l]), true_grad[l]) + _group_sum(observed, secret, l) - secret.upsilon * observed.beta[l]
        for l in range(len(observed.g_hat))
    ]


@dataclass
class GradientAmbiguity:
    secrets: list[NoiseSecret]
    implied: list[list[np.ndarray]]
    reproduction_error: float
    min_pairwise_gap: float

    @property
    def ambiguous(self) -> bool:
        return self.reproduction_error <= 1e-9 and self.min_pairwise_gap > 0.0


def gradient_ambiguity(
    observed: ObservedUpload,
    rng: np.random.Generator,
    count: int = 2,
    config: NoiseConfig | None = None,
    *,
    include_identity: bool = True,
) -> GradientAmbiguity:
    """Implied true gradients for ``count`` candidate secrets.

    The first candidate is the identity secret when ``include_identity`` is
    set; the rest are sampled with the observed public parts pinned.
    """
    if count < 2:
        raise UsageError("need at least two candidate secrets")
    secrets = [identity_secret(observed)] if include_identity else []
    while len(secrets) < count:
        secrets.append(
            sample_noise(observed.dims, observed.partition.m, rng, config or WIDE_NOISE, r_add=observed.r_add, partition=observed.partition)
        )
    implied = [implied_true_gradient(observed, s) for s in secrets]
    err = 0.0
    for s, g in zip(secrets, implied):
        again = reproduce_upload(observed, s, g)
        err = max(err, max(max_rel_error(a, b) for a, b in zip(again, observed.g_hat)))
    gap = math.inf
    for i in range(len(implied)):
        for j in range(i + 1, len(implied)):
            d = max(float(np.max(np.abs(a - b))) for a, b in zip(implied[i], implied[j]))
            gap = min(gap, d)
    return GradientAmbiguity(secrets, implied, err, gap)


def gradient_ambiguity_check(observed: ObservedUpload, rng: np.random.Generator, config: NoiseConfig | None = None) -> bool:
    """True when two distinct secrets explain the same upload with different true gradients."""
    return gradient_ambiguity(observed, rng, 2, config).ambiguous

