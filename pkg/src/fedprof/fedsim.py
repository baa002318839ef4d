"""Federated training loop: local training, upload, aggregation, distribution.

The aggregation step is delegated to a hook so an attacker-controlled server
can observe uploads and hand back per-user models.  The identity hook is
plain weighted FedAvg broadcast to everyone.  All per-round randomness is
derived from the run seed, so trajectories are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import nn
from .errors import InputError, InternalError
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class SelectivePolicy:
    """Aggregate each user's model with x partner models chosen by the server.

    Partners are averaged with equal weights by default; ``size_weighted``
    switches to data-size weights.
    """

    x: int
    mode: str = "majority"
    size_weighted: bool = False


@dataclass(frozen=True)
class FlConfig:
    n_rounds: int
    train: nn.TrainConfig
    client_fraction: float = 1.0
    local_epochs: int = 1
    aggregation_policy: Union[str, SelectivePolicy] = "fedavg"

    def __post_init__(self):
        if self.n_rounds < 1:
            raise InputError("n_rounds must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise InputError("client_fraction must be in (0, 1]")
        if self.local_epochs < 0:
            raise InputError("local_epochs must be >= 0")


@dataclass
class RoundState:
    """Everything the simulator knows about one FL round.

    ``distributed[u]`` may differ per user under an attacking server.  The
    attack-side fields stay None under the identity hook.
    """

    round_index: int
    uploaded: list
    distributed: list
    sensitivities: Optional[np.ndarray] = None
    agg_sensitivities: Optional[np.ndarray] = None
    ds: Optional[np.ndarray] = None
    predictions: Optional[list] = None
    verdict_streaks: Optional[list] = None
    locked: Optional[list] = None
    local_acc: Optional[list] = None
    global_acc: Optional[list] = None
    selected: Optional[list] = None


@dataclass
class HookResult:
    """What an aggregation hook hands back to the round driver."""

    distributed: list
    sensitivities: Optional[np.ndarray] = None
    agg_sensitivities: Optional[np.ndarray] = None
    ds: Optional[np.ndarray] = None
    predictions: Optional[list] = None
    verdict_streaks: Optional[list] = None
    locked: Optional[list] = None


AggregationHook = Callable[[int, list, list, list], HookResult]


def fedavg(models: list, weights: list, ids: Optional[list] = None) -> nn.ParamVector:
    """Data-size weighted elementwise average of parameter vectors.

    If ``ids`` are given, (model, weight) pairs are reduced in ascending id
    order, which makes the result invariant (bitwise) under shuffling.
    """
    if not models:
        raise InputError("fedavg needs at least one model")
    if len(models) != len(weights):
        raise InputError("models and weights must pair up")
    if any(w <= 0 for w in weights):
        raise InputError("weights must be positive")
    order = list(range(len(models))) if ids is None else list(np.argsort(np.asarray(ids)))
    anchor = models[order[0]]
    total = float(sum(weights))
    # Accumulate weighted deltas around an anchor model: algebraically the
    # weighted mean, but bitwise idempotent when all models are identical.
    acc = np.zeros_like(anchor.values)
    for i in order:
        m = models[i]
        if not anchor.same_layout(m):
            raise InternalError("fedavg layout mismatch across models")
        acc += (weights[i] / total) * (m.values - anchor.values)
    return nn.ParamVector(anchor.values + acc, anchor.layout)


def client_fraction_sample(n_user: int, fraction: float,
                           rng: np.random.Generator) -> np.ndarray:
    """ceil(fraction * n_user) distinct user ids, uniform without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise InputError("fraction must be in (0, 1]")
    k = int(np.ceil(fraction * n_user))
    return np.sort(rng.choice(n_user, size=k, replace=False))


def fedavg_hook(round_index: int, uploads: list, weights: list,
                selected: list) -> HookResult:
    """Identity server: plain FedAvg over the sampled uploads, broadcast to all."""
    models = [uploads[u] for u in selected]
    w = [weights[u] for u in selected]
    g = fedavg(models, w, ids=list(selected))
    return HookResult(distributed=[g] * len(uploads))


def initial_state(n_user: int, init_model: nn.ParamVector) -> RoundState:
    """Round 0: one seeded global init shared by (distributed to) all users."""
    return RoundState(0, uploaded=[init_model] * n_user,
                      distributed=[init_model] * n_user)


def run_round(prev: RoundState, clients: list, arch: nn.Architecture,
              fl_cfg: FlConfig, hook: AggregationHook, run_seed: int) -> RoundState:
    """Advance the federation by one round.

    Sampled clients train ``local_epochs`` on their last distributed model and
    upload; unsampled clients keep their previous upload and model.  The hook
    observes all current uploads and returns the per-user distributed models.
    Per-user accuracy on the user's own data is recorded for the uploaded
    model and for the received model, using the same evaluation set.
    """
    n_user = len(clients)
    rnd = prev.round_index + 1
    rng = rng_for(run_seed, "sampling", rnd)
    selected = client_fraction_sample(n_user, fl_cfg.client_fraction, rng)

    uploads = list(prev.uploaded)
    for u in selected:
        cfg = dataclasses.replace(
            fl_cfg.train,
            epochs=fl_cfg.local_epochs,
            seed=derive_seed(run_seed, "local-train", rnd, int(u)),
        )
        uploads[u] = nn.train(prev.distributed[u], arch, clients[u].X, clients[u].y, cfg)

    weights = [len(c) for c in clients]
    result = hook(rnd, uploads, weights, list(selected))
    if len(result.distributed) != n_user:
        raise InternalError("hook returned wrong number of distributed models")

    local_acc = [nn.accuracy(uploads[u], arch, clients[u].X, clients[u].y)
                 for u in range(n_user)]
    global_acc = [nn.accuracy(result.distributed[u], arch, clients[u].X, clients[u].y)
                  for u in range(n_user)]
    return RoundState(
        round_index=rnd,
        uploaded=uploads,
        distributed=result.distributed,
        sensitivities=result.sensitivities,
        agg_sensitivities=result.agg_sensitivities,
        ds=result.ds,
        predictions=result.predictions,
        verdict_streaks=result.verdict_streaks,
        locked=result.locked,
        local_acc=local_acc,
        global_acc=global_acc,
        selected=list(selected),
    )
