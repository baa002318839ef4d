"""The attacking server: per-class model-sensitivity extraction, shadow-model
corpus and meta-classifier construction (centralized and federated variants),
selective-aggregation partner choice, and streak-gated online profiling.

Model sensitivity of class c is the sum over the architecture's feature-layer
parameters of |(theta - theta') / alpha|, where theta' is the model after one
full-batch gradient step on the class-c auxiliary subset at rate alpha.  The
profiler consumes the per-class absolute difference between the sensitivity
of the model a user received last round and the sensitivity of the model it
uploaded this round.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import fedsim, nn
from .data import AuxiliaryStore, DistributionSpec, LabeledDataset, preference_class, realize_distribution
from .errors import ConfigError, InputError, StateError
from .seeding import derive_seed

# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def extract_sensitivity(pv: nn.ParamVector, arch: nn.Architecture,
                        aux: AuxiliaryStore, alpha: float) -> np.ndarray:
    """Per-class model sensitivity via a one-step retrain on each class subset.

    The input model is never mutated.  For a single gradient step the scaled
    parameter delta equals the gradient restricted to the feature layer, so
    this is exactly the summed absolute gradient there.
    """
    if alpha <= 0:
        raise InputError("alpha must be > 0")
    fid = nn.feature_layer_id(arch)
    off, length = pv.layout[fid]
    out = np.zeros(aux.n_label)
    for c in range(aux.n_label):
        Xc = aux.class_batch(c)
        if len(Xc) == 0:
            raise InputError(f"auxiliary store has no samples for class {c}")
        yc = np.full(len(Xc), c, dtype=np.int64)
        grad = nn.backward(pv, arch, Xc, yc)
        retrained = nn.sgd_step(pv, grad, alpha)
        delta = (pv.values[off:off + length] - retrained.values[off:off + length]) / alpha
        out[c] = np.abs(delta).sum()
    return out


def differential_sensitivity(s_agg_prev: np.ndarray, s_now: np.ndarray) -> np.ndarray:
    """Elementwise |previous aggregated-model sensitivity - current sensitivity|."""
    a = np.asarray(s_agg_prev, dtype=np.float64)
    b = np.asarray(s_now, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"sensitivity lengths differ: {a.shape} vs {b.shape}")
    return np.abs(a - b)


def normalize_features(v: np.ndarray) -> np.ndarray:
    """Scale a feature vector by its max; zero vectors pass through unchanged."""
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    return v / m if m > 0 else v.copy()


# ---------------------------------------------------------------------------
# Shadow corpus
# ---------------------------------------------------------------------------


@dataclass
class ShadowRecord:
    params: nn.ParamVector
    dataset: LabeledDataset
    preference: int
    sensitivity: np.ndarray


@dataclass
class MetaSample:
    features: np.ndarray
    label: int


def default_shadow_sampler(n_label: int, total_size: int,
                           cp_range=(0.35, 0.7), cd_range=(0.1, 0.6),
                           mode: str = "majority") -> Callable:
    """Distribution sampler for shadow datasets; cd is clamped below cp."""

    def sample(preferred: int, rng: np.random.Generator) -> DistributionSpec:
        cp = float(rng.uniform(*cp_range))
        hi = min(cd_range[1], cp) if mode == "majority" else cd_range[1]
        lo = min(cd_range[0], hi)
        cd = float(rng.uniform(lo, hi))
        return DistributionSpec(n_label, total_size, cp, cd, preferred, mode)

    return sample


def train_shadows(aux: AuxiliaryStore, arch: nn.Architecture, n_shadows: int,
                  spec_sampler: Callable, train_cfg: nn.TrainConfig,
                  alpha: float, seed: int, mode: str = "majority") -> List[ShadowRecord]:
    """Train shadow models on heterogeneous draws from the auxiliary pool.

    Preference classes are forced round-robin, so every class is preferred by
    at least one shadow whenever n_shadows >= n_label; each label is verified
    against the realized class counts (resampling on the rare tie).
    """
    if n_shadows < aux.n_label:
        raise ConfigError(
            f"{n_shadows} shadows cannot cover {aux.n_label} preference classes"
        )
    pool = aux.to_dataset()
    shadows = []
    for i in range(n_shadows):
        forced = i % aux.n_label
        for attempt in range(50):
            sub = derive_seed(seed, "shadow", i, attempt)
            spec = spec_sampler(forced, np.random.default_rng(derive_seed(sub, "spec")))
            ds = realize_distribution(pool, spec, seed=derive_seed(sub, "data"))
            if preference_class(ds.class_counts, mode) == forced:
                break
        else:
            raise ConfigError(f"could not realize a shadow preferring class {forced}")
        params = nn.init_params(arch, seed=derive_seed(sub, "init"))
        cfg = dataclasses.replace(train_cfg, seed=derive_seed(sub, "train"))
        params = nn.train(params, arch, ds.X, ds.y, cfg)
        shadows.append(ShadowRecord(params, ds, forced,
                                    extract_sensitivity(params, arch, aux, alpha)))
    return shadows


# ---------------------------------------------------------------------------
# Meta datasets
# ---------------------------------------------------------------------------


def build_meta_dataset_centralized(shadows: List[ShadowRecord], aux: AuxiliaryStore,
                                   arch: nn.Architecture, alpha: float) -> List[MetaSample]:
    """One (sensitivity vector, preference) sample per shadow model."""
    if not shadows:
        raise InputError("no shadow records")
    return [MetaSample(extract_sensitivity(s.params, arch, aux, alpha), s.preference)
            for s in shadows]


def _pair_partner(shadows: List[ShadowRecord], i: int, mode: str) -> int:
    """The other shadow with the most opposite sensitivity at shadow i's class."""
    key = shadows[i].preference
    others = [j for j in range(len(shadows)) if j != i]
    if mode == "majority":
        return max(others, key=lambda j: (shadows[j].sensitivity[key], -j))
    return min(others, key=lambda j: (shadows[j].sensitivity[key], j))


def build_meta_dataset_federated(shadows: List[ShadowRecord], aux: AuxiliaryStore,
                                 arch: nn.Architecture, alpha: float,
                                 update_cfg: nn.TrainConfig, seed: int,
                                 mode: str = "majority") -> List[MetaSample]:
    """Pair each shadow with its most opposite peer and mimic two FL rounds.

    For shadow i: average it (equal weights) with the partner, extract S1 of
    the aggregate, retrain the aggregate for one pass over shadow i's own
    dataset (the next-round local update), extract S2, and emit
    (|S1 - S2|, preference of i).
    """
    if len(shadows) < 2:
        raise ConfigError("federated meta dataset needs at least two shadows")
    samples = []
    for i, sh in enumerate(shadows):
        partner = _pair_partner(shadows, i, mode)
        agg = fedsim.fedavg([sh.params, shadows[partner].params], [1.0, 1.0])
        s1 = extract_sensitivity(agg, arch, aux, alpha)
        cfg = dataclasses.replace(update_cfg, seed=derive_seed(seed, "shadow-update", i))
        updated = nn.train(agg, arch, sh.dataset.X, sh.dataset.y, cfg)
        s2 = extract_sensitivity(updated, arch, aux, alpha)
        samples.append(MetaSample(np.abs(s1 - s2), sh.preference))
    return samples


def export_meta_csv(samples: List[MetaSample], path) -> None:
    """CSV with one feature column per class plus the preference label."""
    n_label = len(samples[0].features)
    with open(path, "w") as f:
        f.write(",".join(f"s{c}" for c in range(n_label)) + ",label\n")
        for s in samples:
            f.write(",".join(repr(float(v)) for v in s.features) + f",{s.label}\n")


# ---------------------------------------------------------------------------
# Meta-classifier
# ---------------------------------------------------------------------------


@dataclass
class MetaClassifier:
    """Small perceptron mapping (normalized) sensitivity features to classes."""

    params: nn.ParamVector
    arch: nn.Architecture
    normalize: bool = True
    train_accuracy: float = 0.0

    def scores(self, features: np.ndarray) -> np.ndarray:
        f = normalize_features(features) if self.normalize else np.asarray(features)
        return nn.predict_logits(self.params, self.arch, f[None, :])[0]

    def predict(self, features: np.ndarray) -> int:
        return int(np.argmax(self.scores(features)))

    def ranking(self, features: np.ndarray) -> np.ndarray:
        """All classes ordered from most to least likely preference."""
        return np.argsort(-self.scores(features), kind="stable")


def train_meta(meta_samples: List[MetaSample], n_label: int,
               train_cfg: nn.TrainConfig, hidden: int = 32,
               normalize: bool = True) -> MetaClassifier:
    """Fit the meta-classifier on (features, preference) pairs."""
    if len(meta_samples) < n_label:
        raise ConfigError(
            f"need at least {n_label} meta samples, got {len(meta_samples)}"
        )
    labels = np.array([s.label for s in meta_samples])
    missing = sorted(set(range(n_label)) - set(labels.tolist()))
    if missing:
        raise ConfigError(f"meta dataset has no samples for classes {missing}")
    feats = np.stack([normalize_features(s.features) if normalize else s.features
                      for s in meta_samples])
    arch = nn.Architecture(
        (nn.Dense(n_label, hidden), nn.Relu(), nn.Dense(hidden, n_label)),
        (n_label,), n_label,
    )
    params = nn.init_params(arch, seed=derive_seed(train_cfg.seed, "meta-init"))
    cfg = dataclasses.replace(train_cfg, batch_size=min(train_cfg.batch_size, len(feats)))
    params = nn.train(params, arch, feats, labels, cfg)
    acc = nn.accuracy(params, arch, feats, labels)
    return MetaClassifier(params, arch, normalize, acc)


# ---------------------------------------------------------------------------
# Selective aggregation partner choice
# ---------------------------------------------------------------------------


def select_partners(target_user: int, all_sensitivities, x: int,
                    mode: str = "majority") -> List[int]:
    """The x other users with the most opposite sensitivity at the candidate class.

    The candidate class is argmin of the target's sensitivity in majority mode
    (argmax in minority mode); partners are the x users with the largest
    (resp. smallest) sensitivity there.  Ties break toward lower user ids.
    """
    n = len(all_sensitivities)
    if x > n - 1:
        raise InputError(f"x={x} but only {n - 1} other users exist")
    s_t = np.asarray(all_sensitivities[target_user])
    c = int(np.argmin(s_t)) if mode == "majority" else int(np.argmax(s_t))
    others = [u for u in range(n) if u != target_user]
    if mode == "majority":
        others.sort(key=lambda u: (-all_sensitivities[u][c], u))
    else:
        others.sort(key=lambda u: (all_sensitivities[u][c], u))
    return others[:x]


# ---------------------------------------------------------------------------
# Online profiling
# ---------------------------------------------------------------------------


@dataclass
class ProfilerState:
    """Per-user verdict streaks and locks for streak-gated profiling."""

    th_round: int
    n_user: int
    last_pred: list = field(default_factory=list)
    streak: list = field(default_factory=list)
    locked: list = field(default_factory=list)
    locked_round: list = field(default_factory=list)

    def __post_init__(self):
        if self.th_round < 1:
            raise InputError("th_round must be >= 1")
        if not self.last_pred:
            self.last_pred = [None] * self.n_user
            self.streak = [0] * self.n_user
            self.locked = [None] * self.n_user
            self.locked_round = [None] * self.n_user


def profile_round(state: ProfilerState, user: int, features: np.ndarray,
                  meta: MetaClassifier, round_index: Optional[int] = None):
    """Feed one round of features for one user; lock after th_round repeats.

    Returns (prediction, locked?).  Calling this for an already locked user is
    a state error: monitoring them is over.
    """
    if state.locked[user] is not None:
        raise StateError(f"user {user} is already locked")
    pred = meta.predict(features)
    if pred == state.last_pred[user]:
        state.streak[user] += 1
    else:
        state.last_pred[user] = pred
        state.streak[user] = 1
    locked = state.streak[user] >= state.th_round
    if locked:
        state.locked[user] = pred
        state.locked_round[user] = round_index
    return pred, locked


def topk_accuracy(predicted_rankings, true_rankings, k: int) -> float:
    """Fraction of users whose top-k predicted set equals the true top-k set.

    Order within the top-k is ignored, but at k=1 a preference ranked second
    still counts as a miss.
    """
    if len(predicted_rankings) != len(true_rankings):
        raise InputError("ranking lists differ in length")
    hits = 0
    for pred, true in zip(predicted_rankings, true_rankings):
        if k > len(pred) or k > len(true):
            raise InputError(f"k={k} exceeds ranking length")
        if set(int(c) for c in pred[:k]) == set(int(c) for c in true[:k]):
            hits += 1
    return hits / len(predicted_rankings)


def topk_accuracy_from_counts(predicted_rankings, class_counts_list, k: int) -> float:
    """Top-k accuracy against count-derived ground truth, tie-aware.

    Classes with counts strictly above the k-th largest count are mandatory;
    classes tied at the k-th count are interchangeable.  A prediction is
    correct iff its top-k set is one of the valid top-k sets.  With distinct
    counts this coincides with :func:`topk_accuracy` against the count
    ranking.
    """
    if len(predicted_rankings) != len(class_counts_list):
        raise InputError("rankings and counts differ in length")
    hits = 0
    for rank, counts in zip(predicted_rankings, class_counts_list):
        counts = np.asarray(counts)
        if k > counts.size or k > len(rank):
            raise InputError(f"k={k} exceeds the number of classes")
        kth = np.sort(counts)[::-1][k - 1]
        mandatory = set(np.flatnonzero(counts > kth).tolist())
        optional = set(np.flatnonzero(counts == kth).tolist())
        picked = set(int(c) for c in rank[:k])
        hits += int(mandatory <= picked <= (mandatory | optional))
    return hits / len(predicted_rankings)


# ---------------------------------------------------------------------------
# The attacking server as an aggregation hook
# ---------------------------------------------------------------------------


@dataclass
class RoundTrace:
    round_index: int
    sensitivities: np.ndarray
    ds: np.ndarray
    agg_sensitivities: np.ndarray
    predictions: list
    locked: list


class PreferenceProfiler:
    """Aggregation hook that extracts sensitivities, profiles preferences and
    performs selective (or plain) aggregation.

    ``feature_mode`` selects what the meta-classifier consumes online:
    ``"differential"`` feeds the cross-round differential sensitivity,
    ``"sensitivity"`` feeds the uploaded model's raw sensitivity vector (the
    centralized-meta baseline).
    """

    def __init__(self, arch: nn.Architecture, aux: AuxiliaryStore,
                 meta: MetaClassifier, alpha: float, th_round: int, n_user: int,
                 policy="fedavg", feature_mode: str = "differential",
                 mode: str = "majority"):
        if feature_mode not in ("differential", "sensitivity"):
            raise ConfigError(f"unknown feature mode {feature_mode!r}")
        self.arch = arch
        self.aux = aux
        self.meta = meta
        self.alpha = alpha
        self.n_user = n_user
        self.policy = policy
        self.feature_mode = feature_mode
        self.mode = mode
        self.state = ProfilerState(th_round, n_user)
        self.prev_agg_sens: Optional[np.ndarray] = None
        self.final_rankings: list = [None] * n_user
        self.history: List[RoundTrace] = []

    def prime(self, init_model: nn.ParamVector) -> None:
        """Record the sensitivity of the round-0 model every user received."""
        s = extract_sensitivity(init_model, self.arch, self.aux, self.alpha)
        self.prev_agg_sens = np.tile(s, (self.n_user, 1))

    def __call__(self, round_index: int, uploads: list, weights: list,
                 selected: list) -> fedsim.HookResult:
        if self.prev_agg_sens is None:
            raise StateError("profiler must be primed with the initial model")
        n = self.n_user
        sens = np.stack([
            extract_sensitivity(uploads[u], self.arch, self.aux, self.alpha)
            for u in range(n)
        ])
        ds = np.abs(self.prev_agg_sens - sens)

        predictions = [None] * n
        for u in range(n):
            features = ds[u] if self.feature_mode == "differential" else sens[u]
            if self.state.locked[u] is None:
                predictions[u], _ = profile_round(self.state, u, features,
                                                  self.meta, round_index)
                self.final_rankings[u] = self.meta.ranking(features)

        distributed, agg_sens = self._aggregate(uploads, weights, selected, sens)
        self.prev_agg_sens = agg_sens
        locked = list(self.state.locked)
        self.history.append(RoundTrace(round_index, sens, ds, agg_sens,
                                       predictions, locked))
        return fedsim.HookResult(
            distributed=distributed,
            sensitivities=sens,
            agg_sensitivities=agg_sens,
            ds=ds,
            predictions=predictions,
            verdict_streaks=[(self.state.last_pred[u], self.state.streak[u])
                             for u in range(n)],
            locked=locked,
        )

    def _aggregate(self, uploads, weights, selected, sens):
        n = self.n_user
        if self.policy == "fedavg":
            models = [uploads[u] for u in selected]
            w = [weights[u] for u in selected]
            g = fedsim.fedavg(models, w, ids=list(selected))
            s = extract_sensitivity(g, self.arch, self.aux, self.alpha)
            return [g] * n, np.tile(s, (n, 1))
        pol: fedsim.SelectivePolicy = self.policy
        distributed, agg_sens = [], []
        for u in range(n):
            partners = select_partners(u, sens, pol.x, pol.mode)
            group = [u] + partners
            models = [uploads[v] for v in group]
            w = [weights[v] for v in group] if pol.size_weighted else [1.0] * len(group)
            agg = fedsim.fedavg(models, w, ids=group)
            distributed.append(agg)
            agg_sens.append(extract_sensitivity(agg, self.arch, self.aux, self.alpha))
        return distributed, np.stack(agg_sens)

    # -- end-of-run summaries -------------------------------------------------

    def final_predictions(self) -> list:
        """Locked verdicts, falling back to the latest prediction if never locked."""
        return [self.state.locked[u] if self.state.locked[u] is not None
                else self.state.last_pred[u] for u in range(self.n_user)]

    def lock_rounds(self) -> list:
        return list(self.state.locked_round)

    def all_locked(self) -> bool:
        return all(l is not None for l in self.state.locked)


def replay_profiling(history: List[RoundTrace], meta: MetaClassifier,
                     feature_mode: str, th_round: int, n_user: int):
    """Re-run streak-gated profiling over recorded round traces.

    The aggregation trajectory does not depend on which meta-classifier reads
    the features, so one recorded simulation can score several meta variants
    on identical footing.  Returns (final predictions, final rankings, lock
    rounds).
    """
    state = ProfilerState(th_round, n_user)
    rankings = [None] * n_user
    for trace in history:
        for u in range(n_user):
            if state.locked[u] is None:
                f = trace.ds[u] if feature_mode == "differential" else trace.sensitivities[u]
                profile_round(state, u, f, meta, trace.round_index)
                rankings[u] = meta.ranking(f)
    preds = [state.locked[u] if state.locked[u] is not None else state.last_pred[u]
             for u in range(n_user)]
    return preds, rankings, list(state.locked_round)
