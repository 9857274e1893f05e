"""Feedback-driven model reselection and shallow-classifier active learning.

Two loops share this module. The first keeps a score per (tool, capability
context) and moves it on every accept/reject verdict; rankings and
reselection read those scores. The second retrains a small multinomial
logistic classifier from labels a (simulated) clinician attaches to store
items, querying the least confident items first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from tissueflow import kernels
from tissueflow.errors import (
    DegenerateData,
    DimMismatch,
    OracleExhausted,
    PoolExhausted,
    TissueflowError,
    UnknownTarget,
)
from tissueflow.memory import Annotation, utcnow

FEEDBACK_LEDGER = "feedback"
TRACE_DATASET = "table_accuracy_trace"
VERDICTS = ("accept", "reject")


# -- candidate scores ------------------------------------------------------


@dataclass(frozen=True)
class FeedbackEvent:
    target: str
    verdict: str
    context: str
    actor: str = "clinician"
    timestamp: str = ""

    def fields(self) -> list[str]:
        return [self.timestamp, self.actor, self.target, self.verdict, self.context]


class ScorePolicy(Protocol):
    def update(self, score: float, verdict: str) -> float: ...


@dataclass(frozen=True)
class AdditivePolicy:
    """Add ``delta`` on accept, subtract on reject, clamp to [0, 1]."""

    delta: float = 0.1

    def update(self, score: float, verdict: str) -> float:
        step = self.delta if verdict == "accept" else -self.delta
        return min(1.0, max(0.0, score + step))


class ScoreTable:
    """Scores per ``(tool_id, context)``; unseen pairs fall back to the tool's prior."""

    def __init__(self, priors: dict[str, float], policy: ScorePolicy = AdditivePolicy()):
        self.priors = dict(priors)
        self.policy = policy
        self.scores: dict[tuple[str, str], float] = {}
        self.counts: dict[tuple[str, str], int] = {}

    @classmethod
    def from_registry(cls, registry, policy: ScorePolicy = AdditivePolicy()) -> "ScoreTable":
        priors = {}
        for card in registry:
            priors[card.tool_id] = registry.get(card.tool_id).perf_score
        return cls(priors, policy)

    def score(self, tool_id: str, context: str) -> float:
        return self.scores.get((tool_id, context), self.priors.get(tool_id, 0.0))

    def apply(self, event: FeedbackEvent) -> None:
        if event.verdict not in VERDICTS:
            raise ValueError(f"verdict must be accept or reject, got {event.verdict!r}")
        if event.target not in self.priors:
            raise UnknownTarget(f"no score prior for {event.target!r}")
        key = (event.target, event.context)
        self.scores[key] = self.policy.update(self.score(*key), event.verdict)
        self.counts[key] = self.counts.get(key, 0) + 1

    def snapshot(self) -> dict[tuple[str, str], float]:
        return dict(sorted(self.scores.items()))

    def replay(self, store) -> "ScoreTable":
        """Fresh table with the same priors, rebuilt from the store's feedback ledger."""
        table = ScoreTable(self.priors, self.policy)
        for ts, actor, target, verdict, context in store.read_ledger(FEEDBACK_LEDGER):
            table.apply(FeedbackEvent(target, verdict, context, actor, ts))
        return table


def record_feedback(table: ScoreTable, event: FeedbackEvent, store=None) -> ScoreTable:
    """Apply one verdict and append it to the store's feedback ledger."""
    if not event.timestamp:
        event = FeedbackEvent(event.target, event.verdict, event.context, event.actor, utcnow())
    table.apply(event)
    if store is not None:
        store.append_ledger(FEEDBACK_LEDGER, event.fields(), actor=event.actor)
    return table


def rank_candidates(pool, table: ScoreTable) -> list[str]:
    return sorted(set(pool.members), key=lambda m: (-table.score(m, pool.context), m))


def select_model(pool, table: ScoreTable, rejected: Iterable[str] = ()) -> str:
    rejected = set(rejected)
    for tool_id in rank_candidates(pool, table):
        if tool_id not in rejected:
            return tool_id
    raise PoolExhausted(f"every candidate for {pool.context} was rejected")


def reselect(pool, table: ScoreTable, verdict: Callable[[str], bool], store=None,
             actor: str = "clinician") -> tuple[str, list[str]]:
    """Propose models until ``verdict`` accepts one; returns it and the rejections.

    Each verdict is recorded as feedback, so scores follow the clinician.
    """
    rejected: list[str] = []
    while True:
        choice = select_model(pool, table, rejected)
        ok = bool(verdict(choice))
        record_feedback(table, FeedbackEvent(choice, "accept" if ok else "reject",
                                             pool.context, actor), store)
        if ok:
            return choice, rejected
        rejected.append(choice)


# -- shallow classifier ----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    decay: float = 0.01        # step_t = learning_rate / (1 + decay * t)
    l2: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 5000


@dataclass(frozen=True, eq=False)
class ShallowModel:
    weights: np.ndarray        # (classes, features), on standardized inputs
    bias: np.ndarray           # (classes,)
    classes: tuple
    mean: np.ndarray
    scale: np.ndarray
    loss_trace: tuple = ()
    n_examples: int = 0

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int,
                  l2: float = 1e-4) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * |W|^2`` and its gradient.

    ``theta`` is the flattened ``[W | b]`` matrix of shape ``(classes, dim+1)``;
    ``y`` holds integer class indices.
    """
    return kernels.softmax_xent(np.ascontiguousarray(theta, dtype=np.float64),
                                np.ascontiguousarray(x, dtype=np.float64),
                                np.ascontiguousarray(y, dtype=np.int64), n_classes, l2)


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def train_shallow(examples: Sequence[tuple[Sequence[float], object]],
                  config: TrainConfig = TrainConfig()) -> ShallowModel:
    """Full-batch gradient descent on a multinomial logistic model.

    A step that would raise the loss is halved until it does not, so the
    recorded trace never increases.
    """
    if not examples:
        raise DegenerateData("no training examples")
    x = np.asarray([e[0] for e in examples], dtype=np.float64)
    labels = [e[1] for e in examples]
    if x.ndim != 2 or x.shape[1] == 0:
        raise DegenerateData(f"features must be nonempty vectors of equal length, got {x.shape}")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise DegenerateData(f"need at least two classes, got {classes}")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in labels], dtype=np.int64)
    mean, scale = _standardize(x)
    xs = np.ascontiguousarray((x - mean) / scale)
    k, d = len(classes), x.shape[1]

    theta = np.zeros(k * (d + 1))
    loss, grad = kernels.softmax_xent(theta, xs, y, k, config.l2)
    trace = [loss]
    for t in range(config.max_iter):
        step = config.learning_rate / (1.0 + config.decay * t)
        while True:
            cand = theta - step * grad
            new_loss, new_grad = kernels.softmax_xent(cand, xs, y, k, config.l2)
            if new_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        if new_loss > loss:
            break
        theta, grad = cand, new_grad
        done = loss - new_loss < config.tol
        loss = new_loss
        trace.append(loss)
        if done:
            break
    params = theta.reshape(k, d + 1)
    return ShallowModel(params[:, :d].copy(), params[:, d].copy(), classes, mean, scale,
                        tuple(trace), len(examples))


def predict_proba(model: ShallowModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise DimMismatch(f"model expects {model.dim} features, got {x.shape[1]}")
    p = softmax(((x - model.mean) / model.scale) @ model.weights.T + model.bias)
    return p[0] if single else p


def predict_shallow(model: ShallowModel, features) -> tuple[object, np.ndarray]:
    """Label and class probabilities for one feature vector."""
    p = predict_proba(model, np.asarray(features, dtype=np.float64).ravel())
    return model.classes[int(np.argmax(p))], p


def predict_labels(model: ShallowModel, features) -> list:
    p = np.atleast_2d(predict_proba(model, features))
    return [model.classes[i] for i in p.argmax(axis=1)]


# -- active learning -------------------------------------------------------

POOL_DATASET = "table_pool_features"
TEST_FEATURES = "table_test_features"
TEST_LABELS = "table_test_labels"


class ScenarioError(TissueflowError):
    exit_code = 2


@dataclass(frozen=True)
class Scenario:
    """Synthetic Gaussian-blob classification task; class centres sit on a circle."""

    seed: int = 0
    n_classes: int = 3
    dim: int = 2
    n_pool: int = 300
    n_test: int = 300
    separation: float = 8.0
    spread: float = 1.0
    batch: int = 5
    rounds: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            s = cls(**{k: type(getattr(cls, k))(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"bad scenario value: {exc}") from exc
        if s.n_classes < 2 or s.dim < 1 or s.n_pool < 1 or s.n_test < 1 or s.batch < 1:
            raise ScenarioError("scenario sizes must be positive with at least two classes")
        return s


def load_scenario(path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a JSON object")
    return Scenario.from_dict(d)


def make_data(scenario: Scenario, seed: int | None = None):
    """``(pool_x, pool_y, test_x, test_y)`` drawn from the scenario's blobs."""
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    k, d = scenario.n_classes, scenario.dim
    angles = 2 * np.pi * np.arange(k) / k
    centres = np.zeros((k, d))
    centres[:, 0] = np.cos(angles)
    if d > 1:
        centres[:, 1] = np.sin(angles)
    centres *= scenario.separation / 2

    def draw(n):
        y = rng.integers(0, k, size=n)
        x = centres[y] + rng.normal(0.0, scenario.spread, size=(n, d))
        return x, y.astype(np.int32)

    pool_x, pool_y = draw(scenario.n_pool)
    test_x, test_y = draw(scenario.n_test)
    return pool_x, pool_y, test_x, test_y


def seed_store(store, scenario: Scenario, seed: int | None = None) -> np.ndarray:
    """Write pool and held-out data into ``store``; returns hidden pool labels for the oracle."""
    pool_x, pool_y, test_x, test_y = make_data(scenario, seed)
    store.write_array(POOL_DATASET, pool_x, actor="scenario")
    store.write_array(TEST_FEATURES, test_x, actor="scenario")
    store.write_array(TEST_LABELS, test_y[:, None], actor="scenario")
    return pool_y


class LabelOracle:
    """Simulated clinician answering with known labels, optionally flipped with prob ``1-p``."""

    def __init__(self, labels: Sequence[int], accuracy: float = 1.0, rng=None,
                 n_classes: int | None = None, budget: int | None = None):
        self.labels = np.asarray(labels)
        self.accuracy = accuracy
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes or int(self.labels.max()) + 1
        self.budget = budget
        self.queries = 0

    def __call__(self, item: int) -> int:
        if self.budget is not None and self.queries >= self.budget:
            raise OracleExhausted(f"oracle budget of {self.budget} labels used up")
        self.queries += 1
        label = int(self.labels[item])
        if self.accuracy < 1.0 and self.rng.random() > self.accuracy:
            label = int((label + 1 + self.rng.integers(self.n_classes - 1)) % self.n_classes)
        return label


def margin_order(probs: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Items sorted by smallest top-2 probability margin, ties by item id."""
    if probs.shape[1] < 2:
        margin = np.zeros(len(items))
    else:
        top = np.sort(probs, axis=1)
        margin = top[:, -1] - top[:, -2]
    return items[np.lexsort((items, margin))]


def current_annotations(store, name: str) -> list[Annotation]:
    """Annotations made since ``name`` was last written; older ones label stale data."""
    ops = [e.op for e in store.history(name)]
    last_write = max((i for i, op in enumerate(ops) if op != "annotate"), default=-1)
    fresh = sum(op == "annotate" for op in ops[last_write + 1:])
    anns = store.annotations(name)
    return anns[len(anns) - fresh:] if fresh else []


def _accuracy(model: ShallowModel | None, x: np.ndarray, y: np.ndarray) -> float:
    if model is None:
        return 0.0
    return float(np.mean(np.array(predict_labels(model, x)) == y))


@dataclass
class ActiveResult:
    trace: list[float]
    labeled: list[int] = field(default_factory=list)
    model: ShallowModel | None = None


def active_loop(store, oracle: Callable[[int], object], rounds: int, batch: int = 5,
                config: TrainConfig = TrainConfig(), actor: str = "oracle") -> ActiveResult:
    """Margin-sampling rounds over the store's pool; returns the accuracy trace.

    Entry 0 is the accuracy before any new labels: labels already annotated on
    the pool are used, and with fewer than two classes known it is 0. Each round
    labels up to ``batch`` items, annotates them in the store, retrains and
    scores the held-out set. The loop stops early once the pool is exhausted.
    The trace is written to ``table_accuracy_trace`` as
    ``(round, labeled count, accuracy)`` rows.
    """
    pool = store.read_array(POOL_DATASET).astype(np.float64)
    test_x = store.read_array(TEST_FEATURES).astype(np.float64)
    test_y = store.read_array(TEST_LABELS).ravel()
    if pool.shape[1] != test_x.shape[1]:
        raise DimMismatch(f"pool has {pool.shape[1]} features, test set {test_x.shape[1]}")

    labels: dict[int, int] = {}
    for ann in current_annotations(store, POOL_DATASET):
        labels[ann.selector[0]] = int(ann.label)

    def fit():
        if len(set(labels.values())) < 2:
            return None
        items = sorted(labels)
        return train_shallow([(pool[i], labels[i]) for i in items], config)

    model = fit()
    trace = [_accuracy(model, test_x, test_y)]
    rows = [(0, len(labels), trace[0])]
    for r in range(1, rounds + 1):
        unlabeled = np.array([i for i in range(len(pool)) if i not in labels], dtype=np.int64)
        if len(unlabeled) == 0:
            break
        if model is None:
            order = unlabeled
        else:
            order = margin_order(np.atleast_2d(predict_proba(model, pool[unlabeled])), unlabeled)
        for item in order[:batch]:
            label = oracle(int(item))
            if label is None:
                raise OracleExhausted(f"oracle gave no label for item {item}")
            labels[int(item)] = int(label)
            store.annotate(Annotation(POOL_DATASET, (int(item),), str(int(label)), actor))
        model = fit()
        trace.append(_accuracy(model, test_x, test_y))
        rows.append((r, len(labels), trace[-1]))
    store.write_array(TRACE_DATASET, np.array(rows, dtype=np.float64),
                      attrs={"columns": "round,labeled,accuracy"}, actor="evolve")
    return ActiveResult(trace, sorted(labels), model)


def simulate(store, scenario: Scenario, seed: int | None = None, rounds: int | None = None,
             oracle_accuracy: float = 1.0) -> ActiveResult:
    """Seed ``store`` from ``scenario`` and run the loop with a scripted oracle."""
    s = scenario.seed if seed is None else seed
    hidden = seed_store(store, scenario, s)
    oracle = LabelOracle(hidden, oracle_accuracy, np.random.default_rng(s + 1),
                         scenario.n_classes)
    n = scenario.rounds if rounds is None else rounds
    return active_loop(store, oracle, n, scenario.batch)

