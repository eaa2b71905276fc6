"""Graph-recovery and sample-quality metrics.

Graph metrics compare directed edge sets.  Label-quality metrics compare a
generated categorical dataset against real data through one-hot
frequencies and through logistic-regression predictors.  The GAN-train /
GAN-test harness trains a small dense multi-label classifier.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import engine
from .datasets import CategoricalDataset, VariableSchema, one_hot_encode
from .engine import DTYPE, Network, ParameterStore
from .errors import ContractViolation, SchemaMismatch
from .scm import CausalGraph

DEFAULT_REPEATS = 5


# -- graph metrics -----------------------------------------------------------

@dataclass(frozen=True)
class GraphMetrics:
    shd: int
    tpr: float

    def to_dict(self) -> dict:
        return {"shd": self.shd, "tpr": self.tpr}


def _edge_set(g) -> set[tuple[int, int]]:
    return set(g.edges) if isinstance(g, CausalGraph) else {tuple(e) for e in g}


def shd(est: CausalGraph, truth: CausalGraph) -> int:
    """Structural Hamming distance; a reversed edge costs one move."""
    if est.n != truth.n:
        raise SchemaMismatch(f"graphs have {est.n} and {truth.n} nodes")
    e, t = _edge_set(est), _edge_set(truth)
    skel_e = {frozenset(x) for x in e}
    skel_t = {frozenset(x) for x in t}
    missing_or_extra = len(skel_e ^ skel_t)
    reversed_ = sum(1 for (i, j) in e if frozenset((i, j)) in skel_t and (i, j) not in t)
    return missing_or_extra + reversed_


def tpr(est: CausalGraph, truth: CausalGraph) -> float:
    if est.n != truth.n:
        raise SchemaMismatch(f"graphs have {est.n} and {truth.n} nodes")
    t = _edge_set(truth)
    if not t:
        raise ContractViolation("true positive rate needs at least one true edge")
    return len(_edge_set(est) & t) / len(t)


def graph_metrics(est: CausalGraph, truth: CausalGraph) -> GraphMetrics:
    return GraphMetrics(shd(est, truth), tpr(est, truth))


# -- logistic regression -----------------------------------------------------

@dataclass(frozen=True)
class LogisticConfig:
    iterations: int = 500
    lr: float = 0.1


@dataclass
class LogisticPredictor:
    """One-vs-rest logistic model; ``constant`` is set when the target had a single class."""

    weights: np.ndarray  # (features + 1, classes); a single column for binary targets
    classes: np.ndarray
    constant: int | None = None

    @property
    def degenerate(self) -> bool:
        return self.constant is not None

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if self.constant is not None:
            return np.full(len(x), self.constant, dtype=np.int64)
        z = np.hstack([x, np.ones((len(x), 1))]) @ self.weights
        if len(self.classes) == 2:
            return self.classes[(z[:, 0] > 0).astype(np.int64)]
        return self.classes[np.argmax(z, axis=1)]


def logistic_fit(features, targets, config: LogisticConfig | None = None) -> LogisticPredictor:
    """Full-batch gradient descent from zero on the mean log-loss."""
    cfg = config or LogisticConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets).astype(np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        c = int(classes[0]) if len(classes) else 0
        return LogisticPredictor(np.zeros((x.shape[1] + 1, 1)), np.array([c]), constant=c)
    xb = np.hstack([x, np.ones((len(x), 1))])
    cols = [classes[1]] if len(classes) == 2 else list(classes)
    targets_mat = np.stack([(y == c).astype(np.float64) for c in cols], axis=1)
    w = np.zeros((xb.shape[1], len(cols)))
    for _ in range(cfg.iterations):
        p = 1.0 / (1.0 + np.exp(-(xb @ w)))
        w -= cfg.lr * xb.T @ (p - targets_mat) / len(xb)
    return LogisticPredictor(w, classes)


def f1_score(pred, truth, positive: int = 1) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    tp = float(np.sum((pred == positive) & (truth == positive)))
    fp = float(np.sum((pred == positive) & (truth != positive)))
    fn = float(np.sum((pred != positive) & (truth == positive)))
    if tp + fp + fn == 0:
        return 1.0  # no positives anywhere and none predicted
    return 2 * tp / (2 * tp + fp + fn)


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(pred == truth)) if len(truth) else 1.0


def predictor_score(predictor: LogisticPredictor, features, targets, kind: str = "accuracy") -> float:
    pred = predictor.predict(features)
    if kind == "f1":
        return f1_score(pred, targets)
    if kind == "accuracy":
        return accuracy(pred, targets)
    raise ContractViolation(f"unknown score kind {kind!r}")


# -- label quality -----------------------------------------------------------

def _check_same(a: CategoricalDataset, b: CategoricalDataset) -> VariableSchema:
    if a.schema.cardinalities != b.schema.cardinalities:
        raise SchemaMismatch("datasets do not share a schema")
    return a.schema


def one_frequencies(ds: CategoricalDataset) -> np.ndarray:
    enc = one_hot_encode(ds)
    return enc.mean(axis=0) if len(enc) else np.zeros(ds.schema.width)


def mse_p(test: CategoricalDataset, samples: CategoricalDataset) -> float:
    """Mean squared difference of per-dimension frequencies of ones."""
    _check_same(test, samples)
    return float(np.mean((one_frequencies(test) - one_frequencies(samples)) ** 2))


def _without_block(enc: np.ndarray, schema: VariableSchema, var: int) -> np.ndarray:
    lo = schema.offsets[var]
    return np.delete(enc, np.s_[lo:lo + schema.cardinalities[var]], axis=1)


def _dimension_scores(source: CategoricalDataset, test: CategoricalDataset, per: str,
                      config: LogisticConfig | None) -> tuple[np.ndarray, list[str]]:
    """Scores on ``test`` of predictors fit on ``source``: f1 per one-hot dimension or accuracy per variable."""
    schema = source.schema
    src, tst = one_hot_encode(source), one_hot_encode(test)
    scores, flags = [], []
    for v, k in enumerate(schema.cardinalities):
        xs, xt = _without_block(src, schema, v), _without_block(tst, schema, v)
        if per == "variable":
            pred = logistic_fit(xs, source.values[:, v], config)
            if pred.degenerate:
                flags.append(schema.names[v])
            scores.append(predictor_score(pred, xt, test.values[:, v], "accuracy"))
        else:
            for c in range(k):
                pred = logistic_fit(xs, (source.values[:, v] == c).astype(np.int64), config)
                if pred.degenerate:
                    flags.append(f"{schema.names[v]}={c}")
                scores.append(predictor_score(pred, xt, (test.values[:, v] == c).astype(np.int64), "f1"))
    return np.array(scores), flags


def _mse_scores(train, samples, test, per, config) -> tuple[float, list[str]]:
    _check_same(train, samples)
    _check_same(train, test)
    real, _ = _dimension_scores(train, test, per, config)
    fake, flags = _dimension_scores(samples, test, per, config)
    return float(np.mean((real - fake) ** 2)), flags


def mse_f(train, samples, test, config: LogisticConfig | None = None) -> float:
    return _mse_scores(train, samples, test, "dimension", config)[0]


def mse_a(train, samples, test, config: LogisticConfig | None = None) -> float:
    return _mse_scores(train, samples, test, "variable", config)[0]


@dataclass
class MetricSummary:
    mean: float
    std: float
    values: list[float]


@dataclass
class LabelQualityReport:
    mse_p: MetricSummary
    mse_f: MetricSummary
    mse_a: MetricSummary
    repeats: int
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [("metric", "mean", "std")]
        for name in ("mse_p", "mse_f", "mse_a"):
            s = getattr(self, name)
            rows.append((name, f"{s.mean:.3e}", f"{s.std:.1e}"))
        out = _table(rows)
        out += f"\nrepeats: {self.repeats}"
        if self.degenerate:
            out += "\nconstant-predictor targets: " + ", ".join(sorted(set(self.degenerate)))
        return out


def _summary(values: Sequence[float]) -> MetricSummary:
    v = [float(x) for x in values]
    return MetricSummary(float(np.mean(v)), float(np.std(v)), v)


def label_quality(train: CategoricalDataset, test: CategoricalDataset, sampler, repeats: int = DEFAULT_REPEATS,
                  m: int | None = None, config: LogisticConfig | None = None) -> LabelQualityReport:
    """Repeat ``sampler(m, seed)`` with seeds ``0..repeats-1`` and summarise the three metrics."""
    m = len(test) if m is None else m
    p, f, a, flags = [], [], [], []
    for r in range(repeats):
        samples = sampler(m, r)
        p.append(mse_p(test, samples))
        vf, fl = _mse_scores(train, samples, test, "dimension", config)
        va, fl2 = _mse_scores(train, samples, test, "variable", config)
        f.append(vf)
        a.append(va)
        flags += fl + fl2
    return LabelQualityReport(_summary(p), _summary(f), _summary(a), repeats, flags)


def split_half_floor(dataset: CategoricalDataset, seed: int = 0, repeats: int = 1) -> float:
    """mse_p between two disjoint random halves of one real dataset, averaged over ``repeats`` splits."""
    if repeats < 1:
        raise ContractViolation("repeats must be >= 1")
    values = []
    for r in range(repeats):
        idx = np.random.default_rng(seed + r).permutation(len(dataset))
        half = len(idx) // 2
        values.append(mse_p(dataset.subset(np.sort(idx[:half])), dataset.subset(np.sort(idx[half:2 * half]))))
    return float(np.mean(values))


def hamming_score(predicted, truth) -> float:
    """Fraction of (sample, label) cells that agree."""
    p, t = np.asarray(predicted), np.asarray(truth)
    if p.shape != t.shape:
        raise SchemaMismatch(f"label matrices have shapes {p.shape} and {t.shape}")
    return float(np.mean(p == t)) if p.size else 1.0


# -- GAN-train / GAN-test ----------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class GanScorePair:
    gan_train: float
    gan_test: float
    per_label_train: list[float] = field(default_factory=list)
    per_label_test: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [("label", "GAN-train", "GAN-test")]
        for i, (a, b) in enumerate(zip(self.per_label_train, self.per_label_test)):
            rows.append((f"label{i}", f"{a:.3f}", f"{b:.3f}"))
        rows.append(("all", f"{self.gan_train:.3f}", f"{self.gan_test:.3f}"))
        return _table(rows)


class LabelClassifier:
    """Dense multi-label classifier with a sigmoid head, trained with ADAM on summed BCE."""

    def __init__(self, n_inputs: int, n_labels: int, config: ClassifierConfig | None = None):
        self.config = config or ClassifierConfig()
        h = self.config.hidden
        self.net = Network("classifier", [engine.dense(n_inputs, h), engine.activation("relu", h),
                                          engine.dense(h, h), engine.activation("relu", h),
                                          engine.dense(h, n_labels)])
        self.params = ParameterStore()
        self.net.init_params(self.params, engine.make_generator(self.config.seed))

    def logits(self, x) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).reshape(len(x), -1)
        return engine.forward(self.net, self.params, x, "eval")

    def fit(self, x, y) -> "LabelClassifier":
        cfg = self.config
        x = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(len(x), -1)
        y = torch.as_tensor(np.asarray(y, dtype=np.float64))
        gen = engine.make_generator(cfg.seed + 1)
        names = self.params.names()
        for _ in range(cfg.epochs):
            perm = torch.randperm(len(x), generator=gen)
            for start in range(0, len(x), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                out = engine.forward(self.net, self.params, x[idx], "train")
                loss = torch.nn.functional.binary_cross_entropy_with_logits(out, y[idx], reduction="none")
                grads = engine.backward(loss.sum(dim=1).mean(), self.params, names)
                engine.adam_step(self.params, grads, cfg.lr, beta1=0.9, beta2=0.999)
        return self

    def predict(self, x) -> np.ndarray:
        with torch.no_grad():
            return (self.logits(x) > 0).numpy().astype(np.int64)


def gan_train_test(real_train: tuple[np.ndarray, np.ndarray], real_test: tuple[np.ndarray, np.ndarray],
                   generated: tuple[np.ndarray, np.ndarray], config: ClassifierConfig | None = None
                   ) -> GanScorePair:
    """Each argument is ``(images, labels)``.

    gan_train: classifier fit on generated, scored on real_test.
    gan_test: classifier fit on real_train, scored on generated.
    """
    sets = [(np.asarray(i), np.asarray(l)) for i, l in (real_train, real_test, generated)]
    shapes = {s[0].shape[1:] for s in sets}
    widths = {s[1].shape[1] for s in sets}
    if len(shapes) != 1 or len(widths) != 1 or any(len(i) != len(l) for i, l in sets):
        raise SchemaMismatch("image shapes or label widths differ between sets")
    (xtr, ytr), (xte, yte), (xg, yg) = sets
    pixels, k = int(np.prod(xtr.shape[1:])), ytr.shape[1]
    on_gen = LabelClassifier(pixels, k, config).fit(xg, yg)
    on_real = LabelClassifier(pixels, k, config).fit(xtr, ytr)
    pred_test = on_gen.predict(xte)
    pred_gen = on_real.predict(xg)
    return GanScorePair(hamming_score(pred_test, yte), hamming_score(pred_gen, yg),
                        [hamming_score(pred_test[:, j], yte[:, j]) for j in range(k)],
                        [hamming_score(pred_gen[:, j], yg[:, j]) for j in range(k)])


def _table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
