"""
Gradient-boosted decision trees on logistic loss, written for the target classifier.

Trees are grown depth-wise with second-order (Newton) gains over at most
``n_bins`` candidate thresholds per feature. The model exposes a probability
``score`` and a thresholded ``label``; the evasion environment only ever sees
the label (see :class:`ModelOracle`).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateData, DimensionMismatch
from .features import FEATURE_DIM, extract

MALICIOUS = 1
BENIGN = 0

MODEL_FORMAT = "pe_evade.gbdt"
MODEL_VERSION = 1


@dataclass
class GbdtParams:
    n_rounds: int = 100
    max_depth: int = 5
    learning_rate: float = 0.1
    n_bins: int = 256
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    validation_fraction: float = 0.2
    seed: int = 0


@dataclass
class Tree:
    """Flat binary tree; node ``i`` is a leaf when ``feature[i] < 0``. Rows with x <= threshold go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            r, n, ff = rows[internal], node[internal], f[internal]
            go_left = X[r, ff] <= self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + e^-m) for y=1, log(1 + e^m) for y=0, computed stably
    signed = np.where(y > 0, margin, -margin)
    return float(np.mean(np.logaddexp(0.0, -signed)))


def roc_auc(y: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    from scipy.stats import rankdata

    y = np.asarray(y)
    s = np.asarray(scores, dtype=float)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateData("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class TrainingMetrics:
    train_logloss: List[float] = field(default_factory=list)
    holdout_auc: Optional[float] = None
    n_train: int = 0
    n_holdout: int = 0


@dataclass
class GbdtModel:
    trees: List[Tree]
    learning_rate: float
    base_score: float
    threshold: float = 0.9
    n_features: int = FEATURE_DIM
    params: Optional[GbdtParams] = None
    metrics: TrainingMetrics = field(default_factory=TrainingMetrics)
    excluded_ids: List[str] = field(default_factory=list)  # samples withheld from training

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return self.base_score + self.learning_rate * total

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.margin(X))

    def score(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise DimensionMismatch("score takes a single vector; use predict_proba for batches")
        return float(self.predict_proba(x)[0])

    def label(self, x: np.ndarray) -> int:
        return MALICIOUS if self.score(x) >= self.threshold else BENIGN

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "n_features": self.n_features,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "threshold": self.threshold,
            "params": asdict(self.params) if self.params else None,
            "metrics": asdict(self.metrics),
            "excluded_ids": list(self.excluded_ids),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"not a {MODEL_FORMAT} v{MODEL_VERSION} model")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=d["learning_rate"],
            base_score=d["base_score"],
            threshold=d["threshold"],
            n_features=d["n_features"],
            params=GbdtParams(**d["params"]) if d.get("params") else None,
            metrics=TrainingMetrics(**d.get("metrics", {})),
            excluded_ids=list(d.get("excluded_ids", [])),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "GbdtModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def score(model: GbdtModel, x: np.ndarray) -> float:
    return model.score(x)


def label(model: GbdtModel, x: np.ndarray) -> int:
    return model.label(x)


# -- training ------------------------------------------------------------------


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    ids: List[str] = field(default_factory=list)
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (n, d) with one label per row")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]
        if not self.provenance:
            self.provenance = ["original"] * len(self.y)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx: Sequence[int]) -> "LabeledDataset":
        idx = list(idx)
        return LabeledDataset(
            self.X[idx], self.y[idx], [self.ids[i] for i in idx], [self.provenance[i] for i in idx]
        )

    def extend(self, X: np.ndarray, y: Sequence[int], ids: Sequence[str], provenance: str) -> "LabeledDataset":
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.X.shape[1])
        return LabeledDataset(
            np.vstack([self.X, X]),
            np.concatenate([self.y, np.asarray(y, dtype=np.int64)]),
            self.ids + list(ids),
            self.provenance + [provenance] * len(ids),
        )


def stratified_split(y: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(train_idx, holdout_idx); each class contributes round(fraction * n_c) rows to the holdout."""
    rng = np.random.default_rng(seed)
    train, hold = [], []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        if fraction > 0 and len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        hold.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(hold))


def candidate_thresholds(col: np.ndarray, n_bins: int) -> np.ndarray:
    """Split points for one feature: midpoints after up to ``n_bins - 1`` quantile cut values."""
    uniq = np.unique(col)
    if uniq.size <= 1:
        return np.empty(0)
    if uniq.size <= n_bins:
        cuts = uniq[:-1]
    else:
        q = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
        cuts = np.unique(np.quantile(col, q, method="lower"))
        cuts = cuts[cuts < uniq[-1]]
    nxt = uniq[np.searchsorted(uniq, cuts, side="right")]
    return (cuts + (nxt - cuts) / 2.0).astype(np.float64)


class _Binned:
    def __init__(self, X: np.ndarray, n_bins: int):
        self.active: List[int] = []
        self.thresholds: List[np.ndarray] = []
        cols = []
        for j in range(X.shape[1]):
            thr = candidate_thresholds(X[:, j], n_bins)
            if thr.size == 0:
                continue
            self.active.append(j)
            self.thresholds.append(thr)
            cols.append(np.searchsorted(thr, X[:, j], side="left").astype(np.uint8))
        self.n_bins = n_bins
        self.codes = np.stack(cols, axis=1) if cols else np.zeros((X.shape[0], 0), dtype=np.uint8)
        # flat histogram index of every (row, active feature)
        self.flat = self.codes.astype(np.int64) + (np.arange(len(self.active), dtype=np.int64) * n_bins)[None, :]


def _histograms(binned: _Binned, rows: np.ndarray, g: np.ndarray, h: np.ndarray):
    d, nb = len(binned.active), binned.n_bins
    idx = binned.flat[rows].ravel()
    G = np.bincount(idx, weights=np.repeat(g[rows], d), minlength=d * nb).reshape(d, nb)
    H = np.bincount(idx, weights=np.repeat(h[rows], d), minlength=d * nb).reshape(d, nb)
    return G, H


def _best_split(G, H, params: GbdtParams):
    lam = params.reg_lambda
    Gt, Ht = G[0].sum(), H[0].sum()
    GL = np.cumsum(G, axis=1)
    HL = np.cumsum(H, axis=1)
    GR = Gt - GL
    HR = Ht - HL
    gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - Gt**2 / (Ht + lam)
    valid = (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    f, b = divmod(flat, G.shape[1])
    return float(gain[f, b]), f, b


def _grow_tree(binned: _Binned, g: np.ndarray, h: np.ndarray, params: GbdtParams) -> Tuple[Tree, np.ndarray]:
    """Returns the tree and the leaf value assigned to every training row."""
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    row_values = np.zeros(len(g))
    root = new_node()
    all_rows = np.arange(len(g))
    frontier = [(root, all_rows, _histograms(binned, all_rows, g, h))]
    for depth in range(params.max_depth + 1):
        nxt = []
        for node, rows, (G, H) in frontier:
            Gs, Hs = float(g[rows].sum()), float(h[rows].sum())
            leaf = -Gs / (Hs + params.reg_lambda)
            split = None
            if depth < params.max_depth and len(binned.active):
                gain, f, b = _best_split(G, H, params)
                if gain > 1e-12:
                    split = (f, b)
            if split is None:
                value[node] = leaf
                row_values[rows] = leaf
                continue
            f, b = split
            go_left = binned.codes[rows, f] <= b
            lrows, rrows = rows[go_left], rows[~go_left]
            feature[node] = binned.active[f]
            threshold[node] = float(binned.thresholds[f][b])
            ln, rn = new_node(), new_node()
            left[node], right[node] = ln, rn
            # histogram subtraction: build the smaller child, derive the other
            if len(lrows) <= len(rrows):
                Gl, Hl = _histograms(binned, lrows, g, h)
                Gr, Hr = G - Gl, H - Hl
            else:
                Gr, Hr = _histograms(binned, rrows, g, h)
                Gl, Hl = G - Gr, H - Hr
            nxt.append((ln, lrows, (Gl, Hl)))
            nxt.append((rn, rrows, (Gr, Hr)))
        frontier = nxt
        if not frontier:
            break
    tree = Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )
    return tree, row_values


def validation_rows(data: LabeledDataset, params: GbdtParams) -> Tuple[np.ndarray, np.ndarray]:
    """(train_idx, holdout_idx) as used by :func:`train` when no explicit holdout is given."""
    if params.validation_fraction > 0:
        tr, ho = stratified_split(data.y, params.validation_fraction, params.seed)
        if len(np.unique(data.y[tr])) == 2:
            return tr, ho
    return np.arange(len(data)), np.empty(0, dtype=np.int64)


def train(
    data: LabeledDataset,
    params: Optional[GbdtParams] = None,
    threshold: float = 0.9,
    holdout_idx: Optional[Sequence[int]] = None,
) -> GbdtModel:
    """Fit a model; a stratified ``validation_fraction`` of rows is held out to report AUC.

    ``holdout_idx`` pins the held-out rows explicitly (retraining keeps the
    original validation rows this way).
    """
    params = params or GbdtParams()
    if len(data) < 2 or len(np.unique(data.y)) < 2:
        raise DegenerateData("training needs at least two rows covering both classes")
    if data.X.shape[1] != FEATURE_DIM and data.X.shape[1] < 1:
        raise DimensionMismatch("empty feature matrix")
    if holdout_idx is None:
        tr, ho = validation_rows(data, params)
    else:
        ho = np.unique(np.asarray(holdout_idx, dtype=np.int64))
        tr = np.setdiff1d(np.arange(len(data)), ho)
        if len(np.unique(data.y[tr])) < 2:
            raise DegenerateData("training rows outside the holdout cover a single class")
    X, y = data.X[tr], data.y[tr].astype(np.float64)

    prior = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = float(np.log(prior / (1 - prior)))
    binned = _Binned(X, params.n_bins)
    margin = np.full(len(y), base)
    metrics = TrainingMetrics(train_logloss=[log_loss(y, margin)], n_train=len(tr), n_holdout=len(ho))
    trees: List[Tree] = []
    for _ in range(params.n_rounds):
        p = sigmoid(margin)
        g, h = p - y, p * (1 - p)
        tree, row_values = _grow_tree(binned, g, h, params)
        step = params.learning_rate * row_values
        before = metrics.train_logloss[-1]
        # shrink an overshooting Newton step until the loss stops rising
        for _ in range(30):
            after = log_loss(y, margin + step)
            if after <= before:
                break
            tree.value *= 0.5
            row_values *= 0.5
            step = params.learning_rate * row_values
        else:
            break
        margin = margin + step
        trees.append(tree)
        metrics.train_logloss.append(after)

    model = GbdtModel(
        trees=trees,
        learning_rate=params.learning_rate,
        base_score=base,
        threshold=threshold,
        n_features=data.X.shape[1],
        params=params,
        metrics=metrics,
    )
    if len(ho) and len(np.unique(data.y[ho])) == 2:
        metrics.holdout_auc = roc_auc(data.y[ho], model.predict_proba(data.X[ho]))
    return model


# -- threshold calibration -------------------------------------------------------


@dataclass
class Calibration:
    threshold: float
    fpr: float
    tpr: float


def calibrate_threshold(model: GbdtModel, validation: LabeledDataset, target_fpr: float) -> Calibration:
    """Smallest observed score usable as threshold with empirical FPR <= ``target_fpr``."""
    y = validation.y
    if len(np.unique(y)) < 2:
        raise DegenerateData("calibration needs both classes")
    s = model.predict_proba(validation.X)
    return calibrate_scores(y, s, target_fpr)


def calibrate_scores(y: np.ndarray, s: np.ndarray, target_fpr: float) -> Calibration:
    y = np.asarray(y)
    s = np.asarray(s, dtype=float)
    benign = np.sort(s[y == 0])[::-1]
    n_b = len(benign)
    allowed = int(np.floor(target_fpr * n_b + 1e-12))
    if allowed >= n_b:
        eta = float(s.min())
    else:
        # every threshold above the (allowed+1)-th highest benign score qualifies
        bound = benign[allowed]
        above = s[s > bound]
        eta = float(above.min()) if above.size else float(np.nextafter(bound, np.inf))
    fpr = float((s[y == 0] >= eta).mean())
    tpr = float((s[y == 1] >= eta).mean())
    return Calibration(eta, fpr, tpr)


# -- black-box handle -------------------------------------------------------------


class ModelOracle:
    """Label-only view of a model over raw PE bytes.

    The model is captured in a closure, so holders of the oracle can ask for a
    verdict but have no attribute path to the score.
    """

    def __init__(self, model: GbdtModel):
        def _label(data: bytes) -> int:
            return model.label(extract(data))

        self._label = _label
        self.queries = 0

    def label(self, data: bytes) -> int:
        self.queries += 1
        return self._label(data)
