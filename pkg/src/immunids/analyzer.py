"""Data analyzer: per-dimension mature functions and the global combining function.

Both levels are classifiers trained on binary labels (0 = normal, 1 = attack).
A dimension function sees one projected coordinate; the global function is a
decision tree over the vector of dimension outputs.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError

GAIN_TIE = 1e-12
ATTACK = 1
NORMAL = 0


def binary_labels(labels) -> np.ndarray:
    """Collapse Label objects / class names / bools into 0 (normal) and 1 (attack)."""
    out = []
    for lab in labels:
        if hasattr(lab, "is_attack"):
            out.append(ATTACK if lab.is_attack else NORMAL)
        elif isinstance(lab, str):
            out.append(NORMAL if lab in ("normal", "normal.") else ATTACK)
        else:
            out.append(ATTACK if int(lab) else NORMAL)
    return np.array(out, dtype=int)


def entropy(counts) -> float | np.ndarray:
    """Shannon entropy (bits) of class counts; vectorized over leading axes."""
    c = np.asarray(counts, dtype=float)
    total = c.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(total > 0, c / total, 0.0)
        terms = np.where(frac > 0, -frac * np.log2(np.where(frac > 0, frac, 1.0)), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def midpoint(lo: float, hi: float) -> float:
    mid = (lo + hi) / 2.0
    # adjacent floats can round the midpoint up onto hi
    return lo if mid >= hi else mid


# --------------------------------------------------------------------------
# Decision tree
# --------------------------------------------------------------------------

@dataclass
class TreeNode:
    counts: tuple[int, ...]
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class DecisionTreeModel:
    root: TreeNode
    classes: tuple
    n_features: int
    max_depth: int | None = None
    min_samples_leaf: int = 1

    def leaf(self, x) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def predict_proba(self, x) -> dict:
        counts = self.leaf(x).counts
        total = sum(counts)
        return {c: n / total for c, n in zip(self.classes, counts)}

    def class_probability(self, x, cls=ATTACK) -> float:
        return self.predict_proba(x).get(cls, 0.0)

    def predict(self, x):
        counts = self.leaf(x).counts
        return self.classes[int(np.argmax(counts))]

    def nodes(self) -> list[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def depth(self) -> int:
        def d(node):
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))
        return d(self.root)

    def __eq__(self, other):
        return isinstance(other, DecisionTreeModel) and self.to_text() == other.to_text()

    def to_text(self) -> str:
        ids = {id(node): k for k, node in enumerate(self.nodes())}
        lines = ["tree v1",
                 "classes " + json.dumps(list(self.classes)),
                 f"n_features {self.n_features} max_depth {self.max_depth if self.max_depth is not None else 'none'}"
                 f" min_samples_leaf {self.min_samples_leaf}"]
        for node in self.nodes():
            k = ids[id(node)]
            counts = " ".join(str(c) for c in node.counts)
            if node.is_leaf:
                lines.append(f"node {k} leaf {counts}")
            else:
                lines.append(f"node {k} split {node.feature} {node.threshold!r} "
                             f"{ids[id(node.left)]} {ids[id(node.right)]} {counts}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DecisionTreeModel":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        try:
            if lines[0] != "tree v1":
                raise ParseError("unsupported tree format " + repr(lines[0]))
            classes = tuple(json.loads(lines[1][len("classes "):]))
            head = lines[2].split()
            n_features = int(head[1])
            max_depth = None if head[3] == "none" else int(head[3])
            min_leaf = int(head[5])
            raw = {}
            for ln in lines[3:]:
                parts = ln.split()
                raw[int(parts[1])] = parts[2:]
            nodes = {}
            for k in sorted(raw, reverse=True):
                parts = raw[k]
                if parts[0] == "leaf":
                    nodes[k] = TreeNode(tuple(int(c) for c in parts[1:]))
                else:
                    feature, threshold, lid, rid = int(parts[1]), float(parts[2]), int(parts[3]), int(parts[4])
                    nodes[k] = TreeNode(tuple(int(c) for c in parts[5:]), feature, threshold,
                                        nodes[lid], nodes[rid])
        except (IndexError, ValueError, KeyError) as exc:
            raise ParseError(f"bad tree: {exc}") from None
        return cls(nodes[0], classes, n_features, max_depth, min_leaf)


def split_candidates(x: np.ndarray, y_idx: np.ndarray, n_classes: int, min_samples_leaf: int = 1):
    """All admissible splits of one node as (feature, threshold, gain), in (feature, threshold) order."""
    n, k = x.shape
    parent = entropy(np.bincount(y_idx, minlength=n_classes))
    out = []
    for f in range(k):
        order = np.argsort(x[:, f], kind="mergesort")
        vals = x[order, f]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y_idx[order]] = 1.0
        cum = np.cumsum(onehot, axis=0)
        cut = np.flatnonzero(vals[:-1] != vals[1:])
        if cut.size == 0:
            continue
        n_left = cut + 1
        keep = (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        cut, n_left = cut[keep], n_left[keep]
        if cut.size == 0:
            continue
        left = cum[cut]
        right = cum[-1] - left
        gain = parent - (n_left / n) * entropy(left) - ((n - n_left) / n) * entropy(right)
        for c, g in zip(cut, gain):
            out.append((f, midpoint(vals[c], vals[c + 1]), float(g)))
    return out


def best_split(candidates):
    """Highest gain; near-ties go to the earliest (feature, threshold) candidate."""
    if not candidates:
        return None
    top = max(g for _, _, g in candidates)
    for f, t, g in candidates:
        if g >= top - GAIN_TIE:
            return f, t, g
    return None


def train_decision_tree(data, labels, max_depth: int | None = None,
                        min_samples_leaf: int = 1) -> DecisionTreeModel:
    """Greedy top-down tree induction with entropy information gain.

    Thresholds are midpoints between consecutive distinct values and a row goes
    left when ``x[feature] <= threshold``. A node becomes a leaf when pure, at
    ``max_depth``, or when no split keeps ``min_samples_leaf`` rows on both sides.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("empty training data")
    if x.shape[1] == 0:
        raise ValidationError("training data has no features")
    y = list(labels)
    if len(y) != x.shape[0]:
        raise ValidationError("labels and data differ in length")
    classes = tuple(sorted({v.item() if isinstance(v, np.generic) else v for v in y}))
    y_idx = np.array([classes.index(v) for v in y], dtype=int)
    n_classes = len(classes)

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        counts = tuple(int(c) for c in np.bincount(y_idx[rows], minlength=n_classes))
        node = TreeNode(counts)
        if sum(1 for c in counts if c) <= 1 or (max_depth is not None and depth >= max_depth):
            return node
        if rows.size < 2 * min_samples_leaf:
            return node
        choice = best_split(split_candidates(x[rows], y_idx[rows], n_classes, min_samples_leaf))
        # an impure node still splits at zero gain (xor-like data), so consistent
        # data is always fit exactly; only a node with no admissible cut stops
        if choice is None:
            return node
        f, t, _ = choice
        mask = x[rows, f] <= t
        node.feature, node.threshold = int(f), float(t)
        node.left = grow(rows[mask], depth + 1)
        node.right = grow(rows[~mask], depth + 1)
        return node

    root = grow(np.arange(x.shape[0]), 0)
    return DecisionTreeModel(root, classes, x.shape[1], max_depth, min_samples_leaf)


# --------------------------------------------------------------------------
# Sequential covering rule list
# --------------------------------------------------------------------------

OPS = ("<=", ">")


@dataclass(frozen=True)
class Rule:
    conditions: tuple[tuple[int, str, float], ...]
    predicted: object
    coverage: int
    accuracy: float

    def fires(self, x) -> bool:
        for f, op, t in self.conditions:
            if op == "<=":
                if not x[f] <= t:
                    return False
            elif not x[f] > t:
                return False
        return True


@dataclass
class RuleList:
    rules: list[Rule]
    default_class: object
    default_rate: float = 0.0  # positive-class share among examples left uncovered
    positive: object = ATTACK

    def matching_rule(self, x) -> Rule | None:
        for rule in self.rules:
            if rule.fires(x):
                return rule
        return None

    def predict(self, x):
        rule = self.matching_rule(x)
        return self.default_class if rule is None else rule.predicted

    def class_probability(self, x, cls=ATTACK) -> float:
        rule = self.matching_rule(x)
        if rule is None:
            p = self.default_rate
        elif rule.predicted == self.positive:
            p = rule.accuracy
        else:
            p = 1.0 - rule.accuracy
        return p if cls == self.positive else 1.0 - p

    def __eq__(self, other):
        return isinstance(other, RuleList) and self.to_text() == other.to_text()

    def to_text(self) -> str:
        lines = ["rules v1",
                 "default " + json.dumps([self.default_class, self.default_rate, self.positive])]
        for r in self.rules:
            conds = " ".join(f"{f} {op} {t!r}" for f, op, t in r.conditions)
            lines.append(f"rule {json.dumps(r.predicted)} {r.coverage} {r.accuracy!r} {len(r.conditions)} {conds}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RuleList":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        try:
            if lines[0] != "rules v1":
                raise ParseError("unsupported rule list format " + repr(lines[0]))
            default_class, default_rate, positive = json.loads(lines[1][len("default "):])
            rules = []
            for ln in lines[2:]:
                parts = ln.split()
                predicted = json.loads(parts[1])
                coverage, accuracy, k = int(parts[2]), float(parts[3]), int(parts[4])
                rest = parts[5:]
                conds = tuple((int(rest[3 * i]), rest[3 * i + 1], float(rest[3 * i + 2])) for i in range(k))
                rules.append(Rule(conds, predicted, coverage, accuracy))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"bad rule list: {exc}") from None
        return cls(rules, default_class, float(default_rate), positive)


def _majority(y: Sequence):
    values, counts = np.unique(np.asarray(list(y), dtype=object), return_counts=True)
    # ties resolve to the smallest label
    return values[int(np.argmax(counts))]


def _best_condition(x: np.ndarray, pos: np.ndarray):
    """Best single condition over covered rows: (accuracy, coverage, feature, op, threshold)."""
    best = None
    n = x.shape[0]
    total_pos = int(pos.sum())
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="mergesort")
        vals = x[order, f]
        cum = np.cumsum(pos[order])
        cut = np.flatnonzero(vals[:-1] != vals[1:])
        if cut.size == 0:
            continue
        for op_i, op in enumerate(OPS):
            if op == "<=":
                cov, hits = cut + 1, cum[cut]
            else:
                cov, hits = n - cut - 1, total_pos - cum[cut]
            valid = np.flatnonzero(hits > 0)
            if valid.size == 0:
                continue
            acc = hits[valid] / cov[valid]
            top = valid[acc == acc.max()]
            top = top[cov[top] == cov[top].max()]
            c = int(top[0])  # lowest threshold among equals
            t = midpoint(vals[cut[c]], vals[cut[c] + 1])
            a = hits[c] / cov[c]
            key = (-a, -int(cov[c]), f, op_i, t)
            if best is None or key < best[0]:
                best = (key, (float(a), int(cov[c]), f, op, t))
    return None if best is None else best[1]


def train_rule_list(data, labels, min_rule_accuracy: float = 0.9, positive=None,
                    max_conditions: int = 4) -> RuleList:
    """Sequential covering for the ``positive`` class (defaults to the minority class).

    Each rule starts empty and greedily adds the condition with the best rule
    accuracy (ties: larger coverage, lower feature index) until it is exact,
    no condition improves it, or ``max_conditions`` is reached. Rules below
    ``min_rule_accuracy`` end the search; covered rows are removed after each
    accepted rule.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("empty training data")
    y = list(labels)
    if len(y) != x.shape[0]:
        raise ValidationError("labels and data differ in length")
    classes = sorted(set(y))
    if positive is None:
        if len(classes) < 2:
            return RuleList([], classes[0], 0.0, None)
        counts = {c: y.count(c) for c in classes}
        positive = min(classes, key=lambda c: (counts[c], -classes.index(c)))
    y_arr = np.array(y, dtype=object)
    is_pos = np.array([v == positive for v in y], dtype=int)

    remaining = np.arange(x.shape[0])
    rules: list[Rule] = []
    while remaining.size and is_pos[remaining].any():
        covered = remaining
        conds: list[tuple[int, str, float]] = []
        accuracy = is_pos[covered].mean()
        while len(conds) < max_conditions and accuracy < 1.0:
            cand = _best_condition(x[covered], is_pos[covered])
            if cand is None or cand[0] <= accuracy:
                break
            acc, _, f, op, t = cand
            conds.append((int(f), op, float(t)))
            mask = x[covered, f] <= t if op == "<=" else x[covered, f] > t
            covered = covered[mask]
            accuracy = acc
        if not conds or accuracy < min_rule_accuracy:
            break
        rules.append(Rule(tuple(conds), positive, int(covered.size), float(accuracy)))
        remaining = np.setdiff1d(remaining, covered, assume_unique=True)

    if remaining.size:
        default = _majority(y_arr[remaining])
        rate = float(is_pos[remaining].mean())
    else:
        default = _majority(y_arr)
        rate = float(is_pos.mean())
    default = default.item() if hasattr(default, "item") else default
    return RuleList(rules, default, rate, positive)


# --------------------------------------------------------------------------
# Mature functions
# --------------------------------------------------------------------------

@dataclass
class AnalyzerConfig:
    model_kind: str = "tree"  # "tree" or "rules"
    max_depth: int | None = 8
    min_samples_leaf: int = 1
    global_max_depth: int | None = 8
    global_min_samples_leaf: int = 1
    rule_min_accuracy: float = 0.9
    threads: int = 1


@dataclass
class DimensionFunction:
    dimension: int
    model: DecisionTreeModel | RuleList

    def output(self, projected) -> float:
        return float(self.model.class_probability([projected[self.dimension]], ATTACK))


@dataclass
class GlobalFunction:
    model: DecisionTreeModel
    p: int

    def output(self, dim_outputs) -> float:
        if len(dim_outputs) != self.p:
            raise ValidationError(f"global function expects {self.p} inputs, got {len(dim_outputs)}")
        return float(self.model.class_probability(dim_outputs, ATTACK))


def _train_dimension(args):
    d, column, y, cfg = args
    if cfg.model_kind == "tree":
        model = train_decision_tree(column, y, cfg.max_depth, cfg.min_samples_leaf)
    elif cfg.model_kind == "rules":
        model = train_rule_list(column, y, cfg.rule_min_accuracy, positive=ATTACK)
    else:
        raise ValidationError(f"unknown model kind {cfg.model_kind!r}")
    return DimensionFunction(d, model)


def dimension_outputs(dims: Sequence[DimensionFunction], projected: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(projected, dtype=float))
    return np.array([[fn.output(row) for fn in dims] for row in x])


def train_analyzer(projected, labels, config: AnalyzerConfig | None = None):
    """Train one function per projected dimension, then the global tree on their outputs."""
    cfg = config or AnalyzerConfig()
    x = np.asarray(projected, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError("projected data must be N x p with p >= 1")
    y = [int(v) for v in binary_labels(labels)]
    jobs = [(d, x[:, [d]], y, cfg) for d in range(x.shape[1])]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            dims = list(pool.map(_train_dimension, jobs))
    else:
        dims = [_train_dimension(job) for job in jobs]
    outputs = dimension_outputs(dims, x)
    global_tree = train_decision_tree(outputs, y, cfg.global_max_depth, cfg.global_min_samples_leaf)
    return dims, GlobalFunction(global_tree, x.shape[1])


def evaluate(dims: Sequence[DimensionFunction], global_fn: GlobalFunction, projected_record) -> float:
    """Adaptive-layer intrusion probability of one projected record."""
    z = np.asarray(projected_record, dtype=float)
    if z.shape != (global_fn.p,):
        raise ValidationError(f"expected a projected vector of length {global_fn.p}, got shape {z.shape}")
    return global_fn.output([fn.output(z) for fn in dims])


def analyzer_to_text(dims: Sequence[DimensionFunction], global_fn: GlobalFunction) -> str:
    parts = [f"analyzer v1 p {global_fn.p}"]
    for fn in dims:
        body = fn.model.to_text()
        parts.append(f"dimension {fn.dimension} {len(body.splitlines())}")
        parts.append(body.rstrip("\n"))
    body = global_fn.model.to_text()
    parts.append(f"global {len(body.splitlines())}")
    parts.append(body.rstrip("\n"))
    return "\n".join(parts) + "\n"


def analyzer_from_text(text: str):
    lines = text.splitlines()
    try:
        head = lines[0].split()
        if head[:2] != ["analyzer", "v1"]:
            raise ParseError("unsupported analyzer format " + repr(lines[0]))
        p = int(head[3])
        pos, dims = 1, []
        for _ in range(p):
            _, d, count = lines[pos].split()
            body = "\n".join(lines[pos + 1:pos + 1 + int(count)])
            model = RuleList.from_text(body) if body.startswith("rules") else DecisionTreeModel.from_text(body)
            dims.append(DimensionFunction(int(d), model))
            pos += 1 + int(count)
        _, count = lines[pos].split()
        global_tree = DecisionTreeModel.from_text("\n".join(lines[pos + 1:pos + 1 + int(count)]))
    except (IndexError, ValueError) as exc:
        raise ParseError(f"bad analyzer: {exc}") from None
    return dims, GlobalFunction(global_tree, p)


# --------------------------------------------------------------------------
# Feedback store
# --------------------------------------------------------------------------

@dataclass
class FeedbackStore:
    """Bounded FIFO of (feature vector, binary label) rows the analyzer is trained from."""

    capacity: int = 100_000
    rows: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("store capacity must be positive")
        self.rows = deque(self.rows, maxlen=self.capacity)

    def __len__(self):
        return len(self.rows)

    def extend(self, features, labels) -> int:
        n = 0
        for vec, lab in zip(features, binary_labels(labels)):
            self.rows.append((tuple(float(v) for v in vec), int(lab)))
            n += 1
        return n

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.array([r[0] for r in self.rows], dtype=float)
        y = np.array([r[1] for r in self.rows], dtype=int)
        return x, y

    def to_text(self) -> str:
        lines = [f"store v1 capacity {self.capacity} rows {len(self.rows)}"]
        lines += [f"{lab} " + " ".join(repr(v) for v in vec) for vec, lab in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeedbackStore":
        lines = text.splitlines()
        try:
            head = lines[0].split()
            if head[:2] != ["store", "v1"]:
                raise ParseError("unsupported store format " + repr(lines[0]))
            store = cls(int(head[3]))
            for ln in lines[1:1 + int(head[5])]:
                parts = ln.split()
                store.rows.append((tuple(float(v) for v in parts[1:]), int(parts[0])))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"bad store: {exc}") from None
        return store


def retrain_with_feedback(store: FeedbackStore, features, labels, projection, config=None):
    """Append confirmed rows to ``store`` (evicting the oldest) and retrain from scratch."""
    from .optimizer import project_matrix

    store.extend(features, labels)
    x, y = store.matrix()
    return train_analyzer(project_matrix(projection, x), y, config)
