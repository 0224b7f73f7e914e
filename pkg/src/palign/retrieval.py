"""Exact cosine retrieval and the retrieval-flavored evaluations.

Everything here is brute force on purpose: galleries are small enough that
an exact index (unit-normalized matrix, full dot products) is both the
simplest and the most trustworthy implementation. Ties in any ranking break
toward earlier insertion order so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "CosineIndex",
    "RecallReport",
    "CountDataset",
    "PromptBundle",
    "ProbeConfig",
    "ProbeResult",
    "build_index",
    "query_topk",
    "recall_at_k",
    "knn_count_eval",
    "select_rag_examples",
    "majority_label_oracle",
    "evaluate_rag",
    "linear_probe_classify",
]


@dataclass
class CosineIndex:
    """Immutable gallery of unit-normalized vectors plus aligned ids."""

    matrix: np.ndarray  # (n, d), rows unit norm
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(vectors, ids) -> CosineIndex:
    ids = list(ids)
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError(f"need one row per id: matrix {matrix.shape}, {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise DataError("gallery ids must be unique")
    norms = np.linalg.norm(matrix, axis=1)
    for i, n in enumerate(norms):
        if n == 0.0:
            raise DataError(f"zero-norm gallery vector for id {ids[i]!r}")
    return CosineIndex(matrix=matrix / norms[:, None], ids=ids)


def query_topk(
    index: CosineIndex, q: np.ndarray, k: int, exclude: set[str] | None = None
) -> list[tuple[str, float]]:
    """Exact top-k by cosine similarity; ties go to earlier insertion order."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q = np.asarray(q, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise DataError("zero-norm query vector")
    sims = index.matrix @ (q / qn)
    if exclude:
        keep = np.fromiter((id not in exclude for id in index.ids), dtype=bool, count=len(index))
        candidates = np.nonzero(keep)[0]
    else:
        candidates = np.arange(len(index))
    # stable sort on negated similarity preserves insertion order among ties
    order = candidates[np.argsort(-sims[candidates], kind="stable")]
    return [(index.ids[i], float(sims[i])) for i in order[:k]]


@dataclass
class RecallReport:
    ks: list[int]
    hits: dict[int, int]
    n_queries: int

    @property
    def rates(self) -> dict[int, float]:
        return {k: self.hits[k] / self.n_queries for k in self.ks}

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "recall": {str(k): self.hits[k] / self.n_queries for k in self.ks},
        }


def recall_at_k(
    index: CosineIndex,
    queries: dict[str, np.ndarray],
    ground_truth: dict[str, set[str]],
    ks,
) -> RecallReport:
    """A query scores a hit at k iff any of its truth ids is in the top-k.

    Queries present in the gallery are excluded from their own rankings.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise DataError("ks must be non-empty")
    if not queries:
        raise DataError("queries must be non-empty")
    hits = {k: 0 for k in ks}
    k_max = max(ks)
    for qid, vec in queries.items():
        truth = ground_truth.get(qid)
        if not truth:
            raise DataError(f"query {qid!r} has an empty ground-truth set")
        top = query_topk(index, vec, k_max, exclude={qid})
        top_ids = [id for id, _ in top]
        for k in ks:
            if any(t in top_ids[:k] for t in truth):
                hits[k] += 1
    return RecallReport(ks=ks, hits=hits, n_queries=len(queries))


# ---------------------------------------------------------------------------
# kNN counting
# ---------------------------------------------------------------------------


@dataclass
class CountDataset:
    """Embeddings with integer count labels."""

    ids: list[str]
    counts: np.ndarray  # (n,) integers >= 0
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.ids) != len(self.counts) or len(self.ids) != len(self.vectors):
            raise DataError("ids, counts, and vectors must have equal length")
        if np.any(self.counts < 0):
            raise DataError("counts must be >= 0")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_store(cls, store, labels: dict[str, str], featurize) -> "CountDataset":
        ids = [id for id in store.ids() if id in labels]
        if not ids:
            raise DataError("no labeled ids found in the store")
        try:
            counts = np.array([int(labels[id]) for id in ids])
        except ValueError as exc:
            raise DataError(f"count labels must be integers: {exc}") from None
        vectors = np.stack([featurize(id) for id in ids])
        return cls(ids=ids, counts=counts, vectors=vectors)


def _majority_count(neighbor_counts: np.ndarray) -> int:
    """Most frequent count; on a tie, the mean count rounded half-up."""
    values, freq = np.unique(neighbor_counts, return_counts=True)
    top = freq.max()
    modes = values[freq == top]
    if len(modes) == 1:
        return int(modes[0])
    return int(np.floor(neighbor_counts.mean() + 0.5))


def _knn_predict(sims_row: np.ndarray, counts: np.ndarray, k: int) -> int:
    order = np.argsort(-sims_row, kind="stable")[:k]
    return _majority_count(counts[order])


def knn_count_eval(train: CountDataset, test: CountDataset, ks=(1, 3, 5, 10)) -> dict:
    """Count prediction by k-nearest-neighbor vote over cosine similarity.

    k is selected by leave-one-out classification accuracy on the train
    split (smallest k wins ties) and then scored on the test split.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise DataError("ks must be non-empty")
    if not len(train) or not len(test):
        raise DataError("train and test splits must be non-empty")
    index = build_index(train.vectors, train.ids)
    train_sims = index.matrix @ index.matrix.T
    np.fill_diagonal(train_sims, -np.inf)  # leave-one-out

    loo_accuracy = {}
    for k in ks:
        correct = sum(
            _knn_predict(train_sims[i], train.counts, k) == train.counts[i]
            for i in range(len(train))
        )
        loo_accuracy[k] = correct / len(train)
    best = max(loo_accuracy.values())
    chosen_k = min(k for k in ks if loo_accuracy[k] == best)

    test_norms = np.linalg.norm(test.vectors, axis=1, keepdims=True)
    if np.any(test_norms == 0.0):
        bad = test.ids[int(np.argmin(test_norms))]
        raise DataError(f"zero-norm test vector for id {bad!r}")
    test_sims = (test.vectors / test_norms) @ index.matrix.T
    preds = np.array(
        [_knn_predict(test_sims[i], train.counts, chosen_k) for i in range(len(test))]
    )
    err = preds - test.counts
    return {
        "chosen_k": chosen_k,
        "loo_accuracy": {str(k): loo_accuracy[k] for k in ks},
        "mae": float(np.abs(err).mean()),
        "rmse": float(np.sqrt((err.astype(np.float64) ** 2).mean())),
    }


# ---------------------------------------------------------------------------
# retrieval-augmented prompting
# ---------------------------------------------------------------------------


@dataclass
class PromptBundle:
    """Nearest labeled examples for one query, most similar first."""

    query: str
    examples: list[dict]  # {"id", "label", "score"}

    def to_dict(self) -> dict:
        return {"query": self.query, "examples": self.examples}


def select_rag_examples(
    index: CosineIndex, query_id: str, query_vec: np.ndarray, labels: dict[str, str], k: int = 3
) -> PromptBundle:
    """Pick the query's k nearest labeled gallery items, excluding itself."""
    labeled = set(labels)
    pool = [id for id in index.ids if id in labeled and id != query_id]
    if len(pool) < k:
        raise DataError(f"need at least {k} labeled gallery items, have {len(pool)}")
    exclude = {id for id in index.ids if id not in labeled} | {query_id}
    top = query_topk(index, query_vec, k, exclude=exclude)
    examples = [{"id": id, "label": labels[id], "score": score} for id, score in top]
    return PromptBundle(query=query_id, examples=examples)


def majority_label_oracle(bundle: PromptBundle) -> str:
    """Stand-in for a downstream predictor: majority label of the examples,
    ties resolved toward the most similar example carrying a tied label."""
    tally: dict[str, int] = {}
    for ex in bundle.examples:
        tally[ex["label"]] = tally.get(ex["label"], 0) + 1
    top = max(tally.values())
    tied = {label for label, c in tally.items() if c == top}
    for ex in bundle.examples:  # examples are ordered most similar first
        if ex["label"] in tied:
            return ex["label"]
    raise AssertionError("unreachable: bundle has no examples")


def evaluate_rag(
    index: CosineIndex,
    gallery_labels: dict[str, str],
    queries: dict[str, np.ndarray],
    query_labels: dict[str, str],
    k: int = 3,
    oracle=majority_label_oracle,
) -> dict:
    """Classification accuracy of an oracle fed retrieved example bundles."""
    if not queries:
        raise DataError("queries must be non-empty")
    bundles = []
    correct = 0
    for qid, vec in queries.items():
        bundle = select_rag_examples(index, qid, vec, gallery_labels, k)
        bundles.append(bundle)
        if oracle(bundle) == query_labels[qid]:
            correct += 1
    return {"accuracy": correct / len(queries), "bundles": bundles}


# ---------------------------------------------------------------------------
# linear probe (multinomial logistic regression)
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    c_grid: tuple = (1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
    folds: int = 10
    max_iter: int = 300
    grad_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.c_grid or any(c <= 0 for c in self.c_grid):
            raise DataError("c_grid must be non-empty and positive")
        if self.folds < 2:
            raise DataError("folds must be >= 2")


@dataclass
class ProbeResult:
    best_c: float
    val_accuracy: float
    cv_accuracy: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "best_c": self.best_c,
            "val_accuracy": self.val_accuracy,
            "cv_accuracy": {str(c): v for c, v in self.cv_accuracy.items()},
        }


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, c: float, cfg: ProbeConfig):
    """Full-batch gradient descent with backtracking line search on the
    L2-regularized multinomial logistic objective (bias unpenalized)."""
    n, d = x.shape
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    lam = 1.0 / (c * n)

    def objective(w, b):
        z = x @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        nll = (log_norm - z[np.arange(n), y]).mean()
        return nll + 0.5 * lam * (w**2).sum()

    step = 1.0
    for _ in range(cfg.max_iter):
        probs = _softmax_rows(x @ w.T + b)
        diff = probs - onehot
        gw = diff.T @ x / n + lam * w
        gb = diff.mean(axis=0)
        gnorm = np.sqrt((gw**2).sum() + (gb**2).sum())
        if gnorm < cfg.grad_tol:
            break
        f0 = objective(w, b)
        step = min(step * 2.0, 1e4)  # allow growth after cautious steps
        while step > 1e-12:
            w_new = w - step * gw
            b_new = b - step * gb
            if objective(w_new, b_new) <= f0 - 0.5 * step * gnorm**2:
                break
            step *= 0.5
        w, b = w - step * gw, b - step * gb
    return w, b


def _predict_logistic(w, b, x):
    return np.argmax(x @ w.T + b, axis=1)


def _stratified_folds(y: np.ndarray, folds: int, rng) -> np.ndarray:
    """Fold assignment per sample, class-balanced, seeded."""
    assignment = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def linear_probe_classify(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: ProbeConfig,
) -> ProbeResult:
    """Cross-validated c search, then a full-train fit scored on validation.

    Ties in cross-validation accuracy resolve toward the smaller c.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    classes = np.unique(np.concatenate([train_y, val_y]))
    n_classes = int(classes.max()) + 1
    if len(classes) < 2:
        raise DataError("probe needs at least 2 classes")
    counts = np.bincount(train_y, minlength=n_classes)
    smallest = counts[counts > 0].min()
    if smallest < config.folds:
        raise DataError(
            f"every class needs >= {config.folds} training members, smallest has {smallest}"
        )

    rng = np.random.default_rng(config.seed)
    assignment = _stratified_folds(train_y, config.folds, rng)
    cv_accuracy: dict[float, float] = {}
    for c in config.c_grid:
        correct = 0
        for fold in range(config.folds):
            held = assignment == fold
            w, b = _fit_logistic(
                train_x[~held], train_y[~held], n_classes, c, config
            )
            correct += int((_predict_logistic(w, b, train_x[held]) == train_y[held]).sum())
        cv_accuracy[c] = correct / len(train_y)

    best = max(cv_accuracy.values())
    best_c = min(c for c in config.c_grid if cv_accuracy[c] == best)
    w, b = _fit_logistic(train_x, train_y, n_classes, best_c, config)
    val_accuracy = float((_predict_logistic(w, b, val_x) == val_y).mean())
    return ProbeResult(best_c=best_c, val_accuracy=val_accuracy, cv_accuracy=cv_accuracy)
