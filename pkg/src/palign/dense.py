"""Linear probes over frozen patch tokens: segmentation and depth.

Both heads are single linear layers on patch tokens. Predictions made at
the token grid are reconciled with full-resolution targets either by
nearest-neighbor upsampling of predictions (default) or by downsampling
targets (majority vote for classes, mean for depth).

The depth head classifies into bins; its training loss is the
scale-invariant log loss applied to the probability-weighted bin centers:

    L = mean(d_i^2) + 0.15 * mean(d_i)^2,  d_i = log(A + eps) - log(B + eps)

with the second term's sign as printed in the reference formula ("paper"),
the classical subtracted form available via sign="classic".

Dense target sidecar: magic ``PALT``, u32 H, u32 W, u8 kind (0 = seg with
u16 class ids, 1 = depth with f32 meters), payload, then the valid mask as
H*W packed bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, softmax
from .errors import DataError, FormatError

TARGET_MAGIC = b"PALT"
_KIND_SEG = 0
_KIND_DEPTH = 1

SILOG_EPS = 1e-3
SILOG_LAMBDA = 0.15


# ---------------------------------------------------------------------------
# targets and sidecar I/O
# ---------------------------------------------------------------------------


@dataclass
class DenseTarget:
    """Per-pixel labels (class ids or depth meters) plus a validity mask."""

    values: np.ndarray  # (H, W) int64 for seg, float64 for depth
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape or self.values.ndim != 2:
            raise DataError(
                f"values {self.values.shape} and mask {self.valid_mask.shape} must be equal 2-D"
            )

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


def save_target(target: DenseTarget, path, kind: str) -> int:
    h, w = target.values.shape
    if kind == "seg":
        if target.values.min() < 0 or target.values.max() > 0xFFFF:
            raise DataError("seg class ids must fit in u16")
        kind_byte, payload = _KIND_SEG, target.values.astype("<u2").tobytes()
    elif kind == "depth":
        kind_byte, payload = _KIND_DEPTH, target.values.astype("<f4").tobytes()
    else:
        raise DataError(f"kind must be 'seg' or 'depth', got {kind!r}")
    mask_bits = np.packbits(target.valid_mask.reshape(-1)).tobytes()
    blob = TARGET_MAGIC + struct.pack("<IIB", h, w, kind_byte) + payload + mask_bits
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_target(path) -> tuple[DenseTarget, str]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TARGET_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {TARGET_MAGIC!r}")
    if len(blob) < 13:
        raise FormatError("truncated target header")
    h, w, kind_byte = struct.unpack("<IIB", blob[4:13])
    n = h * w
    item = 2 if kind_byte == _KIND_SEG else 4
    mask_bytes = (n + 7) // 8
    expected = 13 + n * item + mask_bytes
    if len(blob) != expected:
        raise FormatError(f"target file is {len(blob)} bytes, expected {expected}")
    payload = blob[13 : 13 + n * item]
    if kind_byte == _KIND_SEG:
        values = np.frombuffer(payload, dtype="<u2").astype(np.int64).reshape(h, w)
        kind = "seg"
    elif kind_byte == _KIND_DEPTH:
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w)
        kind = "depth"
    else:
        raise FormatError(f"unknown target kind byte {kind_byte}")
    mask = np.unpackbits(np.frombuffer(blob[13 + n * item :], dtype=np.uint8))[:n]
    return DenseTarget(values=values, valid_mask=mask.astype(bool).reshape(h, w)), kind


# ---------------------------------------------------------------------------
# depth binning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthBinning:
    d_min: float = 0.001
    d_max: float = 10.0
    n_bins: int = 256
    spacing: str = "uniform"  # or "log"

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise DataError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.n_bins < 2:
            raise DataError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.spacing not in ("uniform", "log"):
            raise DataError(f"spacing must be 'uniform' or 'log', got {self.spacing!r}")

    @property
    def edges(self) -> np.ndarray:
        if self.spacing == "uniform":
            return np.linspace(self.d_min, self.d_max, self.n_bins + 1)
        return np.geomspace(self.d_min, self.d_max, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        edges = self.edges
        return (edges[:-1] + edges[1:]) / 2.0


def depth_encode(depth: np.ndarray, binning: DepthBinning) -> np.ndarray:
    """Clamp to the bin range and floor each depth into its bin index."""
    depth = np.asarray(depth, dtype=np.float64)
    clamped = np.clip(depth, binning.d_min, binning.d_max)
    if binning.spacing == "uniform":
        width = (binning.d_max - binning.d_min) / binning.n_bins
        idx = np.floor((clamped - binning.d_min) / width)
    else:
        width = (np.log(binning.d_max) - np.log(binning.d_min)) / binning.n_bins
        idx = np.floor((np.log(clamped) - np.log(binning.d_min)) / width)
    return np.clip(idx, 0, binning.n_bins - 1).astype(np.int64)


def depth_decode(probs: np.ndarray, binning: DepthBinning) -> np.ndarray:
    """Expected depth under a per-pixel bin distribution (one-hot included)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != binning.n_bins:
        raise DataError(f"distribution has {probs.shape[-1]} bins, binning {binning.n_bins}")
    return probs @ binning.centers


# ---------------------------------------------------------------------------
# losses (single graph implementation; public ops wrap it)
# ---------------------------------------------------------------------------


def _jaccard_graph(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """1 - mean soft-Jaccard over classes present in prediction or target.

    probs: (N, C) rows on the simplex; onehot: (N, C) constant.
    """
    target = Tensor(onehot)
    intersection = (probs * target).sum(axis=0)
    union = (probs + target - probs * target).sum(axis=0)
    active = union.data > 0.0
    if not active.any():
        raise DataError("jaccard undefined: no class present anywhere")
    return 1.0 - (intersection[active] / union[active]).mean()


def jaccard_loss(pred_probs: np.ndarray, target: DenseTarget) -> float:
    """Soft-Jaccard loss over valid pixels; 0 iff hard-correct everywhere."""
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    if pred_probs.shape[:2] != target.values.shape:
        raise DataError(
            f"prediction grid {pred_probs.shape[:2]} != target {target.values.shape}"
        )
    if target.n_valid == 0:
        raise DataError("empty valid mask")
    sums = pred_probs.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise DataError("per-pixel class distributions must sum to 1")
    n_classes = pred_probs.shape[-1]
    probs = pred_probs[target.valid_mask]
    labels = target.values[target.valid_mask]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("target class id outside prediction's class range")
    onehot = np.eye(n_classes)[labels]
    return float(_jaccard_graph(Tensor(probs), onehot).data)


def _silog_graph(pred: Tensor, target: np.ndarray, eps: float, lam: float, sign: float) -> Tensor:
    d = (pred + eps).log() - Tensor(np.log(target + eps))
    return (d * d).mean() + sign * lam * d.mean() ** 2


def silog_loss(
    pred_depth: np.ndarray,
    target: DenseTarget,
    eps: float = SILOG_EPS,
    lam: float = SILOG_LAMBDA,
    sign: str = "paper",
) -> float:
    """Scale-invariant log loss over valid pixels, in meters.

    sign="paper" adds the squared-mean term as printed in the reference
    formula; sign="classic" subtracts it (the traditional form).
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    if pred_depth.shape != target.values.shape:
        raise DataError(f"prediction {pred_depth.shape} != target {target.values.shape}")
    if target.n_valid == 0:
        raise DataError("empty valid mask")
    pred = pred_depth[target.valid_mask]
    truth = target.values[target.valid_mask].astype(np.float64)
    if np.any(pred < 0) or np.any(truth < 0):
        raise DataError("depths must be >= 0")
    return float(_silog_graph(Tensor(pred), truth, eps, lam, _silog_sign(sign)).data)


def _silog_sign(sign: str) -> float:
    if sign == "paper":
        return 1.0
    if sign == "classic":
        return -1.0
    raise DataError(f"sign must be 'paper' or 'classic', got {sign!r}")


# ---------------------------------------------------------------------------
# heads and resolution handling
# ---------------------------------------------------------------------------


@dataclass
class SegHead:
    weight: np.ndarray  # (n_classes, d)
    bias: np.ndarray  # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


@dataclass
class DepthHead:
    weight: np.ndarray  # (n_bins, d)
    bias: np.ndarray  # (n_bins,)
    binning: DepthBinning = field(default_factory=DepthBinning)


@dataclass
class HeadHyper:
    """Reference presets: lr 3e-4, 10 epochs, batch 16 (seg) or 128 (depth)."""

    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    resolution: str = "upsample"  # or "downsample"

    def __post_init__(self):
        if self.resolution not in ("upsample", "downsample"):
            raise DataError(f"resolution must be 'upsample' or 'downsample', got {self.resolution!r}")


DEPTH_BATCH_SIZE = 128


def _token_index_map(s: int, h: int, w: int) -> np.ndarray:
    """(h*w,) flat token index feeding each target pixel."""
    rows = (np.arange(h) * s) // h
    cols = (np.arange(w) * s) // w
    return (rows[:, None] * s + cols[None, :]).reshape(-1)


def _downsample_target(target: DenseTarget, s: int, task: str) -> DenseTarget:
    """Majority vote (seg) or mean (depth) of valid pixels per token cell."""
    h, w = target.values.shape
    tok = _token_index_map(s, h, w)
    flat_vals = target.values.reshape(-1)
    flat_mask = target.valid_mask.reshape(-1)
    out_vals = np.zeros(s * s, dtype=target.values.dtype)
    out_mask = np.zeros(s * s, dtype=bool)
    for t in range(s * s):
        sel = (tok == t) & flat_mask
        if not sel.any():
            continue
        out_mask[t] = True
        if task == "seg":
            vals, freq = np.unique(flat_vals[sel], return_counts=True)
            out_vals[t] = vals[np.argmax(freq)]  # ties to the smaller class id
        else:
            out_vals[t] = flat_vals[sel].mean()
    return DenseTarget(values=out_vals.reshape(s, s), valid_mask=out_mask.reshape(s, s))


def _flat_tokens(features: np.ndarray) -> np.ndarray:
    s1, s2, d = features.shape
    if s1 != s2:
        raise DataError(f"patch grid must be square, got {features.shape}")
    return features.reshape(s1 * s2, d).astype(np.float64)


def _image_loss_graph(task, w, b, features, target, binning, sign, hyper):
    """Loss for one image as a graph over head parameters."""
    s = features.shape[0]
    tokens = _flat_tokens(features)
    logits = Tensor(tokens) @ w.T + b  # (s*s, C)
    if hyper.resolution == "downsample":
        eff_target = _downsample_target(target, s, task)
        pixel_logits = logits
    else:
        eff_target = target
        h, wd = target.values.shape
        pixel_logits = logits[_token_index_map(s, h, wd)]
    mask = eff_target.valid_mask.reshape(-1)
    if not mask.any():
        raise DataError("image has no valid pixels after resolution handling")
    valid_logits = pixel_logits[mask]
    probs = softmax(valid_logits, axis=-1)
    if task == "seg":
        labels = eff_target.values.reshape(-1)[mask]
        onehot = np.eye(w.shape[0])[labels]
        return _jaccard_graph(probs, onehot)
    depth = probs @ Tensor(binning.centers.reshape(-1, 1))
    truth = eff_target.values.reshape(-1)[mask].astype(np.float64)
    return _silog_graph(depth.reshape(-1), truth, SILOG_EPS, SILOG_LAMBDA, _silog_sign(sign))


def train_linear_head(
    task: str,
    features: list[np.ndarray],
    targets: list[DenseTarget],
    hyper: HeadHyper,
    n_classes: int | None = None,
    binning: DepthBinning | None = None,
    silog_sign: str = "paper",
):
    """Fit a linear head on frozen patch features with Adam.

    Only head parameters move; the features' fingerprint is asserted
    unchanged. Returns (head, per-epoch mean loss list).
    """
    from .alignment import AdamState, adam_step  # local to avoid cycle at import

    if task not in ("seg", "depth"):
        raise DataError(f"task must be 'seg' or 'depth', got {task!r}")
    if len(features) != len(targets) or not features:
        raise DataError("features and targets must be non-empty and parallel")
    d = features[0].shape[-1]
    if task == "seg":
        if n_classes is None or n_classes < 2:
            raise DataError("seg head needs n_classes >= 2")
        n_out = n_classes
    else:
        binning = binning or DepthBinning()
        n_out = binning.n_bins

    fingerprint = sum(float(f.sum()) for f in features)
    rng = np.random.default_rng(hyper.seed)
    params = {
        "weight": rng.normal(scale=0.01, size=(n_out, d)),
        "bias": np.zeros(n_out),
    }
    adam = AdamState()
    history: list[float] = []
    order_rng = np.random.default_rng(hyper.seed + 1)
    for _ in range(hyper.epochs):
        perm = order_rng.permutation(len(features))
        epoch_sum, count = 0.0, 0
        for start in range(0, len(perm), hyper.batch_size):
            batch = perm[start : start + hyper.batch_size]
            w = Tensor(params["weight"], requires_grad=True)
            b = Tensor(params["bias"], requires_grad=True)
            total = None
            for i in batch:
                term = _image_loss_graph(
                    task, w, b, features[i], targets[i], binning, silog_sign, hyper
                )
                total = term if total is None else total + term
            loss = total / float(len(batch))
            loss.backward()
            grads = {"weight": w.grad, "bias": b.grad}
            adam_step(params, grads, adam, hyper.lr)
            epoch_sum += float(loss.data) * len(batch)
            count += len(batch)
        history.append(epoch_sum / count)

    if sum(float(f.sum()) for f in features) != fingerprint:
        raise AssertionError("backbone features were modified during head training")
    if task == "seg":
        return SegHead(weight=params["weight"], bias=params["bias"]), history
    return DepthHead(weight=params["weight"], bias=params["bias"], binning=binning), history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _head_pixel_scores(head_w, head_b, features: np.ndarray, target: DenseTarget) -> np.ndarray:
    """Per-pixel logits, token predictions upsampled to target resolution."""
    s = features.shape[0]
    tokens = _flat_tokens(features)
    logits = tokens @ head_w.T + head_b
    h, w = target.values.shape
    return logits[_token_index_map(s, h, w)]


def eval_seg(head: SegHead, features: list[np.ndarray], targets: list[DenseTarget]) -> dict:
    """mIoU over classes present in target or prediction, plus pixel accuracy."""
    if len(features) != len(targets) or not features:
        raise DataError("features and targets must be non-empty and parallel")
    n_classes = head.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for feat, target in zip(features, targets):
        if target.n_valid == 0:
            raise DataError("empty valid mask")
        logits = _head_pixel_scores(head.weight, head.bias, feat, target)
        pred = np.argmax(logits, axis=-1)
        mask = target.valid_mask.reshape(-1)
        truth = target.values.reshape(-1)[mask]
        np.add.at(confusion, (truth, pred[mask]), 1)
    present = (confusion.sum(axis=1) + confusion.sum(axis=0)) > 0
    tp = np.diag(confusion)
    denom = confusion.sum(axis=1) + confusion.sum(axis=0) - tp
    iou = tp[present] / denom[present]
    return {
        "miou": float(iou.mean()),
        "pixel_accuracy": float(tp.sum() / confusion.sum()),
    }


DELTA_THRESHOLDS = (1.25, 1.25**2, 1.25**3)


def eval_depth(head: DepthHead, features: list[np.ndarray], targets: list[DenseTarget]) -> dict:
    """RMSE, AbsRel, log10, and delta-threshold accuracies over valid pixels."""
    if len(features) != len(targets) or not features:
        raise DataError("features and targets must be non-empty and parallel")
    preds, truths = [], []
    for feat, target in zip(features, targets):
        if target.n_valid == 0:
            raise DataError("empty valid mask")
        logits = _head_pixel_scores(head.weight, head.bias, feat, target)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = e / e.sum(axis=-1, keepdims=True)
        depth = depth_decode(probs, head.binning)
        mask = target.valid_mask.reshape(-1)
        truth = target.values.reshape(-1)[mask].astype(np.float64)
        if np.any(truth <= 0):
            raise DataError("nonpositive target depth inside the valid mask")
        preds.append(depth[mask])
        truths.append(truth)
    a = np.concatenate(preds)
    b = np.concatenate(truths)
    ratio = np.maximum(a / b, b / a)
    return {
        "rmse": float(np.sqrt(((a - b) ** 2).mean())),
        "abs_rel": float((np.abs(a - b) / b).mean()),
        "log10": float(np.abs(np.log10(a) - np.log10(b)).mean()),
        "delta1": float((ratio < DELTA_THRESHOLDS[0]).mean()),
        "delta2": float((ratio < DELTA_THRESHOLDS[1]).mean()),
        "delta3": float((ratio < DELTA_THRESHOLDS[2]).mean()),
    }
