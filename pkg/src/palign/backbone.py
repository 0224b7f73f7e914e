"""Feature extraction backbones and low-rank adapter machinery.

Two interchangeable backbones feed the alignment trainer:

* ``StoreBackbone``: a frozen lookup over precomputed embeddings, made
  trainable by a LoRA-adapted identity projection applied per token. At
  zero adapter initialization it reproduces the stored features exactly.
* ``ToyEncoderBackbone``: a tiny patch transformer whose q/v projections
  carry LoRA adapters, so end-to-end gradients through attention are
  exercised. Record patch grids are treated as the raw encoder input.

Every backbone exposes a plain-numpy featurization (used by evaluations and
finite-difference oracles) and a graph featurization over autodiff tensors
(used by training); both follow the same op order.

Adapter checkpoint file: magic ``PALA``, u32 version=1, u64 count, then per
matrix u32 name_len, name bytes, u32 rows, u32 cols, rows*cols float32 LE.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, gelu, layer_norm, softmax
from .data import EmbeddingStore
from .errors import DataError, FormatError

ADAPTER_MAGIC = b"PALA"
ADAPTER_VERSION = 1

LORA_A_INIT_STD = 0.02


class FeatureMode(enum.Enum):
    CLS_ONLY = "cls"
    CLS_PLUS_POOLED_PATCH = "patch"


@dataclass
class FeatureBundle:
    cls: np.ndarray
    patch: np.ndarray | None = None


@dataclass
class LoraAdapter:
    """Low-rank update (alpha / rank) * B @ A added to a frozen projection."""

    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    rank: int
    alpha: float
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise DataError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise DataError(
                f"adapter shapes {self.a.shape}/{self.b.shape} inconsistent with rank {self.rank}"
            )

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, alpha: float, rng, dropout_p: float = 0.0):
        """B starts at zero so the adapted weight equals the frozen base."""
        return cls(
            a=rng.normal(scale=LORA_A_INIT_STD, size=(rank, d_in)),
            b=np.zeros((d_out, rank)),
            rank=rank,
            alpha=alpha,
            dropout_p=dropout_p,
        )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)


def lora_effective_weight(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """base + (alpha / rank) * B @ A, leaving base untouched."""
    d_out, d_in = base.shape
    if adapter.a.shape != (adapter.rank, d_in) or adapter.b.shape != (d_out, adapter.rank):
        raise DataError(
            f"adapter shapes A{adapter.a.shape} B{adapter.b.shape} do not match base {base.shape}"
        )
    return base + adapter.delta()


def lookup_features(store: EmbeddingStore, id: str) -> FeatureBundle:
    """Frozen-backbone stand-in: return the stored vectors (upcast to f64)."""
    rec = store[id]
    patch = None if rec.patch is None else rec.patch.astype(np.float64)
    return FeatureBundle(cls=rec.cls.astype(np.float64), patch=patch)


def assemble_features(bundle: FeatureBundle, mode: FeatureMode) -> np.ndarray:
    """CLS alone, or CLS concatenated with the spatial mean of the patch grid."""
    if mode is FeatureMode.CLS_ONLY:
        return np.array(bundle.cls, dtype=np.float64)
    if bundle.patch is None:
        raise DataError("feature mode needs patch tokens but the bundle has none")
    pooled = bundle.patch.astype(np.float64).mean(axis=(0, 1))
    return np.concatenate([np.asarray(bundle.cls, dtype=np.float64), pooled])


# ---------------------------------------------------------------------------
# adapter checkpoint I/O
# ---------------------------------------------------------------------------


def save_adapters(named: dict[str, np.ndarray], path) -> int:
    buf = io.BytesIO()
    buf.write(ADAPTER_MAGIC)
    buf.write(struct.pack("<IQ", ADAPTER_VERSION, len(named)))
    for name, mat in named.items():
        if mat.ndim != 2:
            raise DataError(f"adapter matrix {name!r} must be 2-D, got shape {mat.shape}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        buf.write(mat.astype("<f4").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


def load_adapters(path) -> dict[str, np.ndarray]:
    def read_exact(f, n, what):
        data = f.read(n)
        if len(data) != n:
            raise FormatError(f"truncated adapter file while reading {what}")
        return data

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ADAPTER_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {ADAPTER_MAGIC!r}")
        version, count = struct.unpack("<IQ", read_exact(f, 12, "header"))
        if version != ADAPTER_VERSION:
            raise FormatError(f"unsupported adapter version {version}")
        named: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read_exact(f, 4, "name length"))
            name = read_exact(f, name_len, "name").decode("utf-8")
            rows, cols = struct.unpack("<II", read_exact(f, 8, f"shape of {name!r}"))
            data = np.frombuffer(
                read_exact(f, 4 * rows * cols, f"data of {name!r}"), dtype="<f4"
            )
            if not np.all(np.isfinite(data)):
                raise DataError(f"non-finite values in adapter matrix {name!r}")
            named[name] = data.astype(np.float64).reshape(rows, cols)
        if f.read(1):
            raise FormatError("trailing bytes after final matrix")
    return named


def _dropped(a: Tensor, p: float, rng) -> Tensor:
    """LoRA input dropout, folded into A's columns; inactive when rng is None."""
    if p <= 0.0 or rng is None:
        return a
    mask = (rng.random(a.shape[1]) >= p) / (1.0 - p)
    return a * Tensor(mask[None, :])


# ---------------------------------------------------------------------------
# store-backed backbone: frozen lookup + LoRA-on-identity projection
# ---------------------------------------------------------------------------


class StoreBackbone:
    """Precomputed embeddings with a trainable low-rank projection on top.

    The projection W = I + (alpha/rank) * B @ A is shared across the CLS
    vector and every patch token, mirroring how adapter-tuning a real
    encoder moves all tokens through the same adapted weights.
    """

    def __init__(
        self,
        store: EmbeddingStore,
        rank: int = 16,
        alpha: float = 0.5,
        dropout_p: float = 0.0,
        seed: int = 0,
    ):
        self.store = store
        rng = np.random.default_rng(seed)
        self.adapter = LoraAdapter.create(
            d_in=store.dim, d_out=store.dim, rank=rank, alpha=alpha, rng=rng, dropout_p=dropout_p
        )

    @property
    def trainable(self) -> dict[str, np.ndarray]:
        return {"proj.a": self.adapter.a, "proj.b": self.adapter.b}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.trainable.items()}

    def load_trainable(self, named: dict[str, np.ndarray]) -> None:
        for key, value in self.trainable.items():
            if key not in named:
                raise DataError(f"missing adapter matrix {key!r}")
            if named[key].shape != value.shape:
                raise DataError(
                    f"adapter matrix {key!r}: shape {named[key].shape} != {value.shape}"
                )
            value[...] = named[key]

    def _bundle(self, id: str) -> FeatureBundle:
        return lookup_features(self.store, id)

    def feature_np(self, id: str, mode: FeatureMode) -> np.ndarray:
        w = np.eye(self.store.dim) + self.adapter.delta()
        bundle = self._bundle(id)
        cls = w @ bundle.cls
        if mode is FeatureMode.CLS_ONLY:
            return cls
        if bundle.patch is None:
            raise DataError("feature mode needs patch tokens but the store has s=0")
        pooled = w @ bundle.patch.mean(axis=(0, 1))
        return np.concatenate([cls, pooled])

    def feature_graph(
        self, id: str, mode: FeatureMode, leaves: dict[str, Tensor], dropout_rng=None
    ) -> Tensor:
        a, b = leaves["proj.a"], leaves["proj.b"]
        a = _dropped(a, self.adapter.dropout_p, dropout_rng)
        w = Tensor(np.eye(self.store.dim)) + self.adapter.scale * (b @ a)
        bundle = self._bundle(id)
        cls = (w @ Tensor(bundle.cls.reshape(-1, 1))).reshape(-1)
        if mode is FeatureMode.CLS_ONLY:
            return cls
        if bundle.patch is None:
            raise DataError("feature mode needs patch tokens but the store has s=0")
        pooled_in = bundle.patch.mean(axis=(0, 1)).reshape(-1, 1)
        pooled = (w @ Tensor(pooled_in)).reshape(-1)
        return concat([cls, pooled])


# ---------------------------------------------------------------------------
# toy patch-transformer backbone
# ---------------------------------------------------------------------------


@dataclass
class ToyEncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_in: int = 16  # channels of each input patch cell
    s: int = 4  # input grid side; token count is s*s + 1
    mlp_ratio: int = 2
    lora_rank: int = 16
    lora_alpha: float = 0.5
    lora_dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DataError("d_model must be divisible by n_heads")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ToyEncoderParams:
    """Frozen base weights plus the trainable adapters (q/v of each layer)."""

    config: ToyEncoderConfig
    patch_embed: np.ndarray  # (d_in, d_model)
    pos_embed: np.ndarray  # (s*s, d_model)
    cls_seed: np.ndarray  # (d_model,)
    layers: list[LayerWeights] = field(default_factory=list)
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    @classmethod
    def random(cls, config: ToyEncoderConfig, seed: int = 0) -> "ToyEncoderParams":
        rng = np.random.default_rng(seed)
        d = config.d_model
        hidden = config.mlp_ratio * d
        layers = []
        adapters = {}
        for i in range(config.n_layers):
            layers.append(
                LayerWeights(
                    wq=rng.normal(scale=d**-0.5, size=(d, d)),
                    wk=rng.normal(scale=d**-0.5, size=(d, d)),
                    wv=rng.normal(scale=d**-0.5, size=(d, d)),
                    wo=rng.normal(scale=d**-0.5, size=(d, d)),
                    w1=rng.normal(scale=d**-0.5, size=(hidden, d)),
                    w2=rng.normal(scale=hidden**-0.5, size=(d, hidden)),
                )
            )
            for proj in ("q", "v"):
                adapters[f"layer{i}.{proj}"] = LoraAdapter.create(
                    d_in=d,
                    d_out=d,
                    rank=config.lora_rank,
                    alpha=config.lora_alpha,
                    rng=rng,
                    dropout_p=config.lora_dropout,
                )
        return cls(
            config=config,
            patch_embed=rng.normal(scale=config.d_in**-0.5, size=(config.d_in, d)),
            pos_embed=rng.normal(scale=0.02, size=(config.s * config.s, d)),
            cls_seed=rng.normal(scale=0.02, size=d),
            layers=layers,
            adapters=adapters,
        )


def _np_layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


class ToyEncoder:
    """Small pre-norm ViT over an (s, s, d_in) input grid."""

    def __init__(self, params: ToyEncoderParams):
        self.params = params

    # ---- plain numpy path -------------------------------------------------

    def forward_np(self, x: np.ndarray) -> FeatureBundle:
        p = self.params
        cfg = p.config
        if x.shape != (cfg.s, cfg.s, cfg.d_in):
            raise DataError(f"input shape {x.shape} != {(cfg.s, cfg.s, cfg.d_in)}")
        d, heads = cfg.d_model, cfg.n_heads
        dk = d // heads
        tokens = x.reshape(cfg.s * cfg.s, cfg.d_in).astype(np.float64) @ p.patch_embed
        tokens = tokens + p.pos_embed
        tokens = np.concatenate([p.cls_seed[None, :], tokens], axis=0)
        n = tokens.shape[0]
        for i, layer in enumerate(p.layers):
            h = _np_layer_norm(tokens)
            wq = lora_effective_weight(layer.wq, p.adapters[f"layer{i}.q"])
            wv = lora_effective_weight(layer.wv, p.adapters[f"layer{i}.v"])
            q = (h @ wq.T).reshape(n, heads, dk).transpose(1, 0, 2)
            k = (h @ layer.wk.T).reshape(n, heads, dk).transpose(1, 0, 2)
            v = (h @ wv.T).reshape(n, heads, dk).transpose(1, 0, 2)
            attn = _np_softmax((q @ k.transpose(0, 2, 1)) * dk**-0.5)
            mixed = (attn @ v).transpose(1, 0, 2).reshape(n, d)
            tokens = tokens + mixed @ layer.wo.T
            h2 = _np_layer_norm(tokens)
            tokens = tokens + _np_gelu(h2 @ layer.w1.T) @ layer.w2.T
        tokens = _np_layer_norm(tokens)
        return FeatureBundle(cls=tokens[0], patch=tokens[1:].reshape(cfg.s, cfg.s, d))

    def forward_np_batch(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized forward over a batch (b, s, s, d_in); same op order as
        forward_np. Returns (cls (b, d), patch (b, s, s, d))."""
        p = self.params
        cfg = p.config
        b = xs.shape[0]
        if xs.shape[1:] != (cfg.s, cfg.s, cfg.d_in):
            raise DataError(f"input shape {xs.shape[1:]} != {(cfg.s, cfg.s, cfg.d_in)}")
        d, heads = cfg.d_model, cfg.n_heads
        dk = d // heads
        tokens = xs.reshape(b, cfg.s * cfg.s, cfg.d_in).astype(np.float64) @ p.patch_embed
        tokens = tokens + p.pos_embed
        cls_rows = np.broadcast_to(p.cls_seed, (b, 1, d))
        tokens = np.concatenate([cls_rows, tokens], axis=1)
        n = tokens.shape[1]
        for i, layer in enumerate(p.layers):
            h = _np_layer_norm(tokens)
            wq = lora_effective_weight(layer.wq, p.adapters[f"layer{i}.q"])
            wv = lora_effective_weight(layer.wv, p.adapters[f"layer{i}.v"])
            q = (h @ wq.T).reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
            k = (h @ layer.wk.T).reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
            v = (h @ wv.T).reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
            attn = _np_softmax((q @ k.transpose(0, 1, 3, 2)) * dk**-0.5)
            mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
            tokens = tokens + mixed @ layer.wo.T
            h2 = _np_layer_norm(tokens)
            tokens = tokens + _np_gelu(h2 @ layer.w1.T) @ layer.w2.T
        tokens = _np_layer_norm(tokens)
        return tokens[:, 0], tokens[:, 1:].reshape(b, cfg.s, cfg.s, d)

    # ---- autodiff path -----------------------------------------------------

    def forward_graph(
        self, x: np.ndarray, leaves: dict[str, Tensor], dropout_rng=None
    ) -> tuple[Tensor, Tensor]:
        """Same computation with adapter matrices taken from `leaves`."""
        p = self.params
        cfg = p.config
        if x.shape != (cfg.s, cfg.s, cfg.d_in):
            raise DataError(f"input shape {x.shape} != {(cfg.s, cfg.s, cfg.d_in)}")
        d, heads = cfg.d_model, cfg.n_heads
        dk = d // heads
        tokens = Tensor(x.reshape(cfg.s * cfg.s, cfg.d_in)) @ Tensor(p.patch_embed)
        tokens = tokens + Tensor(p.pos_embed)
        tokens = concat([Tensor(p.cls_seed.reshape(1, -1)), tokens], axis=0)
        n = tokens.shape[0]
        for i, layer in enumerate(p.layers):
            h = layer_norm(tokens)
            wq = self._adapted_graph(layer.wq, f"layer{i}.q", leaves, dropout_rng)
            wv = self._adapted_graph(layer.wv, f"layer{i}.v", leaves, dropout_rng)
            q = (h @ wq.T).reshape(n, heads, dk).transpose((1, 0, 2))
            k = (h @ Tensor(layer.wk.T)).reshape(n, heads, dk).transpose((1, 0, 2))
            v = (h @ wv.T).reshape(n, heads, dk).transpose((1, 0, 2))
            attn = softmax((q @ k.transpose((0, 2, 1))) * dk**-0.5, axis=-1)
            mixed = (attn @ v).transpose((1, 0, 2)).reshape(n, d)
            tokens = tokens + mixed @ Tensor(layer.wo.T)
            h2 = layer_norm(tokens)
            tokens = tokens + gelu(h2 @ Tensor(layer.w1.T)) @ Tensor(layer.w2.T)
        tokens = layer_norm(tokens)
        cls = tokens[0]
        patch = tokens[1:].reshape(cfg.s, cfg.s, d)
        return cls, patch

    def _adapted_graph(
        self, base: np.ndarray, name: str, leaves: dict[str, Tensor], dropout_rng=None
    ) -> Tensor:
        adapter = self.params.adapters[name]
        a = _dropped(leaves[f"{name}.a"], adapter.dropout_p, dropout_rng)
        b = leaves[f"{name}.b"]
        return Tensor(base) + adapter.scale * (b @ a)


def encode(params: ToyEncoderParams, x: np.ndarray) -> FeatureBundle:
    """Deterministic evaluation-mode forward pass (dropout inactive)."""
    return ToyEncoder(params).forward_np(np.asarray(x, dtype=np.float64))


class ToyEncoderBackbone:
    """Trainer-facing wrapper: store records are raw encoder inputs."""

    def __init__(self, store: EmbeddingStore, params: ToyEncoderParams):
        if store.patch_side != params.config.s or store.dim != params.config.d_in:
            raise DataError(
                f"store layout (d={store.dim}, s={store.patch_side}) does not match encoder "
                f"input (d_in={params.config.d_in}, s={params.config.s})"
            )
        self.store = store
        self.encoder = ToyEncoder(params)

    @property
    def params(self) -> ToyEncoderParams:
        return self.encoder.params

    @property
    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for name, adapter in self.params.adapters.items():
            out[f"{name}.a"] = adapter.a
            out[f"{name}.b"] = adapter.b
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.trainable.items()}

    def load_trainable(self, named: dict[str, np.ndarray]) -> None:
        live = self.trainable
        for key, value in live.items():
            if key not in named:
                raise DataError(f"missing adapter matrix {key!r}")
            if named[key].shape != value.shape:
                raise DataError(
                    f"adapter matrix {key!r}: shape {named[key].shape} != {value.shape}"
                )
            value[...] = named[key]

    def _input(self, id: str) -> np.ndarray:
        rec = self.store[id]
        if rec.patch is None:
            raise DataError(f"record {id!r} has no patch grid to encode")
        return rec.patch.astype(np.float64)

    def feature_np(self, id: str, mode: FeatureMode) -> np.ndarray:
        bundle = self.encoder.forward_np(self._input(id))
        return assemble_features(bundle, mode)

    def features_np_batch(self, ids: list[str], mode: FeatureMode) -> np.ndarray:
        """(len(ids), feat_dim) matrix via one vectorized forward pass."""
        xs = np.stack([self._input(id) for id in ids])
        cls, patch = self.encoder.forward_np_batch(xs)
        if mode is FeatureMode.CLS_ONLY:
            return cls
        pooled = patch.mean(axis=(1, 2))
        return np.concatenate([cls, pooled], axis=1)

    def feature_graph(
        self, id: str, mode: FeatureMode, leaves: dict[str, Tensor], dropout_rng=None
    ) -> Tensor:
        cls, patch = self.encoder.forward_graph(self._input(id), leaves, dropout_rng)
        if mode is FeatureMode.CLS_ONLY:
            return cls
        pooled = patch.mean(axis=(0, 1))
        return concat([cls, pooled])
