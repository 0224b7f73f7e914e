"""Embedding stores, triplet manifests, and synthetic dataset generation.

On-disk formats
---------------
Embedding store (binary, little-endian): magic ``PALN``, u32 version=1,
u32 d, u32 s, u64 count; then per record u32 id_len, UTF-8 id bytes,
d float32 cls values, and s*s*d float32 patch values when s > 0.

Triplet manifest: CSV with header ``ref,x0,x1,y``, UTF-8, LF endings.
Label file: CSV with header ``id,label``.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

STORE_MAGIC = b"PALN"
STORE_VERSION = 1

SPLIT_TAGS = ("train", "val", "test", "unsplit")


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingRecord:
    """One image: a global feature vector plus an optional patch grid."""

    id: str
    cls: np.ndarray
    patch: np.ndarray | None = None

    def validate(self, dim: int, patch_side: int) -> None:
        if not self.id:
            raise DataError("record id must be a non-empty string")
        if self.cls.shape != (dim,):
            raise DataError(f"record {self.id!r}: cls shape {self.cls.shape} != ({dim},)")
        if not np.all(np.isfinite(self.cls)):
            raise DataError(f"record {self.id!r}: non-finite cls values")
        if patch_side == 0:
            if self.patch is not None:
                raise DataError(f"record {self.id!r}: patch present but store has s=0")
        else:
            if self.patch is None:
                raise DataError(f"record {self.id!r}: patch missing but store has s={patch_side}")
            expected = (patch_side, patch_side, dim)
            if self.patch.shape != expected:
                raise DataError(
                    f"record {self.id!r}: patch shape {self.patch.shape} != {expected}"
                )
            if not np.all(np.isfinite(self.patch)):
                raise DataError(f"record {self.id!r}: non-finite patch values")


class EmbeddingStore:
    """Ordered collection of embedding records with a fixed (d, s) layout.

    Payloads are kept as float32 (the on-disk precision); numerical code is
    expected to upcast to float64 at the point of use.
    """

    def __init__(self, dim: int, patch_side: int = 0):
        if dim < 1:
            raise DataError(f"dim must be >= 1, got {dim}")
        if patch_side < 0:
            raise DataError(f"patch_side must be >= 0, got {patch_side}")
        self.dim = dim
        self.patch_side = patch_side
        self._records: dict[str, EmbeddingRecord] = {}

    def add(self, record: EmbeddingRecord) -> None:
        record.cls = np.ascontiguousarray(record.cls, dtype=np.float32)
        if record.patch is not None:
            record.patch = np.ascontiguousarray(record.patch, dtype=np.float32)
        record.validate(self.dim, self.patch_side)
        if record.id in self._records:
            raise DataError(f"duplicate record id {record.id!r}")
        self._records[record.id] = record

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, id: str) -> bool:
        return id in self._records

    def __getitem__(self, id: str) -> EmbeddingRecord:
        try:
            return self._records[id]
        except KeyError:
            raise DataError(f"unknown record id {id!r}") from None

    def __iter__(self):
        return iter(self._records.values())

    def ids(self) -> list[str]:
        return list(self._records)


@dataclass(frozen=True)
class TripletEntry:
    ref: str
    x0: str
    x1: str
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DataError(f"y must be 0 or 1, got {self.y!r}")
        if len({self.ref, self.x0, self.x1}) != 3:
            raise DataError(f"triplet ids must be distinct: {(self.ref, self.x0, self.x1)}")


@dataclass
class TripletManifest:
    """Similarity judgments: y names which of (x0, x1) is closer to ref."""

    entries: list[TripletEntry] = field(default_factory=list)
    split_tag: str = "unsplit"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def duplicate_row_count(self) -> int:
        """Number of rows whose (ref, x0, x1) key repeats an earlier row.

        Repeats are legal (a triplet may carry several unanimous judgments)
        and are never deduplicated, only reported.
        """
        seen: set[tuple[str, str, str]] = set()
        dupes = 0
        for e in self.entries:
            key = (e.ref, e.x0, e.x1)
            if key in seen:
                dupes += 1
            seen.add(key)
        return dupes

    def resolve_check(self, store: EmbeddingStore) -> None:
        for e in self.entries:
            for id in (e.ref, e.x0, e.x1):
                if id not in store:
                    raise DataError(f"manifest id {id!r} not found in store")


# ---------------------------------------------------------------------------
# binary store I/O
# ---------------------------------------------------------------------------


def save_store(store: EmbeddingStore, path) -> int:
    """Write the store; returns the number of bytes written."""
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    buf.write(struct.pack("<IIIQ", STORE_VERSION, store.dim, store.patch_side, len(store)))
    for rec in store:
        rec.validate(store.dim, store.patch_side)
        id_bytes = rec.id.encode("utf-8")
        buf.write(struct.pack("<I", len(id_bytes)))
        buf.write(id_bytes)
        buf.write(rec.cls.astype("<f4").tobytes())
        if store.patch_side > 0:
            buf.write(rec.patch.astype("<f4").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated store file while reading {what}")
    return data


def load_store(path) -> EmbeddingStore:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != STORE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {STORE_MAGIC!r}")
        version, dim, side, count = struct.unpack("<IIIQ", _read_exact(f, 20, "header"))
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        store = EmbeddingStore(dim, side)
        for _ in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, "id length"))
            id = _read_exact(f, id_len, "id").decode("utf-8")
            cls = np.frombuffer(_read_exact(f, 4 * dim, f"cls of {id!r}"), dtype="<f4").copy()
            patch = None
            if side > 0:
                n = side * side * dim
                patch = np.frombuffer(
                    _read_exact(f, 4 * n, f"patch of {id!r}"), dtype="<f4"
                ).reshape(side, side, dim).copy()
            store.add(EmbeddingRecord(id=id, cls=cls, patch=patch))
        if f.read(1):
            raise FormatError("trailing bytes after final record")
    return store


# ---------------------------------------------------------------------------
# manifest / label CSV I/O
# ---------------------------------------------------------------------------

_MANIFEST_HEADER = ["ref", "x0", "x1", "y"]


def load_manifest(path, split_tag: str = "unsplit") -> TripletManifest:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty manifest file") from None
        if header != _MANIFEST_HEADER:
            raise FormatError(f"manifest header {header} != {_MANIFEST_HEADER}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"line {lineno}: expected 4 columns, got {len(row)}")
            ref, x0, x1, y_raw = row
            if y_raw not in ("0", "1"):
                raise FormatError(f"line {lineno}: y must be 0 or 1, got {y_raw!r}")
            entries.append(TripletEntry(ref=ref, x0=x0, x1=x1, y=int(y_raw)))
    manifest = TripletManifest(entries=entries, split_tag=split_tag)
    dupes = manifest.duplicate_row_count()
    if dupes:
        log.warning("manifest %s: %d repeated (ref,x0,x1) rows kept as-is", path, dupes)
    return manifest


def save_manifest(manifest: TripletManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(_MANIFEST_HEADER) + "\n")
        for e in manifest:
            f.write(f"{e.ref},{e.x0},{e.x1},{e.y}\n")


def load_labels(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty label file") from None
        if header != ["id", "label"]:
            raise FormatError(f"label header {header} != ['id', 'label']")
        labels: dict[str, str] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"line {lineno}: expected 2 columns, got {len(row)}")
            id, label = row
            if id in labels:
                raise FormatError(f"line {lineno}: duplicate id {id!r}")
            labels[id] = label
    return labels


def save_labels(labels: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("id,label\n")
        for id, label in labels.items():
            f.write(f"{id},{label}\n")


# ---------------------------------------------------------------------------
# manifest construction
# ---------------------------------------------------------------------------


def make_class_triplets(labels: dict[str, str], n: int, seed: int) -> TripletManifest:
    """Triplets drawn along class boundaries: ref plus one same-class and one
    other-class image, with y marking the same-class image as more similar.

    The same-class image lands at x0 or x1 uniformly at random. Deterministic
    given (labels, n, seed); ids are sorted first so dict ordering is
    irrelevant.
    """
    ids = sorted(labels)
    by_class: dict[str, list[str]] = {}
    for id in ids:
        by_class.setdefault(labels[id], []).append(id)
    if len(by_class) < 2:
        raise DataError("class triplets need at least 2 distinct classes")
    eligible_refs = [id for id in ids if len(by_class[labels[id]]) >= 2]
    if not eligible_refs:
        raise DataError("class triplets need at least one class with >= 2 members")

    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(n):
        ref = eligible_refs[rng.integers(len(eligible_refs))]
        cls = labels[ref]
        same_pool = [id for id in by_class[cls] if id != ref]
        same = same_pool[rng.integers(len(same_pool))]
        other_pool = [id for id in ids if labels[id] != cls]
        other = other_pool[rng.integers(len(other_pool))]
        pos = int(rng.integers(2))
        if pos == 0:
            entries.append(TripletEntry(ref=ref, x0=same, x1=other, y=0))
        else:
            entries.append(TripletEntry(ref=ref, x0=other, x1=same, y=1))
    return TripletManifest(entries=entries)


def split_manifest(
    manifest: TripletManifest, fractions: tuple[float, float, float], seed: int
) -> tuple[TripletManifest, TripletManifest, TripletManifest]:
    """Disjoint, exhaustive train/val/test partition.

    Sizes follow largest-remainder rounding, ties resolved in
    (train, val, test) order; assignment is a seeded permutation.
    """
    if len(fractions) != 3:
        raise DataError("fractions must be a (train, val, test) triple")
    if any(f <= 0 for f in fractions):
        raise DataError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got sum={sum(fractions)!r}")

    n = len(manifest)
    exact = [f * n for f in fractions]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    shortfall = n - sum(sizes)
    # ties broken toward the earlier split: stable sort on -remainder
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(shortfall):
        sizes[order[i % 3]] += 1

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    picks = [perm[: sizes[0]], perm[sizes[0] : sizes[0] + sizes[1]], perm[sizes[0] + sizes[1] :]]
    out = []
    for tag, idx in zip(("train", "val", "test"), picks):
        out.append(TripletManifest(entries=[manifest.entries[i] for i in idx], split_tag=tag))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticFactorSpec:
    """Desk-scale stand-in for a mid-level similarity triplet dataset.

    Each reference gets a latent factor vector; the two variations perturb
    disjoint factor subsets with different magnitudes and the ground truth
    marks the smaller perturbation. Embeddings pass the latents through a
    fixed anisotropic linear map, so raw embedding cosine only partially
    agrees with the ground truth while a low-rank linear correction can
    recover it.
    """

    n_triplets: int
    d: int = 64
    s: int = 0
    factor_count: int = 8
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_triplets < 1:
            raise DataError("n_triplets must be >= 1")
        if self.d < 1:
            raise DataError("d must be >= 1")
        if self.s < 0:
            raise DataError("s must be >= 0")
        if self.factor_count < 1:
            raise DataError("factor_count must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


# Generator constants. The warp boosts a few factor axes, so cosine
# distances in embedding space over-weigh those axes. A slice of the
# triplets is drawn "contested": the two variations land within a narrow
# relative band of each other in the warped space, so the warp's over-weighing
# decides their frozen ranking (half the time wrongly), while a small
# low-rank correction of the boost settles all of them the latent way.
# Uncontested triplets are ranked correctly by the frozen space outright.
_N_CLASSES = 10
_CLASS_PULL = 1.2  # class center weight relative to unit per-image noise
_CLASS_AXIS_GAIN = 3.0  # class centers spread extra along the warped axes
_PERT_BASE = (0.32, 0.48)  # latent perturbation radius, closer image
_PERT_RATIO = (1.05, 1.45)  # radius ratio of farther over closer image
_WARP_DIMS = 1  # factor axes whose embedding gain is boosted
_WARP_GAIN = 1.5  # largest boost factor
_CONTESTED_FRAC = 0.62  # triplets forced into the warped near-tie band
_TIE_BAND = 0.08  # relative warped-gap width that counts as a near-tie
_MAX_RESAMPLE = 2000


@dataclass
class SyntheticWorld:
    """Everything the generator knows: the public triplet data plus labeled
    held-out instances for retrieval-style evaluations."""

    store: EmbeddingStore
    manifest: TripletManifest
    y_star: np.ndarray
    class_labels: dict[str, str]  # reference id -> class name
    instance_labels: dict[str, str]  # gallery/query id -> instance name
    query_ids: list[str]
    latent_agreement: float  # fraction of triplets ranked correctly in latent space


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _latent_cosdist(u: np.ndarray, v: np.ndarray) -> float:
    return 1.0 - float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))


def _class_latent(rng, centers: np.ndarray, k: int) -> np.ndarray:
    f = centers.shape[1]
    return _unit(_CLASS_PULL * centers[k] + rng.normal(size=f))


def _perturb_pair(
    rng, z: np.ndarray, emb_map: np.ndarray, contested: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Two variations of z on disjoint factor subsets; the first is always
    the closer one under latent cosine distance (enforced by resampling).

    A contested pair additionally lands inside the warped-space near-tie
    band, so the anisotropic embedding map decides its frozen ranking.
    """
    f = z.size
    ez = emb_map @ z
    for _ in range(_MAX_RESAMPLE):
        order = rng.permutation(f)
        subsets = (order[: f // 2], order[f // 2 :])
        base = rng.uniform(*_PERT_BASE)
        radii = (base, base * rng.uniform(*_PERT_RATIO))
        out = []
        for subset, radius in zip(subsets, radii):
            w = np.zeros(f)
            w[subset] = rng.normal(size=subset.size)
            out.append(z + radius * _unit(w))
        if _latent_cosdist(z, out[0]) >= _latent_cosdist(z, out[1]):
            continue
        d_near = _latent_cosdist(ez, emb_map @ out[0])
        d_far = _latent_cosdist(ez, emb_map @ out[1])
        rel_gap = (d_far - d_near) / (0.5 * (d_far + d_near))
        if contested != (abs(rel_gap) < _TIE_BAND):
            continue
        if not contested and rel_gap < 0:
            continue  # uncontested pairs must be frozen-correct
        return out[0], out[1]
    raise DataError("could not realize a correctly-ranked perturbation pair")


# instance-retrieval construction: view perturbations are small relative to
# the query-decoy separation, so the latent space always ranks the true
# gallery mate first while contested cases sit in the warped near-tie band
_VIEW_PERT = (0.08, 0.18)  # query/gallery view perturbation radius
_DECOY_DIST = (0.85, 1.6)  # decoy offset radius relative to the view radius


def _instance_triple(
    rng, z: np.ndarray, emb_map: np.ndarray, contested: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(query, gallery mate, decoy gallery) views around instance latent z.

    The mate is always closer to the query than the decoy in latent cosine;
    contested draws land the two within the warped near-tie band so the
    embedding warp decides their frozen ranking.
    """
    f = z.size
    for _ in range(_MAX_RESAMPLE):
        order = rng.permutation(f)
        subsets = (order[: f // 2], order[f // 2 :])
        r_qry = rng.uniform(*_VIEW_PERT)
        r_mate = rng.uniform(*_VIEW_PERT)
        views = []
        for subset, radius in zip(subsets, (r_qry, r_mate)):
            w = np.zeros(f)
            w[subset] = rng.normal(size=subset.size)
            views.append(z + radius * _unit(w))
        qry, mate = views
        decoy_center = z + max(r_qry, r_mate) * rng.uniform(*_DECOY_DIST) * _unit(
            rng.normal(size=f)
        )
        w = np.zeros(f)
        subset = rng.permutation(f)[: f // 2]
        w[subset] = rng.normal(size=subset.size)
        decoy = decoy_center + rng.uniform(*_VIEW_PERT) * _unit(w)
        if _latent_cosdist(qry, mate) >= _latent_cosdist(qry, decoy):
            continue
        eq = emb_map @ qry
        d_mate = _latent_cosdist(eq, emb_map @ mate)
        d_decoy = _latent_cosdist(eq, emb_map @ decoy)
        rel_gap = (d_decoy - d_mate) / (0.5 * (d_decoy + d_mate))
        if contested != (abs(rel_gap) < _TIE_BAND):
            continue
        if not contested and rel_gap < 0:
            continue
        return qry, mate, decoy
    raise DataError("could not realize a correctly-ranked instance triple")


def _embedding_map(rng, d: int, f: int) -> np.ndarray:
    """A d x f map: isometry composed with axis-aligned gain boosts.

    The boost stays aligned with the factor axes (no mixing rotation) so the
    two disjoint perturbation subsets of a triplet see different gains.
    """
    if d < f:
        raise DataError(f"synthetic generator needs d >= factor_count, got d={d} < {f}")
    u, _ = np.linalg.qr(rng.normal(size=(d, f)))
    gains = np.ones(f)
    n_warp = min(_WARP_DIMS, f)
    gains[:n_warp] = np.geomspace(_WARP_GAIN, _WARP_GAIN**0.5, n_warp)
    return u @ np.diag(gains)


def _patch_maps(rng, s: int, d: int, f: int) -> np.ndarray:
    """Per-cell orthonormal maps (s*s, d, f): clean views of the latent."""
    maps = np.empty((s * s, d, f))
    for t in range(s * s):
        q, _ = np.linalg.qr(rng.normal(size=(d, f)))
        maps[t] = q
    return maps


def generate_world(spec: SyntheticFactorSpec, n_instances: int = 200) -> SyntheticWorld:
    """Build the full synthetic world; see SyntheticFactorSpec."""
    if spec.factor_count < 2:
        raise DataError("factor_count must be >= 2 so variations can use disjoint subsets")
    f = spec.factor_count
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(size=(_N_CLASSES, f))
    # classes separate mostly along the axes the embedding map boosts, so
    # class-boundary supervision has no reason to undo the warp
    centers[:, : min(_WARP_DIMS, f)] *= _CLASS_AXIS_GAIN
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    emb_map = _embedding_map(rng, spec.d, f)
    patch_maps = _patch_maps(rng, spec.s, spec.d, f) if spec.s > 0 else None

    store = EmbeddingStore(spec.d, spec.s)
    sigma = spec.noise_sigma

    def embed(id: str, z: np.ndarray) -> None:
        # noise_sigma is relative to the clean signal's per-component RMS
        cls = emb_map @ z
        if sigma > 0:
            cls = cls + sigma * (np.linalg.norm(cls) / np.sqrt(spec.d)) * rng.normal(size=spec.d)
        patch = None
        if patch_maps is not None:
            patch = patch_maps @ z
            if sigma > 0:
                rms = np.linalg.norm(patch) / np.sqrt(patch.size)
                patch = patch + sigma * rms * rng.normal(size=patch.shape)
            patch = patch.reshape(spec.s, spec.s, spec.d)
        store.add(EmbeddingRecord(id=id, cls=cls, patch=patch))

    entries = []
    y_star = np.empty(spec.n_triplets, dtype=np.int64)
    class_labels: dict[str, str] = {}
    for i in range(spec.n_triplets):
        k = int(rng.integers(_N_CLASSES))
        z = _class_latent(rng, centers, k)
        contested = rng.random() < _CONTESTED_FRAC
        near, far = _perturb_pair(rng, z, emb_map, contested)
        y = int(rng.integers(2))  # position of the closer variation
        ref_id, x0_id, x1_id = f"trip{i:06d}_ref", f"trip{i:06d}_x0", f"trip{i:06d}_x1"
        embed(ref_id, z)
        if y == 0:
            embed(x0_id, near)
            embed(x1_id, far)
        else:
            embed(x0_id, far)
            embed(x1_id, near)
        entries.append(TripletEntry(ref=ref_id, x0=x0_id, x1=x1_id, y=y))
        y_star[i] = y
        class_labels[ref_id] = f"c{k:02d}"

    instance_labels: dict[str, str] = {}
    query_ids: list[str] = []
    for j in range(n_instances):
        k = int(rng.integers(_N_CLASSES))
        z = _class_latent(rng, centers, k)
        contested = rng.random() < _CONTESTED_FRAC
        qry, mate, decoy = _instance_triple(rng, z, emb_map, contested)
        gal_id, dcy_id, qry_id = f"inst{j:05d}_gal", f"inst{j:05d}_dcy", f"inst{j:05d}_qry"
        embed(gal_id, mate)
        embed(dcy_id, decoy)
        embed(qry_id, qry)
        instance_labels[gal_id] = f"i{j:05d}"
        instance_labels[qry_id] = f"i{j:05d}"
        instance_labels[dcy_id] = f"d{j:05d}"  # distractor: its own identity
        query_ids.append(qry_id)

    manifest = TripletManifest(entries=entries)
    return SyntheticWorld(
        store=store,
        manifest=manifest,
        y_star=y_star,
        class_labels=class_labels,
        instance_labels=instance_labels,
        query_ids=query_ids,
        latent_agreement=1.0,  # enforced triplet by triplet in _perturb_pair
    )


def make_synthetic_nights(
    spec: SyntheticFactorSpec,
) -> tuple[EmbeddingStore, TripletManifest, np.ndarray]:
    """Synthetic mid-level triplets: (store, manifest, ground-truth y*).

    The manifest's y equals y* (judgments are noise-free by construction);
    embedding noise enters only through spec.noise_sigma.
    """
    world = generate_world(spec, n_instances=0)
    return world.store, world.manifest, world.y_star
