"""Command-line pipeline: dataset synthesis, alignment, and evaluations.

Every command writes, under --out: report.json (config, config hash, seed,
metrics, wall time), resolved_config.json, optional metrics.csv, and its
own artifacts (stores, manifests, adapter checkpoints, history). Reports
are byte-reproducible given identical flags and seed, except the wall_time_s
field.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .alignment import AlignmentConfig, train_alignment, two_afc_accuracy
from .backbone import FeatureMode, StoreBackbone, load_adapters, save_adapters
from .data import (
    SyntheticFactorSpec,
    TripletManifest,
    generate_world,
    load_labels,
    load_manifest,
    load_store,
    save_labels,
    save_manifest,
    save_store,
    split_manifest,
)
from .dense import (
    DepthBinning,
    HeadHyper,
    eval_depth,
    eval_seg,
    load_target,
    train_linear_head,
)
from .errors import DataError, PalignError
from .retrieval import (
    CountDataset,
    ProbeConfig,
    build_index,
    evaluate_rag,
    knn_count_eval,
    linear_probe_classify,
    recall_at_k,
)

_MODES = {"cls": FeatureMode.CLS_ONLY, "patch": FeatureMode.CLS_PLUS_POOLED_PATCH}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _load_config_file(path: str, known_keys: set[str]) -> dict:
    """Flat key=value file; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in known_keys:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Flag > config file > default, for every known key."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config, set(defaults))
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            caster = type(default) if default is not None else str
            raw = file_values[key]
            if caster is bool:
                resolved[key] = raw.lower() in ("1", "true", "yes")
            elif default is None:
                resolved[key] = raw
            else:
                resolved[key] = caster(raw)
        else:
            resolved[key] = default
    return resolved


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_report(out_dir: Path, command: str, config: dict, metrics: dict, t0: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": config.get("seed"),
        "metrics": metrics,
        "wall_time_s": round(time.time() - t0, 3),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "resolved_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n"
    )
    if config.get("csv"):
        rows = ["metric,value"]
        for key, value in sorted(_flatten(metrics).items()):
            rows.append(f"{key},{value}")
        (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n")


def _flatten(metrics: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in metrics.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        elif isinstance(value, (int, float, str)):
            flat[name] = value
    return flat


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in str(text).split(",") if tok]


def _parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in str(text).split(",") if tok]


def _backbone_for(store, config: dict) -> StoreBackbone:
    bb = StoreBackbone(
        store,
        rank=config.get("lora_rank", 16),
        alpha=config.get("lora_alpha", 0.5),
        dropout_p=config.get("lora_dropout", 0.0),
        seed=config.get("seed", 0),
    )
    if config.get("adapters"):
        bb.load_trainable(load_adapters(config["adapters"]))
    return bb


def _featurizer(store, config: dict):
    bb = _backbone_for(store, config)
    mode = _MODES[config.get("feature_mode", "cls")]
    return lambda id: bb.feature_np(id, mode)


def _read_id_list(path: str) -> list[str]:
    ids = [line.strip() for line in Path(path).read_text().splitlines()]
    return [id for id in ids if id]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

_SYNTH_DEFAULTS = dict(
    n=1000,
    d=64,
    s=0,
    factors=8,
    noise=0.0,
    seed=0,
    instances=200,
    threads=None,
    csv=False,
)


def cmd_synth(args) -> int:
    t0 = time.time()
    config = _resolve(args, _SYNTH_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticFactorSpec(
        n_triplets=config["n"],
        d=config["d"],
        s=config["s"],
        factor_count=config["factors"],
        noise_sigma=config["noise"],
        seed=config["seed"],
    )
    world = generate_world(spec, n_instances=config["instances"])
    save_store(world.store, out / "store.paln")
    save_manifest(world.manifest, out / "triplets.csv")
    save_labels(world.class_labels, out / "class_labels.csv")
    save_labels(world.instance_labels, out / "instance_labels.csv")
    (out / "queries.txt").write_text("".join(f"{q}\n" for q in world.query_ids))

    frozen = StoreBackbone(world.store, seed=config["seed"])
    embedding_2afc = two_afc_accuracy(frozen, world.manifest, FeatureMode.CLS_ONLY)
    metrics = {
        "n_triplets": len(world.manifest),
        "n_records": len(world.store),
        "n_instances": len(world.query_ids),
        "latent_agreement": world.latent_agreement,
        "embedding_2afc": embedding_2afc,
    }
    _write_report(out, "synth", config, metrics, t0)
    return 0


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

_ALIGN_DEFAULTS = dict(
    margin=0.05,
    lr=3e-4,
    batch=16,
    epochs=8,
    feature_mode="cls",
    seed=0,
    lora_rank=16,
    lora_alpha=0.5,
    lora_dropout=0.0,
    val_frac=0.1,
    max_steps=None,
    threads=None,
    csv=False,
)


def _align_config(config: dict) -> AlignmentConfig:
    return AlignmentConfig(
        margin=config["margin"],
        lr=config["lr"],
        batch_size=config["batch"],
        epochs=config["epochs"],
        feature_mode=_MODES[config["feature_mode"]],
        seed=config["seed"],
        lora_rank=config["lora_rank"],
        lora_alpha=config["lora_alpha"],
        lora_dropout=config["lora_dropout"],
        max_steps=config.get("max_steps"),
    )


def cmd_align(args) -> int:
    t0 = time.time()
    config = _resolve(args, _ALIGN_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = load_store(args.store)
    manifest = load_manifest(args.manifest)
    if args.val_manifest:
        train, val = manifest, load_manifest(args.val_manifest, split_tag="val")
    else:
        frac = config["val_frac"]
        if not 0.0 < frac < 0.5:
            raise DataError(f"--val-frac must be in (0, 0.5), got {frac}")
        train, val, _ = split_manifest(manifest, (1.0 - 2 * frac, frac, frac), seed=config["seed"])
    cfg = _align_config(config)
    backbone = _backbone_for(store, config)
    snapshot, history = train_alignment(cfg, backbone, train, val)
    save_adapters(snapshot, out / "adapters.pala")
    with open(out / "history.jsonl", "w") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    best = min(history, key=lambda h: h["val_loss"]) if history else None
    metrics = {
        "n_train": len(train),
        "n_val": len(val),
        "epochs_run": history[-1]["epoch"] if history else 0,
        "best_epoch": best["epoch"] if best else None,
        "best_val_loss": best["val_loss"] if best else None,
        "best_val_2afc": best["val_2afc"] if best else None,
        "frozen_val_2afc": history[0]["val_2afc"] if history else None,
    }
    _write_report(out, "align", config, metrics, t0)
    return 0


# ---------------------------------------------------------------------------
# eval subcommands
# ---------------------------------------------------------------------------

_EVAL_DEFAULTS = dict(
    feature_mode="cls",
    seed=0,
    ks="1,3,5",
    k=3,
    lora_rank=16,
    lora_alpha=0.5,
    lora_dropout=0.0,
    adapters=None,
    c_grid="1,10,100,1000,10000,100000,1000000",
    folds=10,
    val_frac=0.2,
    bins=256,
    depth_range="0.001,10",
    silog_sign="paper",
    lr=3e-4,
    epochs=10,
    batch=None,
    train_frac=0.8,
    threads=None,
    csv=False,
)


def _eval_retrieval(args, config, store) -> dict:
    featurize = _featurizer(store, config)
    labels = load_labels(args.labels)
    query_ids = _read_id_list(args.queries)
    gallery = [id for id in store.ids() if id in labels and id not in set(query_ids)]
    index = build_index(np.stack([featurize(id) for id in gallery]), gallery)
    queries = {q: featurize(q) for q in query_ids}
    truth = {}
    for q in query_ids:
        if q not in labels:
            raise DataError(f"query {q!r} has no label")
        truth[q] = {g for g in gallery if labels[g] == labels[q]}
    report = recall_at_k(index, queries, truth, ks=_parse_int_list(config["ks"]))
    return report.to_dict()


def _eval_count(args, config, store) -> dict:
    featurize = _featurizer(store, config)
    train = CountDataset.from_store(store, load_labels(args.train_labels), featurize)
    test = CountDataset.from_store(store, load_labels(args.test_labels), featurize)
    return knn_count_eval(train, test, ks=_parse_int_list(config["ks"]))


def _dense_inputs(args, config, store):
    if store.patch_side == 0:
        raise DataError("dense evaluation needs a store with patch grids (s > 0)")
    target_dir = Path(args.targets)
    adapters = None
    if config.get("adapters"):
        named = load_adapters(config["adapters"])
        bb = _backbone_for(store, config)
        bb.load_trainable(named)
        adapters = np.eye(store.dim) + bb.adapter.delta()
    features, targets, kinds = [], [], set()
    for id in store.ids():
        path = target_dir / f"{id}.palt"
        if not path.exists():
            continue
        target, kind = load_target(path)
        kinds.add(kind)
        grid = store[id].patch.astype(np.float64)
        if adapters is not None:
            grid = grid @ adapters.T
        features.append(grid)
        targets.append(target)
    if not features:
        raise DataError(f"no <id>.palt targets found in {target_dir}")
    if len(kinds) > 1:
        raise DataError(f"mixed target kinds in {target_dir}: {sorted(kinds)}")
    return features, targets


def _split_counts(n: int, train_frac: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, min(n - 1, int(round(train_frac * n))))
    return perm[:n_train], perm[n_train:]


def _eval_seg(args, config, store) -> dict:
    features, targets = _dense_inputs(args, config, store)
    n_classes = max(int(t.values.max()) for t in targets) + 1
    tr, te = _split_counts(len(features), config["train_frac"], config["seed"])
    hyper = HeadHyper(
        lr=config["lr"],
        epochs=config["epochs"],
        batch_size=config["batch"] or 16,
        seed=config["seed"],
    )
    head, history = train_linear_head(
        "seg",
        [features[i] for i in tr],
        [targets[i] for i in tr],
        hyper,
        n_classes=n_classes,
    )
    metrics = eval_seg(head, [features[i] for i in te], [targets[i] for i in te])
    metrics["final_train_loss"] = history[-1] if history else None
    metrics["n_train_images"] = len(tr)
    metrics["n_test_images"] = len(te)
    return metrics


def _eval_depth(args, config, store) -> dict:
    features, targets = _dense_inputs(args, config, store)
    lo, hi = _parse_float_list(config["depth_range"])
    binning = DepthBinning(d_min=lo, d_max=hi, n_bins=config["bins"])
    tr, te = _split_counts(len(features), config["train_frac"], config["seed"])
    hyper = HeadHyper(
        lr=config["lr"],
        epochs=config["epochs"],
        batch_size=config["batch"] or 128,
        seed=config["seed"],
    )
    head, history = train_linear_head(
        "depth",
        [features[i] for i in tr],
        [targets[i] for i in tr],
        hyper,
        binning=binning,
        silog_sign=config["silog_sign"],
    )
    metrics = eval_depth(head, [features[i] for i in te], [targets[i] for i in te])
    metrics["final_train_loss"] = history[-1] if history else None
    metrics["n_train_images"] = len(tr)
    metrics["n_test_images"] = len(te)
    return metrics


def _eval_probe(args, config, store) -> dict:
    featurize = _featurizer(store, config)
    labels = load_labels(args.labels)
    ids = [id for id in store.ids() if id in labels]
    names = sorted(set(labels[id] for id in ids))
    name_to_idx = {n: i for i, n in enumerate(names)}
    x = np.stack([featurize(id) for id in ids])
    y = np.array([name_to_idx[labels[id]] for id in ids])
    rng = np.random.default_rng(config["seed"])
    perm = rng.permutation(len(ids))
    n_val = max(1, int(round(config["val_frac"] * len(ids))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    probe_cfg = ProbeConfig(
        c_grid=tuple(_parse_float_list(config["c_grid"])),
        folds=config["folds"],
        seed=config["seed"],
    )
    result = linear_probe_classify(x[train_idx], y[train_idx], x[val_idx], y[val_idx], probe_cfg)
    out = result.to_dict()
    out["n_train"] = len(train_idx)
    out["n_val"] = len(val_idx)
    return out


def _eval_rag(args, config, store) -> dict:
    featurize = _featurizer(store, config)
    labels = load_labels(args.labels)
    query_ids = _read_id_list(args.queries)
    gallery = [id for id in store.ids() if id in labels and id not in set(query_ids)]
    gallery_labels = {id: labels[id] for id in gallery}
    index = build_index(np.stack([featurize(id) for id in gallery]), gallery)
    queries = {q: featurize(q) for q in query_ids}
    query_labels = {q: labels[q] for q in query_ids}
    result = evaluate_rag(index, gallery_labels, queries, query_labels, k=config["k"])
    bundles_path = Path(args.out) / "bundles.json"
    bundles_path.parent.mkdir(parents=True, exist_ok=True)
    bundles_path.write_text(
        json.dumps([b.to_dict() for b in result["bundles"]], indent=2, sort_keys=True) + "\n"
    )
    return {"accuracy": result["accuracy"], "n_queries": len(query_ids), "k": config["k"]}


_EVAL_RUNNERS = {
    "retrieval": _eval_retrieval,
    "count": _eval_count,
    "seg": _eval_seg,
    "depth": _eval_depth,
    "probe": _eval_probe,
    "rag": _eval_rag,
}


def cmd_eval(args) -> int:
    t0 = time.time()
    config = _resolve(args, _EVAL_DEFAULTS)
    store = load_store(args.store)
    metrics = _EVAL_RUNNERS[args.task](args, config, store)
    _write_report(Path(args.out), f"eval.{args.task}", config, metrics, t0)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

_ABLATE_DEFAULTS = dict(
    budget=13_900,
    steps=None,
    tasks="retrieval",
    ks="1,3,5",
    margin=0.05,
    lr=3e-4,
    batch=16,
    epochs=8,
    feature_mode="cls",
    seed=0,
    lora_rank=16,
    lora_alpha=0.5,
    lora_dropout=0.0,
    val_frac=0.1,
    threads=None,
    csv=False,
)


def _ablate_eval(task, backbone, args, config) -> dict:
    mode = _MODES[config["feature_mode"]]
    if task == "retrieval":
        if not args.eval_labels or not args.eval_queries:
            raise DataError("retrieval task needs --eval-labels and --eval-queries")
        labels = load_labels(args.eval_labels)
        query_ids = _read_id_list(args.eval_queries)
        gallery = [
            id for id in backbone.store.ids() if id in labels and id not in set(query_ids)
        ]
        index = build_index(
            np.stack([backbone.feature_np(id, mode) for id in gallery]), gallery
        )
        queries = {q: backbone.feature_np(q, mode) for q in query_ids}
        truth = {q: {g for g in gallery if labels[g] == labels[q]} for q in query_ids}
        report = recall_at_k(index, queries, truth, ks=_parse_int_list(config["ks"]))
        return report.to_dict()["recall"]
    if task == "afc":
        if not args.eval_manifest:
            raise DataError("afc task needs --eval-manifest")
        manifest = load_manifest(args.eval_manifest)
        return {"2afc": two_afc_accuracy(backbone, manifest, mode)}
    raise DataError(f"unsupported ablation task {task!r} (use retrieval, afc)")


def cmd_ablate(args) -> int:
    t0 = time.time()
    config = _resolve(args, _ABLATE_DEFAULTS)
    out = Path(args.out)
    datasets = []
    for spec in args.dataset:
        if "=" not in spec or ":" not in spec.split("=", 1)[1]:
            raise DataError(f"--dataset must be name=STORE:MANIFEST, got {spec!r}")
        name, paths = spec.split("=", 1)
        store_path, manifest_path = paths.split(":", 1)
        datasets.append((name, store_path, manifest_path))
    tasks = [t for t in str(config["tasks"]).split(",") if t]
    step_counts = _parse_int_list(config["steps"]) if config["steps"] else [None]
    eval_store = load_store(args.eval_store) if args.eval_store else None

    rows = []
    for name, store_path, manifest_path in datasets:
        store = load_store(store_path)
        manifest = load_manifest(manifest_path)
        if len(manifest) < config["budget"]:
            raise DataError(
                f"dataset {name!r} has {len(manifest)} triplets, budget needs {config['budget']}"
            )
        rng = np.random.default_rng(config["seed"])
        picks = rng.permutation(len(manifest))[: config["budget"]]
        budgeted = TripletManifest(entries=[manifest.entries[i] for i in picks])
        frac = config["val_frac"]
        if not 0.0 < frac < 0.5:
            raise DataError(f"--val-frac must be in (0, 0.5), got {frac}")
        train, val, _ = split_manifest(budgeted, (1.0 - 2 * frac, frac, frac), seed=config["seed"])
        for steps in step_counts:
            cfg = AlignmentConfig(
                margin=config["margin"],
                lr=config["lr"],
                batch_size=config["batch"],
                epochs=config["epochs"],
                feature_mode=_MODES[config["feature_mode"]],
                seed=config["seed"],
                lora_rank=config["lora_rank"],
                lora_alpha=config["lora_alpha"],
                lora_dropout=config["lora_dropout"],
                max_steps=steps,
            )
            backbone = StoreBackbone(
                store,
                rank=config["lora_rank"],
                alpha=config["lora_alpha"],
                dropout_p=config["lora_dropout"],
                seed=config["seed"],
            )
            snapshot, _ = train_alignment(cfg, backbone, train, val)
            target = backbone
            if eval_store is not None:
                target = StoreBackbone(
                    eval_store,
                    rank=config["lora_rank"],
                    alpha=config["lora_alpha"],
                    dropout_p=config["lora_dropout"],
                    seed=config["seed"],
                )
                target.load_trainable(snapshot)
            row = {"dataset": name, "steps": steps if steps is not None else "full"}
            for task in tasks:
                row[task] = _ablate_eval(task, target, args, config)
            rows.append(row)
    _write_report(out, "ablate", config, {"rows": rows}, t0)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory for artifacts and report")
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=_env_threads(), help="worker cap (informational)")
    p.add_argument("--csv", action="store_const", const=True, help="also write metrics.csv")


def _env_threads():
    raw = os.environ.get("PALN_THREADS")
    return int(raw) if raw else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palign",
        description="perceptual-alignment engine: triplet fine-tuning and evaluations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic triplet world")
    _add_common(p)
    p.add_argument("--n", type=int, help="number of triplets")
    p.add_argument("--d", type=int, help="embedding dimension")
    p.add_argument("--s", type=int, help="patch grid side (0 = none)")
    p.add_argument("--factors", type=int, help="latent factor count")
    p.add_argument("--noise", type=float, help="embedding noise (relative)")
    p.add_argument("--instances", type=int, help="held-out retrieval instances")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="train alignment adapters on triplets")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--feature-mode", dest="feature_mode", choices=("cls", "patch"))
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.add_argument("--lora-dropout", dest="lora_dropout", type=float)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="run one evaluation protocol")
    p.add_argument("task", choices=sorted(_EVAL_RUNNERS))
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--adapters", help="adapter checkpoint to apply")
    p.add_argument("--labels", help="id,label CSV (retrieval/probe/rag)")
    p.add_argument("--queries", help="text file with one query id per line")
    p.add_argument("--train-labels", dest="train_labels", help="count labels for the train split")
    p.add_argument("--test-labels", dest="test_labels", help="count labels for the test split")
    p.add_argument("--targets", help="directory of <id>.palt dense targets")
    p.add_argument("--feature-mode", dest="feature_mode", choices=("cls", "patch"))
    p.add_argument("--ks", help="comma-separated k values")
    p.add_argument("--k", type=int, help="examples per RAG bundle")
    p.add_argument("--c-grid", dest="c_grid", help="comma-separated inverse regularization grid")
    p.add_argument("--folds", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--depth-range", dest="depth_range", help="d_min,d_max in meters")
    p.add_argument("--silog-sign", dest="silog_sign", choices=("paper", "classic"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.add_argument("--lora-dropout", dest="lora_dropout", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare adapters trained on different datasets")
    _add_common(p)
    p.add_argument(
        "--dataset",
        action="append",
        required=True,
        help="name=STORE:MANIFEST (repeatable)",
    )
    p.add_argument("--tasks", help="comma-separated tasks: retrieval, afc")
    p.add_argument("--budget", type=int, help="triplet budget per dataset")
    p.add_argument("--steps", help="comma-separated step counts to ablate")
    p.add_argument("--eval-store", dest="eval_store")
    p.add_argument("--eval-labels", dest="eval_labels")
    p.add_argument("--eval-queries", dest="eval_queries")
    p.add_argument("--eval-manifest", dest="eval_manifest")
    p.add_argument("--ks", help="comma-separated k values")
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--feature-mode", dest="feature_mode", choices=("cls", "patch"))
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.add_argument("--lora-dropout", dest="lora_dropout", type=float)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PalignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
