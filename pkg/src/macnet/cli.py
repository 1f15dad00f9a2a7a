"""Command-line entry point: ``macnet <subcommand> [--config FILE] [--key value ...]``.

Every subcommand accepts a JSON config whose keys are listed by ``--help``;
each key may also be given as a flag, which wins over the file. The seed
resolves as flag > ``MACNET_SEED`` > config file > default. The resolved
configuration is written next to the outputs.

Exit codes: 0 success, 2 configuration error, 3 data error. Failures print
one JSON line on standard error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

SEED_ENV = "MACNET_SEED"
EXIT_CONFIG, EXIT_DATA = 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | str | bool | ints | path
    default: Any
    help: str
    required: bool = False


def _global_keys():
    return [
        Key("seed", "int", 0, "random seed (overridden by $MACNET_SEED, then by --seed)"),
        Key("out", "path", None, "output path", required=True),
        Key("threads", "int", 1, "worker threads for BLAS; 1 is the deterministic reference"),
    ]


NET_KEYS = [
    Key("channels", "ints", [16, 32, 64, 64], "conv channels per trunk block"),
    Key("hidden", "int", 128, "classifier hidden width"),
    Key("lambda_attr", "float", 1.0, "weight of the attribute loss"),
    Key("lambda_dist", "float", 0.1, "weight of the distribution loss"),
    Key("aux_heads", "bool", True, "build attribute heads"),
    Key("kde_mode", "str", "pooled", "KDE over pooled values or per attribute (pooled|per-attribute)"),
    Key("beta_a", "float", 0.5, "Beta prior a"),
    Key("beta_b", "float", 0.5, "Beta prior b"),
]

TRAIN_KEYS = [
    Key("batch_size", "int", 64, "stratified batch size (divisible by K)"),
    Key("learning_rate", "float", 0.01, "initial learning rate"),
    Key("momentum", "float", 0.9, "SGD momentum"),
    Key("weight_decay", "float", 5e-4, "L2 weight decay"),
    Key("lr_decay", "float", 10.0, "divisor applied when validation error rises"),
    Key("lr_floor", "float", 1e-8, "stop once the rate falls below this"),
    Key("max_epochs", "int", 60, "epoch cap"),
    Key("grad_clip", "float", 5.0, "global gradient-norm cap (<= 0 disables)"),
    Key("exclude_category", "int", -1, "drop this category from training (-1 keeps all)"),
]

ANNEAL_KEYS = [
    Key("n_proposals", "int", 20000, "annealing proposals per trait"),
    Key("t0", "float", 1.0, "initial temperature"),
    Key("cooling", "float", 0.97, "geometric cooling factor"),
    Key("cooling_interval", "int", 100, "proposals between cooling steps"),
    Key("max_leaves", "int", 8, "maximum leaves per tree"),
    Key("threshold", "float", 0.5, "attribute binarisation threshold"),
]

SUBCOMMANDS = {
    "synth": ("generate the patch corpus and simulated similarity judgments", [
        Key("patch_size", "int", 32, "patch side in pixels"),
        Key("train_count", "int", 400, "train patches per category"),
        Key("val_count", "int", 100, "validation patches per category"),
        Key("test_count", "int", 100, "test patches per category"),
        Key("annotators", "int", 50, "simulated annotators per category pair"),
        Key("noise", "float", 0.1, "annotator noise half-width"),
    ]),
    "distances": ("pool similarity judgments into a distance matrix CSV", [
        Key("judgments", "path", None, "judgments JSON", required=True),
    ]),
    "embed": ("solve the category-attribute matrix from a distance matrix", [
        Key("distances", "path", None, "distance matrix CSV", required=True),
        Key("attributes", "int", 12, "attribute count M"),
        Key("restarts", "int", 8, "random restarts"),
        Key("iterations", "int", 2000, "projected-gradient iterations per restart"),
        Key("step", "float", 0.05, "initial step size"),
        Key("prior_weight", "float", 0.01, "weight of the Beta prior term"),
        Key("beta_a", "float", 0.5, "Beta prior a"),
        Key("beta_b", "float", 0.5, "Beta prior b"),
        Key("remove_category", "int", -1, "drop this category's row and column first (-1 keeps all)"),
    ]),
    "train": ("train a network on a corpus", [
        Key("corpus", "path", None, "corpus directory", required=True),
        Key("attr_matrix", "path", None, "category-attribute matrix CSV (needed with aux heads)"),
    ] + NET_KEYS + TRAIN_KEYS),
    "eval": ("score a checkpoint: accuracy, attribute fidelity, distribution match, separation", [
        Key("corpus", "path", None, "corpus directory", required=True),
        Key("checkpoint", "path", None, "network checkpoint", required=True),
        Key("attr_matrix", "path", None, "category-attribute matrix CSV"),
        Key("split", "str", "test", "split to evaluate"),
        Key("exclude_category", "int", -1, "category absent from the network (-1 keeps all)"),
    ]),
    "maps": ("per-pixel attribute and material maps of two-region composites", [
        Key("corpus", "path", None, "corpus directory (for category definitions)", required=True),
        Key("checkpoint", "path", None, "network checkpoint", required=True),
        Key("left", "int", 0, "category index of the left half"),
        Key("right", "int", 1, "category index of the right half"),
        Key("size", "int", 128, "composite side in pixels"),
        Key("stride", "int", 1, "sliding-window stride (consistency is only unbiased at 1)"),
    ]),
    "nshot": ("few-shot recall on a held-out category with a linear SVM", [
        Key("corpus", "path", None, "corpus directory (for category definitions)", required=True),
        Key("checkpoint", "path", None, "network trained without the held-out category", required=True),
        Key("held_out", "int", 0, "held-out category index"),
        Key("shots", "ints", [1, 2, 5, 10, 20], "N values"),
        Key("repeats", "int", 5, "repeats per N"),
        Key("pool_images", "int", 20, "held-out images available for sampling"),
        Key("negative_images", "int", 20, "images per seen category for negatives"),
        Key("test_images", "int", 10, "test images per category"),
        Key("svm_C", "float", 1.0, "SVM regularisation C"),
        Key("svm_epochs", "int", 200, "SVM epochs"),
    ]),
    "traits": ("decode ground-truth traits from binarised attributes by logic regression", [
        Key("corpus", "path", None, "corpus directory", required=True),
        Key("checkpoint", "path", None, "network checkpoint", required=True),
        Key("fit_split", "str", "train", "split used to fit trees"),
        Key("test_split", "str", "test", "split used to score trees"),
        Key("max_fit_samples", "int", 800, "cap on fitting samples (stratified by category)"),
    ] + ANNEAL_KEYS),
}


def keys_for(sub: str) -> list:
    return _global_keys() + SUBCOMMANDS[sub][1]


# parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _coerce(key: Key, value):
    try:
        if value is None:
            return None
        if key.kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if key.kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if key.kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError
        if key.kind == "ints":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)) or not value:
                raise ValueError
            return [_coerce(Key(key.name, "int", None, ""), v) for v in value]
        if not isinstance(value, str):
            raise ValueError
        return value
    except (TypeError, ValueError):
        raise ConfigError(f"key {key.name!r} expects {key.kind}, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macnet", description="Material attribute-category network pipeline.")
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, (summary, _) in SUBCOMMANDS.items():
        keys = keys_for(name)
        listing = "\n".join(f"  {k.name:<18} {k.kind:<6} default={k.default!r}{' (required)' if k.required else ''}"
                            for k in keys)
        p = subs.add_parser(name, help=summary, description=summary,
                            epilog="config keys:\n" + listing,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON file with any of the config keys")
        for k in keys:
            p.add_argument(_flag(k.name), dest=k.name, default=None, metavar=k.kind.upper(), help=k.help)
    return parser


def resolve_config(sub: str, args: argparse.Namespace, env: Optional[dict] = None) -> dict:
    env = os.environ if env is None else env
    keys = {k.name: k for k in keys_for(sub)}
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config keys for {sub}: {', '.join(unknown)}")
    cfg = {}
    for name, key in keys.items():
        value = key.default
        if name in file_cfg:
            value = file_cfg[name]
        if name == "seed" and env.get(SEED_ENV) not in (None, ""):
            value = env[SEED_ENV]
        flag = getattr(args, name)
        if flag is not None:
            value = flag
        value = _coerce(key, value)
        if key.required and value is None:
            raise ConfigError(f"missing required key {name!r} (flag {_flag(name)})")
        cfg[name] = value
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


# shared helpers -----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _echo_config(cfg: dict, sub: str, out: Path, out_is_dir: bool) -> None:
    target = out / "config.json" if out_is_dir else out.with_name(out.stem + ".config.json")
    _write_json(target, {"subcommand": sub, **cfg})


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _out_file(cfg: dict) -> Path:
    out = Path(cfg["out"])
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _categories(corpus):
    from .synth import CategorySpec, load_manifest
    manifest = load_manifest(corpus)
    return manifest, [CategorySpec.from_dict(c) for c in manifest["categories"]]


def _drop_category(split, index: int):
    if index < 0:
        return split
    keep = split.y != index
    sub = split.subset(keep)
    sub.y = np.where(sub.y > index, sub.y - 1, sub.y)
    return sub


def _load_net(path):
    from .network import MacNetwork
    return MacNetwork.load(path)


def load_colormap() -> np.ndarray:
    text = resources.files("macnet").joinpath("data/colormap.csv").read_text()
    rows = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    table = np.array([[int(v) for v in line.split(",")] for line in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"colormap must be 256x3, got {table.shape}")
    return table


def heatmap(values: np.ndarray, colormap: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through the 256-entry table."""
    idx = np.clip(np.floor(np.asarray(values) * 255.0 + 0.5), 0, 255).astype(np.int64)
    return colormap[idx]


def _save_csv(path: Path, matrix: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in matrix:
        w.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue())


# subcommands --------------------------------------------------------------------

def cmd_synth(cfg: dict) -> dict:
    from .synth import CorpusConfig, gen_corpus, oracle_judgments
    out = _out_dir(cfg)
    try:
        ccfg = CorpusConfig(counts={"train": cfg["train_count"], "val": cfg["val_count"], "test": cfg["test_count"]},
                            seed=cfg["seed"], patch_size=cfg["patch_size"])
        judgments = oracle_judgments(ccfg.categories, cfg["annotators"], cfg["noise"], cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest = gen_corpus(ccfg, out)
    judgments.save(out / "judgments.json")
    _echo_config(cfg, "synth", out, True)
    return {"patches": sum(len(v) for v in manifest["splits"].values()), "out": str(out)}


def cmd_distances(cfg: dict) -> dict:
    from .percept import SimilarityJudgments, build_distance_matrix, save_matrix_csv
    j = SimilarityJudgments.load(cfg["judgments"])
    D = build_distance_matrix(j)
    out = _out_file(cfg)
    save_matrix_csv(out, D)
    _echo_config(cfg, "distances", out, False)
    return {"categories": D.shape[0], "out": str(out)}


def cmd_embed(cfg: dict) -> dict:
    from .percept import (BetaParams, SolverConfig, check_distance_matrix, distance_rmse, load_matrix_csv,
                          remove_category, save_matrix_csv, solve_category_attribute_matrix)
    D = check_distance_matrix(load_matrix_csv(cfg["distances"]))
    if cfg["remove_category"] >= 0:
        if cfg["remove_category"] >= D.shape[0]:
            raise ConfigError(f"remove_category {cfg['remove_category']} outside [0, {D.shape[0]})")
        D = remove_category(D, cfg["remove_category"])
    try:
        scfg = SolverConfig(restarts=cfg["restarts"], iterations=cfg["iterations"], step=cfg["step"],
                            prior_weight=cfg["prior_weight"], beta=BetaParams(cfg["beta_a"], cfg["beta_b"]),
                            seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["attributes"] < 1:
        raise ConfigError("attributes must be >= 1")
    res = solve_category_attribute_matrix(D, cfg["attributes"], scfg)
    out = _out_file(cfg)
    save_matrix_csv(out, res.A)
    report = {"objective": res.objective, "stress": res.stress, "prior": res.prior,
              "restart": res.restart, "rmse": distance_rmse(res.A, D)}
    _write_json(out.with_name(out.stem + ".report.json"), report)
    _echo_config(cfg, "embed", out, False)
    return report


def _network_config(cfg: dict, k: int, m: int, patch: int):
    from .network import NetworkConfig
    from .percept import BetaParams
    try:
        return NetworkConfig(patch_size=patch, channels=tuple(cfg["channels"]), n_categories=k, n_attributes=m,
                             hidden=cfg["hidden"], lambda_attr=cfg["lambda_attr"], lambda_dist=cfg["lambda_dist"],
                             beta=BetaParams(cfg["beta_a"], cfg["beta_b"]), kde_mode=cfg["kde_mode"],
                             aux_heads=cfg["aux_heads"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: dict) -> dict:
    from .network import build
    from .percept import load_matrix_csv
    from .synth import load_manifest, load_split
    from .train import TrainConfig, train
    manifest = load_manifest(cfg["corpus"])
    k = len(manifest["categories"])
    excl = cfg["exclude_category"]
    if excl >= k:
        raise ConfigError(f"exclude_category {excl} outside [0, {k})")
    if excl >= 0:
        k -= 1
    A = None
    if cfg["attr_matrix"] is not None:
        A = load_matrix_csv(cfg["attr_matrix"])
        if A.shape[0] != k:
            raise DataError(f"attribute matrix has {A.shape[0]} rows but training uses {k} categories")
    elif cfg["aux_heads"]:
        raise ConfigError("attr_matrix is required when aux_heads is true")
    net_cfg = _network_config(cfg, k, A.shape[1] if A is not None else 1, manifest["patch_size"])
    try:
        tcfg = TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                           momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], lr_decay=cfg["lr_decay"],
                           lr_floor=cfg["lr_floor"], max_epochs=cfg["max_epochs"], seed=cfg["seed"],
                           grad_clip=cfg["grad_clip"] if cfg["grad_clip"] > 0 else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if tcfg.batch_size % k:
        raise ConfigError(f"batch_size {tcfg.batch_size} is not divisible by {k} categories")
    out = _out_dir(cfg)
    _echo_config(cfg, "train", out, True)
    tr = _drop_category(load_split(cfg["corpus"], "train", manifest), excl)
    va = _drop_category(load_split(cfg["corpus"], "val", manifest), excl)
    net = build(net_cfg, cfg["seed"])
    net, tlog = train(net, tr, va, A, tcfg, out_dir=out)
    best = max(tlog.records, key=lambda r: r["val_accuracy"])
    return {"epochs": len(tlog), "best_epoch": best["epoch"], "best_val_accuracy": best["val_accuracy"]}


def cmd_eval(cfg: dict) -> dict:
    from .evaluate import cluster_separation, distribution_match
    from .network import predict
    from .percept import load_matrix_csv
    from .synth import load_manifest, load_split
    from .train import evaluate_split
    manifest = load_manifest(cfg["corpus"])
    if cfg["split"] not in manifest["splits"]:
        raise ConfigError(f"unknown split {cfg['split']!r}")
    net = _load_net(cfg["checkpoint"])
    split = _drop_category(load_split(cfg["corpus"], cfg["split"], manifest), cfg["exclude_category"])
    A = load_matrix_csv(cfg["attr_matrix"]) if cfg["attr_matrix"] is not None else None
    if A is not None and A.shape[0] != net.cfg.n_categories:
        raise DataError(f"attribute matrix has {A.shape[0]} rows for {net.cfg.n_categories} categories")
    if net.cfg.n_categories != len(np.unique(split.y)):
        raise DataError(f"network has {net.cfg.n_categories} categories, split has {len(np.unique(split.y))}")
    rec = evaluate_split(net, split, A if net.cfg.aux_heads else None)
    report = {"accuracy": rec["val_accuracy"], "cross_entropy": rec["val_cross_entropy"]}
    out = predict(net, split.X)
    report["pixel_silhouette"] = cluster_separation(split.X.reshape(len(split), -1), split.y)
    if out["attributes"] is not None:
        report["attribute_silhouette"] = cluster_separation(out["attributes"], split.y)
        report["distribution_kl"] = distribution_match(out["attributes"], net.cfg.beta, net.cfg.grid)
        if A is not None:
            report["u_final"] = rec["val_u_final"]
            report["u_final_per_attribute"] = rec["val_u_final"] / net.cfg.n_attributes
            report["u_layers"] = rec["val_u"]
    odir = _out_dir(cfg)
    _write_json(odir / "report.json", report)
    _echo_config(cfg, "eval", odir, True)
    return report


def cmd_maps(cfg: dict) -> dict:
    from .evaluate import spatial_consistency
    from .network import covered_span, predict_map
    from .synth import gen_composite, save_png
    _, cats = _categories(cfg["corpus"])
    for side in ("left", "right"):
        if not 0 <= cfg[side] < len(cats):
            raise ConfigError(f"{side} {cfg[side]} outside [0, {len(cats)})")
    net = _load_net(cfg["checkpoint"])
    if cfg["size"] < net.cfg.patch_size or cfg["stride"] < 1:
        raise ConfigError("size must be at least one patch and stride >= 1")
    image, mask = gen_composite(cats[cfg["left"]], cats[cfg["right"]], cfg["seed"], cfg["size"])
    out = _out_dir(cfg)
    cmap = load_colormap()
    save_png(out / "composite.png", image)
    _save_csv(out / "mask.csv", mask)
    rows = covered_span(image.shape[1], net.cfg.patch_size, cfg["stride"])
    cols = covered_span(image.shape[2], net.cfg.patch_size, cfg["stride"])
    report = {"region": [rows.start, rows.stop, cols.start, cols.stop], "attributes": [], "materials": []}
    targets = ["materials"] + (["attributes"] if net.cfg.aux_heads else [])
    for target in targets:
        maps = predict_map(net, image, cfg["stride"], target)
        prefix = "attribute" if target == "attributes" else "material"
        for i, m in enumerate(maps):
            Image.fromarray(heatmap(m, cmap), mode="RGB").save(out / f"{prefix}_{i:02d}.png", format="PNG")
            _save_csv(out / f"{prefix}_{i:02d}.csv", m)
            within, cross = spatial_consistency(m[rows, cols], mask[rows, cols])
            report[target].append({"index": i, "within_tv": within, "cross_tv": cross})
    _write_json(out / "consistency.json", report)
    _echo_config(cfg, "maps", out, True)
    return {"maps": sum(len(v) for v in report.values()), "out": str(out)}


def cmd_nshot(cfg: dict) -> dict:
    from .evaluate import NShotConfig, nshot_curve_rows, nshot_eval
    _, cats = _categories(cfg["corpus"])
    try:
        ncfg = NShotConfig(shots=tuple(cfg["shots"]), repeats=cfg["repeats"], pool_images=cfg["pool_images"],
                           negative_images=cfg["negative_images"], test_images=cfg["test_images"],
                           svm_C=cfg["svm_C"], svm_epochs=cfg["svm_epochs"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    net = _load_net(cfg["checkpoint"])
    report = nshot_eval(net, cats, cfg["held_out"], ncfg, cfg["seed"])
    out = _out_dir(cfg)
    _write_json(out / "report.json", report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "feature_set", "mean", "std"])
    for n, fs, mean, std in nshot_curve_rows(report):
        w.writerow([n, fs, repr(mean), repr(std)])
    (out / "curve.csv").write_text(buf.getvalue())
    _echo_config(cfg, "nshot", out, True)
    return {fs: {n: v["mean"] for n, v in per.items()} for fs, per in report["recall"].items()}


def cmd_traits(cfg: dict) -> dict:
    from .evaluate import AnnealConfig, trait_decoding
    from .network import predict
    from .synth import load_manifest, load_split
    manifest = load_manifest(cfg["corpus"])
    for s in (cfg["fit_split"], cfg["test_split"]):
        if s not in manifest["splits"]:
            raise ConfigError(f"unknown split {s!r}")
    try:
        acfg = AnnealConfig(n_proposals=cfg["n_proposals"], t0=cfg["t0"], cooling=cfg["cooling"],
                            cooling_interval=cfg["cooling_interval"], max_leaves=cfg["max_leaves"],
                            threshold=cfg["threshold"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    net = _load_net(cfg["checkpoint"])
    if not net.cfg.aux_heads:
        raise DataError("checkpoint has no attribute heads")
    fit = load_split(cfg["corpus"], cfg["fit_split"], manifest)
    test = load_split(cfg["corpus"], cfg["test_split"], manifest)
    fit = fit.subset(stratified_subsample(fit.y, cfg["max_fit_samples"], cfg["seed"]))
    report = trait_decoding(predict(net, fit.X)["attributes"], fit.traits,
                            predict(net, test.X)["attributes"], test.traits,
                            manifest["trait_names"], acfg, cfg["seed"])
    out = _out_dir(cfg)
    _write_json(out / "traits.json", report)
    _echo_config(cfg, "traits", out, True)
    return {"mean_test_accuracy": report["mean_test_accuracy"]}


def stratified_subsample(labels, limit: int, seed: int) -> np.ndarray:
    """Sorted indices of at most ``limit`` samples, an equal share per label."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    per = max(limit // len(classes), 1)
    rng = np.random.default_rng(seed)
    picks = [rng.permutation(np.flatnonzero(labels == c))[:per] for c in classes]
    return np.sort(np.concatenate(picks))


COMMANDS: dict[str, Callable[[dict], dict]] = {
    "synth": cmd_synth, "distances": cmd_distances, "embed": cmd_embed, "train": cmd_train,
    "eval": cmd_eval, "maps": cmd_maps, "nshot": cmd_nshot, "traits": cmd_traits,
}


def _fail(kind: str, sub: Optional[str], message: str) -> None:
    line = json.dumps({"error": kind, "subcommand": sub, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    sub = None
    try:
        args = parser.parse_args(argv)
        sub = args.subcommand
        if sub is None:
            raise ConfigError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        cfg = resolve_config(sub, args)
    except ConfigError as exc:
        _fail("config", sub, str(exc))
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=cfg["threads"]):
            summary = COMMANDS[sub](cfg)
    except ConfigError as exc:
        _fail("config", sub, str(exc))
        return EXIT_CONFIG
    except (DataError, OSError, ValueError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing field {exc}"
        _fail("data", sub, msg)
        return EXIT_DATA
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
