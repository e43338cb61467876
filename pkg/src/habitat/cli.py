"""Command-line pipeline: synth, sample, train, tune, evaluate, importance, predict, analyze.

Every stage reads its predecessors' files from the run's output directory
and records what it wrote in ``manifest.json`` there. Set HABITAT_LOG to a
logging level name (DEBUG, INFO, ...) for more or less chatter.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

from . import analysis, forest, metrics, sampling
from .grid import CATEGORICAL, CONTINUOUS, GridSpec, build_stack, feature_layer, feature_names_for
from .raster_io import (RANGE_MAP, ZONE, parse_occurrences, read_ascii_grid, read_polygons,
                        save_ascii_grid)
from .synth import SynthConfig, generate, write_fixture

log = logging.getLogger("habitat")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    occurrences: str
    layers: str
    range_map: str
    zones: str | None
    output_dir: str
    grid: GridSpec
    seed: int
    k_pseudo_presence: int = 2
    default_uncertainty_m: float = sampling.DEFAULT_UNCERTAINTY_M
    n_pseudo_absence: int | None = None
    buffer_m: float = 0.0
    fallback: bool = False
    params: forest.Hyperparams = field(default_factory=forest.Hyperparams)
    tuning_grid: dict = field(default_factory=dict)
    folds: int = 5
    threshold: float = 0.5
    baseline_year: int | None = None
    delimiter: str = "\t"
    threads: int = 1
    drop_k: int = 0
    permutation_repeats: int = 10

    def out(self, *parts) -> str:
        return os.path.join(self.output_dir, *parts)


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return None if p is None else (p if os.path.isabs(p) else os.path.join(base, p))

    if "seed" not in doc and (overrides or {}).get("seed") is None:
        raise ConfigError("config must set 'seed' (there is no default seed)")
    try:
        s = doc.get("sampling", {})
        fp = doc.get("forest", {})
        tuning = doc.get("tuning", {})
        cfg = RunConfig(
            occurrences=resolve(doc["occurrences"]),
            layers=resolve(doc["layers"]),
            range_map=resolve(doc["range_map"]),
            zones=resolve(doc.get("zones")),
            output_dir=resolve(doc.get("output_dir", "run")),
            grid=GridSpec(**doc["grid"]),
            seed=int(doc.get("seed", 0)),
            k_pseudo_presence=int(s.get("k_pseudo_presence", 2)),
            default_uncertainty_m=float(s.get("default_uncertainty_m",
                                              sampling.DEFAULT_UNCERTAINTY_M)),
            n_pseudo_absence=s.get("n_pseudo_absence"),
            buffer_m=float(s.get("buffer_m", 0.0)),
            fallback=bool(s.get("fallback", False)),
            params=forest.Hyperparams(**fp),
            tuning_grid=tuning.get("grid", {}),
            folds=int(tuning.get("folds", 5)),
            threshold=float(doc.get("threshold", 0.5)),
            baseline_year=doc.get("baseline_year"),
            delimiter=doc.get("delimiter", "\t"),
            permutation_repeats=int(doc.get("permutation_repeats", 10)),
        )
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    for name in ("occurrences", "layers", "range_map", "zones"):
        p = getattr(cfg, name)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"{name} path does not exist: {p}")
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    if len(cfg.delimiter) != 1:
        raise ConfigError("delimiter must be a single character")
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _record(cfg: RunConfig, stage: str, outputs: list[str], info: dict | None = None) -> None:
    path = cfg.out("manifest.json")
    doc = {}
    if os.path.exists(path):
        with open(path) as f:
            doc = json.load(f)
    doc[stage] = {
        "outputs": {os.path.relpath(p, cfg.output_dir): _sha256(p) for p in outputs},
        **(info or {}),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def _write(path: str, text: str | bytes) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    mode = "wb" if isinstance(text, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"newline": "\n"})) as f:
        f.write(text)
    return path


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{os.path.basename(path)} not found; run '{stage}' first")
    return path


def load_manifest(path: str) -> list[dict]:
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise ConfigError("layer manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, e in enumerate(entries):
        try:
            name, p = e["name"], e["path"]
        except (KeyError, TypeError):
            raise ConfigError(f"layer manifest entry {i} needs 'name' and 'path'") from None
        kind = e.get("kind", CONTINUOUS)
        if kind not in (CONTINUOUS, CATEGORICAL):
            raise ConfigError(f"layer {name!r}: unknown kind {kind!r}")
        temporal = e.get("temporal", "static")
        if isinstance(temporal, dict):
            year, month = temporal.get("year"), temporal.get("month")
        elif temporal == "monthly":
            year, month = e.get("year"), e.get("month")
        elif temporal == "static":
            year = month = None
        else:
            raise ConfigError(f"layer {name!r}: unknown temporal {temporal!r}")
        if temporal != "static" and (year is None or month is None):
            raise ConfigError(f"layer {name!r}: monthly entry needs year and month")
        out.append({"name": name, "path": p if os.path.isabs(p) else os.path.join(base, p),
                    "kind": kind, "year": year, "month": month})
    return out


def load_stacks(cfg: RunConfig, only: list[str] | None = None) -> dict:
    """One FeatureStack per (year, month) found among the monthly manifest entries."""
    entries = load_manifest(cfg.layers)
    names = []
    for e in entries:
        if e["name"] not in names:
            names.append(e["name"])
    if only is not None:
        missing = [n for n in only if n not in names]
        if missing:
            raise ConfigError(f"layers {missing} are not in the manifest")
        names = list(only)
    static = {e["name"]: e for e in entries if e["year"] is None}
    monthly = {}
    for e in entries:
        if e["year"] is not None:
            monthly.setdefault((int(e["year"]), int(e["month"])), {})[e["name"]] = e
    if not monthly:
        raise ConfigError("layer manifest has no monthly entries")
    cache = {}

    def grid_for(e):
        if e["path"] not in cache:
            cache[e["path"]] = read_ascii_grid(e["path"], e["kind"])
        return cache[e["path"]]

    stacks = {}
    for (year, month), layers in sorted(monthly.items()):
        chosen = []
        for n in names:
            e = layers.get(n) or static.get(n)
            if e is None:
                raise ConfigError(f"layer {n!r} has no raster for {year}-{month:02d}")
            chosen.append((n, grid_for(e), e["kind"]))
        stacks[(year, month)] = build_stack(chosen, cfg.grid, month, year)
    return stacks


def _read_dataset(path: str, cfg: RunConfig) -> sampling.LabeledDataset:
    with open(path) as f:
        return sampling.parse_dataset(f.read(), cfg.delimiter)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(out_dir: str, seed: int, **kw) -> dict:
    cfg = SynthConfig(seed=seed, **kw)
    fx = generate(cfg)
    return write_fixture(fx, cfg, out_dir)


def cmd_sample(cfg: RunConfig) -> None:
    with open(cfg.occurrences) as f:
        occ = parse_occurrences(f.read(), cfg.delimiter)
    stacks = load_stacks(cfg)
    range_maps = read_polygons(cfg.range_map, RANGE_MAP)
    names = feature_names_for(list(stacks.values()))
    ds, report = sampling.build_labeled_dataset(
        occ.records, stacks, range_maps, names,
        k_pseudo_presence=cfg.k_pseudo_presence,
        default_uncertainty_m=cfg.default_uncertainty_m,
        n_pseudo_absence=cfg.n_pseudo_absence, buffer_m=cfg.buffer_m,
        fallback=cfg.fallback, master_seed=cfg.seed)
    train, test = sampling.split_70_30(ds, sampling.mix_seed(cfg.seed, 4))
    outs = [
        _write(cfg.out("dataset.tsv"), sampling.write_dataset(ds, cfg.delimiter)),
        _write(cfg.out("train.tsv"), sampling.write_dataset(train, cfg.delimiter)),
        _write(cfg.out("test.tsv"), sampling.write_dataset(test, cfg.delimiter)),
    ]
    info = {"records": len(occ), "skipped_rows": dict(occ.skipped), **asdict(report),
            "samples": len(ds), "train": len(train), "test": len(test)}
    _record(cfg, "sample", outs, info)
    log.info("sample: %d samples (%d train / %d test)", len(ds), len(train), len(test))


def _train_features(cfg: RunConfig, train: sampling.LabeledDataset) -> list[str]:
    if cfg.drop_k <= 0:
        return train.feature_names
    imp = read_importance(_require(cfg.out("importance.tsv"), "importance"))
    names = train.feature_names
    missing = [n for n in names if n not in imp]
    if missing:
        raise ConfigError(f"importance table lacks features {missing}")
    dropped = forest.least_important(names, [imp[n] for n in names], cfg.drop_k)
    log.info("dropping least important layers: %s", dropped)
    return [n for n in names if feature_layer(n) not in dropped]


def cmd_train(cfg: RunConfig, use_tuned: bool = False) -> forest.RandomForest:
    train = _read_dataset(_require(cfg.out("train.tsv"), "sample"), cfg)
    params = cfg.params
    if use_tuned:
        with open(_require(cfg.out("tuned_params.json"), "tune")) as f:
            params = forest.Hyperparams(**json.load(f))
    keep = _train_features(cfg, train)
    train = train.select_features(keep)
    f = forest.fit_forest(train, params, sampling.mix_seed(cfg.seed, 5), cfg.threads)
    path = cfg.out("forest.bin")
    _write(path, forest.serialize_forest(f))
    oob = forest.oob_score(f, train)
    _record(cfg, "train", [path], {"params": asdict(params), "features": keep,
                                   "dropped_k": cfg.drop_k, "oob_accuracy": oob})
    log.info("train: %d trees on %d features, OOB accuracy %.3f", len(f.trees), len(keep), oob)
    return f


def cmd_tune(cfg: RunConfig) -> forest.Hyperparams:
    train = _read_dataset(_require(cfg.out("train.tsv"), "sample"), cfg)
    train = train.select_features(_train_features(cfg, train))
    best, rows = forest.grid_search(train, cfg.tuning_grid, cfg.folds,
                                    sampling.mix_seed(cfg.seed, 6), cfg.params, cfg.threads)
    outs = [
        _write(cfg.out("scores.tsv"), forest.write_score_table(rows, cfg.delimiter)),
        _write(cfg.out("tuned_params.json"), json.dumps(asdict(best), indent=1) + "\n"),
    ]
    _record(cfg, "tune", outs, {"best": asdict(best)})
    return best


def _load_forest(cfg: RunConfig) -> forest.RandomForest:
    return forest.load_forest(_require(cfg.out("forest.bin"), "train"))


def cmd_evaluate(cfg: RunConfig) -> metrics.Report:
    f = _load_forest(cfg)
    test = _read_dataset(_require(cfg.out("test.tsv"), "sample"), cfg)
    test = test.select_features(f.feature_names)
    scores = forest.predict_proba_batch(f, test.X, cfg.threads)
    report = metrics.evaluate(test.y, scores, cfg.threshold)
    curve = metrics.roc_curve(test.y, scores)
    roc = "fpr\ttpr\tthreshold\n".replace("\t", cfg.delimiter) + "".join(
        cfg.delimiter.join(repr(v) for v in pt) + "\n" for pt in curve.points())
    outs = [
        _write(cfg.out("metrics.json"), report.to_json() + "\n"),
        _write(cfg.out("metrics.tsv"), report.to_text(cfg.delimiter)),
        _write(cfg.out("roc.tsv"), roc),
    ]
    _record(cfg, "evaluate", outs)
    log.info("evaluate: precision %s recall %s f1 %s auc %s", report.precision, report.recall,
             report.f1, report.auc)
    return report


def read_importance(path: str) -> dict[str, float]:
    with open(path) as f:
        lines = f.read().splitlines()
    delim = "\t" if "\t" in lines[0] else ","
    header = lines[0].split(delim)
    col = header.index("mdi")
    return {ln.split(delim)[0]: float(ln.split(delim)[col]) for ln in lines[1:] if ln}


def cmd_importance(cfg: RunConfig) -> dict:
    f = _load_forest(cfg)
    test = _read_dataset(_require(cfg.out("test.tsv"), "sample"), cfg)
    test = test.select_features(f.feature_names)
    mdi = forest.importance_mdi(f)
    perm = forest.importance_permutation(f, test, cfg.permutation_repeats,
                                         sampling.mix_seed(cfg.seed, 7), cfg.threshold)
    rows = ["feature\tlayer\tmdi\tpermutation"]
    for name, a, b in zip(f.feature_names, mdi, perm):
        rows.append(f"{name}\t{feature_layer(name)}\t{float(a)!r}\t{float(b)!r}")
    by_layer = forest.group_importance(f.feature_names, mdi)
    layer_rows = ["layer\tmdi"] + [f"{k}\t{float(v)!r}" for k, v in
                                   sorted(by_layer.items(), key=lambda kv: -kv[1])]
    outs = [_write(cfg.out("importance.tsv"), "\n".join(rows) + "\n"),
            _write(cfg.out("importance_layers.tsv"), "\n".join(layer_rows) + "\n")]
    _record(cfg, "importance", outs)
    return by_layer


def _map_name(kind: str, year: int, month: int, ext: str) -> str:
    return os.path.join("maps", f"{kind}_{year}_{month:02d}.{ext}")


def cmd_predict(cfg: RunConfig) -> list[analysis.HabitatMap]:
    f = _load_forest(cfg)
    layers = []
    for n in f.feature_names:
        if feature_layer(n) not in layers:
            layers.append(feature_layer(n))
    stacks = load_stacks(cfg, only=layers)
    maps, outs = [], []
    for (year, month), st in stacks.items():
        m = analysis.predict_map(f, st, cfg.threshold, cfg.threads)
        maps.append(m)
        for kind, grid in (("probability", m.probability), ("binary", m.binary)):
            p = cfg.out(_map_name(kind, year, month, "asc"))
            os.makedirs(os.path.dirname(p), exist_ok=True)
            save_ascii_grid(grid, p)
            outs.append(p)
            outs.append(_write(cfg.out(_map_name(kind, year, month, "ppm")),
                               analysis.render_map_image(m, kind)))
    _record(cfg, "predict", outs, {"maps": len(maps), "threshold": cfg.threshold})
    return maps


def cmd_analyze(cfg: RunConfig) -> analysis.HabitatSeries:
    entries = load_manifest(cfg.layers)
    keys = sorted({(int(e["year"]), int(e["month"])) for e in entries if e["year"] is not None})
    maps = []
    for year, month in keys:
        prob = read_ascii_grid(_require(cfg.out(_map_name("probability", year, month, "asc")),
                                        "predict"))
        maps.append(analysis.binarize(prob, cfg.threshold, year, month))
    zones = read_polygons(cfg.zones, ZONE) if cfg.zones else None
    series = analysis.monthly_series(maps, zones)
    outs = [_write(cfg.out("series.csv"), analysis.write_series(series))]
    baseline = cfg.baseline_year if cfg.baseline_year is not None else keys[0][0]
    outs.append(_write(cfg.out("percent_change.csv"),
                       analysis.write_percent_change(series, baseline)))
    _record(cfg, "analyze", outs, {"baseline_year": baseline})
    return series


STAGES = ("sample", "train", "tune", "evaluate", "importance", "predict", "analyze")


def cmd_run(cfg: RunConfig) -> None:
    """sample, train, evaluate, importance, predict, analyze in order.

    With drop_k > 0 the full-feature model is trained first to rank layers,
    then retrained without the k least important before evaluation; the
    importance table keeps the full-feature ranking.
    """
    cmd_sample(cfg)
    if cfg.drop_k > 0:
        k, cfg.drop_k = cfg.drop_k, 0
        cmd_train(cfg)
        cmd_importance(cfg)
        cfg.drop_k = k
    cmd_train(cfg)
    cmd_evaluate(cfg)
    if cfg.drop_k <= 0:
        cmd_importance(cfg)
    cmd_predict(cfg)
    cmd_analyze(cfg)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="habitat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic fixture")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--years", type=int, nargs="+")
    s.add_argument("--occurrences", type=int, dest="n_occurrences")

    for name in (*STAGES, "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--drop-k", type=int, dest="drop_k")
        sp.add_argument("--delimiter")
        if name == "train":
            sp.add_argument("--use-tuned", action="store_true")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HABITAT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "synth":
            extra = {k: v for k, v in (("years", args.years),
                                       ("n_occurrences", args.n_occurrences)) if v}
            paths = cmd_synth(args.out_dir, args.seed, **extra)
            print(json.dumps(paths, indent=1))
            return 0
        delim = args.delimiter
        if delim is not None:
            delim = "\t" if delim in ("\\t", "tab") else delim
        cfg = load_config(args.config, {"threads": args.threads, "seed": args.seed,
                                        "threshold": args.threshold, "drop_k": args.drop_k,
                                        "delimiter": delim})
        if cfg.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "train":
            cmd_train(cfg, use_tuned=args.use_tuned)
        else:
            globals()[f"cmd_{args.command}"](cfg)
    except (ValueError, OSError, KeyError) as exc:
        print(f"habitat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
