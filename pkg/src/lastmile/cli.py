"""Command-line front end.

A corpus is a directory with one sub-directory per city, each holding
``tessellation.json``, ``vocab.txt``, ``features.csv`` and
``deliveries.csv`` (plus ``truth.csv`` for synthetic cities). Commands read
a corpus and write new files under ``--out``; they never touch their inputs.

Values come from built-in defaults, then ``--config`` (a JSON object keyed
by option name), then explicit flags, the later winning. Stochastic
commands refuse to run without a seed.

Exit codes: 0 success, 1 invalid input or configuration, 2 internal failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import cluster as clus
from . import embed as emb
from . import evaluation as ev
from .errors import ConfigError, ValidationError
from .geo import GeoPoint, Tessellation
from .ingest import (build_feature_matrix, load_deliveries_csv, load_tagged_geojson, read_feature_matrix_csv,
                     write_deliveries_csv, write_feature_matrix_csv)
from .synth import synth_city, write_truth_csv
from .vocab import default_vocab, load_vocab, write_vocab

log = logging.getLogger("lastmile")

DEFAULTS = {
    "synth": {"cells": 400, "deliveries": 20000, "context_effect": 1.0, "city_id": "synth",
              "lat": 42.3601, "lon": -71.0589, "edge_m": 174.4},
    "ingest": {"vocab": "754", "edge_m": 174.4},
    "embed": {"epochs": 150, "lr": 1e-2, "batch": 32, "radius": 3, "channels": 16, "hidden": 128,
              "embed_dim": 50},
    "cluster": {"k": 4, "linkage": "ward", "stat": "median"},
    "fit": {"model": "lss_geo", "scheme": "city_specific", "features": "embedding"},
    "eval": {"model": "all", "scheme": "city_specific", "features": "embedding", "folds": 5, "leaky_kring": False},
    "map": {"thresholds": [150.0, 300.0, 600.0]},
}
STOCHASTIC = {"synth", "embed", "fit", "eval"}
MODEL_FLAGS = ("n_trees", "learning_rate", "max_depth", "min_child_weight", "lambda_reg",
               "n_bins", "min_cal", "cal_fraction", "early_stopping_rounds")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lastmile", description="Service-time distributions from urban context.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", type=Path, help="JSON file of option values (flags override)")
        sp.add_argument("--seed", type=int, help="random seed (required for stochastic commands)")
        sp.add_argument("--out", type=Path, help="output directory")
        return sp

    def corpus_args(sp, city=True):
        sp.add_argument("--corpus", type=Path, help="corpus directory")
        if city:
            sp.add_argument("--city", help="target city id")

    sp = command("synth", "generate a synthetic city with planted archetypes")
    sp.add_argument("--cells", type=int)
    sp.add_argument("--deliveries", type=int)
    sp.add_argument("--context-effect", dest="context_effect", type=float)
    sp.add_argument("--city-id", dest="city_id")
    sp.add_argument("--lat", type=float)
    sp.add_argument("--lon", type=float)
    sp.add_argument("--edge-m", dest="edge_m", type=float)

    sp = command("ingest", "count OSM tags per hexagon and validate delivery records")
    sp.add_argument("--geojson", type=Path)
    sp.add_argument("--deliveries", type=Path)
    sp.add_argument("--city-id", dest="city_id")
    sp.add_argument("--lat", type=float, help="origin latitude of the city grid")
    sp.add_argument("--lon", type=float, help="origin longitude of the city grid")
    sp.add_argument("--edge-m", dest="edge_m", type=float)
    sp.add_argument("--vocab", help="681, 754 or a vocabulary file")

    sp = command("embed", "train the region encoder on every corpus city and export embeddings")
    corpus_args(sp, city=False)
    for flag, typ in (("epochs", int), ("lr", float), ("batch", int), ("radius", int),
                      ("channels", int), ("hidden", int), ("embed-dim", int)):
        sp.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ)

    sp = command("cluster", "cluster a city's embeddings and rank clusters by service time")
    corpus_args(sp)
    sp.add_argument("--embeddings", type=Path, help="output directory of the embed command")
    sp.add_argument("--k", type=int)
    sp.add_argument("--linkage", choices=clus.LINKAGES)
    sp.add_argument("--stat", choices=("median", "mean"))

    for name, help_text in (("fit", "train one model on the scheme's training cities"),
                            ("eval", "hexagon-level cross-validation of one or all models")):
        sp = command(name, help_text)
        corpus_args(sp)
        sp.add_argument("--embeddings", type=Path)
        models = ev.MODEL_KINDS + (("all",) if name == "eval" else ())
        sp.add_argument("--model", choices=models)
        sp.add_argument("--scheme", choices=ev.SCHEMES)
        sp.add_argument("--features", choices=ev.FEATURE_KINDS)
        for flag in MODEL_FLAGS:
            typ = int if flag in ("n_trees", "max_depth", "n_bins", "min_cal", "early_stopping_rounds") else float
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
        if name == "eval":
            sp.add_argument("--folds", type=int)
            sp.add_argument("--leaky-kring", dest="leaky_kring", action="store_const", const=True,
                            help="let the k-ring baseline pool test deliveries")

    sp = command("map", "exceedance probabilities per hexagon as GeoJSON")
    corpus_args(sp)
    sp.add_argument("--embeddings", type=Path)
    sp.add_argument("--model-file", dest="model_file", type=Path, help="model.json from the fit command")
    sp.add_argument("--thresholds", type=float, nargs="+")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    opts = dict(DEFAULTS.get(args.command, {}))
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        known = set(vars(args)) - {"command", "config"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown options {unknown}")
        opts.update(cfg)
    opts.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    if opts.get("out") is None:
        raise ConfigError("--out is required")
    if args.command in STOCHASTIC and opts.get("seed") is None:
        raise ConfigError(f"{args.command} is stochastic: pass --seed or set seed in the config")
    for key in ("corpus", "embeddings", "geojson", "model_file", "out"):
        if key in opts and opts[key] is not None:
            opts[key] = Path(opts[key]).resolve()
    if args.command == "ingest" and isinstance(opts.get("deliveries"), str):
        opts["deliveries"] = Path(opts["deliveries"]).resolve()
    return opts


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- corpus files -------------------------------------------------------------

def write_tessellation(tess: Tessellation, path: Path) -> None:
    doc = {"city_id": tess.city_id, "origin_lat": tess.origin.lat, "origin_lon": tess.origin.lon,
           "edge_m": tess.edge_m}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_tessellation(path: Path) -> Tessellation:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        return Tessellation(d["city_id"], GeoPoint(d["origin_lat"], d["origin_lon"]), float(d["edge_m"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed tessellation file ({exc})") from None


def load_city(city_dir: Path, embeddings_dir: Path | None = None) -> ev.CityData:
    tess = read_tessellation(city_dir / "tessellation.json")
    vocab = load_vocab(city_dir / "vocab.txt")
    features = read_feature_matrix_csv(city_dir / "features.csv", tess, vocab)
    deliveries = load_deliveries_csv(city_dir / "deliveries.csv", tess)
    embeddings = None
    if embeddings_dir is not None:
        path = embeddings_dir / tess.city_id / "embeddings.csv"
        if not path.exists():
            raise ConfigError(f"no embeddings for city {tess.city_id!r} at {path}")
        embeddings = emb.read_embeddings_csv(path, tess)
    return ev.CityData(tess.city_id, tess, features, deliveries, embeddings)


def load_corpus(root: Path, embeddings_dir: Path | None = None) -> dict[str, ev.CityData]:
    if root is None or not root.is_dir():
        raise ConfigError(f"corpus directory {root} does not exist")
    dirs = sorted(d for d in root.iterdir() if (d / "tessellation.json").exists())
    if not dirs:
        raise ConfigError(f"{root} holds no city directories")
    corpus = {}
    for d in dirs:
        city = load_city(d, embeddings_dir)
        corpus[city.city_id] = city
    return corpus


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _experiment_config(opts: dict) -> ev.ExperimentConfig:
    kw = {k: opts[k] for k in MODEL_FLAGS if opts.get(k) is not None}
    if "folds" in opts:
        kw["k"] = opts["folds"]
    if opts.get("leaky_kring"):
        kw["leaky_kring"] = True
    return ev.ExperimentConfig(seed=opts["seed"], **kw)


# -- commands -----------------------------------------------------------------

def cmd_synth(o: dict) -> None:
    m, deliveries, truth = synth_city(o["seed"], o["cells"], o["deliveries"], o["context_effect"],
                                      city_id=o["city_id"], origin=GeoPoint(o["lat"], o["lon"]),
                                      edge_m=o["edge_m"])
    out = o["out"] / o["city_id"]
    out.mkdir(parents=True, exist_ok=True)
    write_tessellation(m.tess, out / "tessellation.json")
    write_vocab(m.vocab, out / "vocab.txt")
    write_feature_matrix_csv(m, out / "features.csv")
    write_deliveries_csv(deliveries, out / "deliveries.csv")
    write_truth_csv(truth, out / "truth.csv")
    log.info("wrote %d cells and %d deliveries to %s", len(m.cells), len(deliveries), out)


def cmd_ingest(o: dict) -> None:
    _need(o, "geojson", "deliveries", "city_id", "lat", "lon")
    tess = Tessellation(o["city_id"], GeoPoint(o["lat"], o["lon"]), o["edge_m"])
    vocab = default_vocab(int(o["vocab"])) if str(o["vocab"]) in ("681", "754") else load_vocab(o["vocab"])
    deliveries = load_deliveries_csv(o["deliveries"], tess)
    m = build_feature_matrix(load_tagged_geojson(o["geojson"]), tess, vocab)
    out = o["out"] / o["city_id"]
    out.mkdir(parents=True, exist_ok=True)
    write_tessellation(tess, out / "tessellation.json")
    write_vocab(vocab, out / "vocab.txt")
    write_feature_matrix_csv(m, out / "features.csv")
    write_deliveries_csv(deliveries, out / "deliveries.csv")
    _write_json(m.drop_report, out / "drop_report.json")
    log.info("%d cells with tags, %d deliveries, %d distinct dropped tags", len(m.cells), len(deliveries),
             len(m.drop_report))


def cmd_embed(o: dict) -> None:
    _need(o, "corpus")
    corpus = load_corpus(o["corpus"])
    config = emb.EmbedConfig(o["radius"], o["channels"], o["hidden"], o["embed_dim"])
    cities = [corpus[c] for c in sorted(corpus)]
    params, curve, _ = emb.fit_embeddings([c.features for c in cities], config, o["epochs"], o["lr"],
                                          o["batch"], o["seed"])
    o["out"].mkdir(parents=True, exist_ok=True)
    emb.save_params(params, o["out"] / "encoder.json")
    (o["out"] / "loss_curve.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)), encoding="utf-8")
    for c in cities:
        # embed delivery cells too, even where no tags were mapped
        cells = sorted(set(c.features.cells) | {d.cell for d in c.deliveries})
        e = emb.embed_matrix(params, c.features, cells)
        (o["out"] / c.city_id).mkdir(exist_ok=True)
        emb.write_embeddings_csv(e, o["out"] / c.city_id / "embeddings.csv")
    log.info("trained on %d cities; loss %.4f -> %.4f", len(cities), curve[0], curve[-1])


def _target(o: dict, corpus: dict) -> str:
    if o.get("city") is None:
        if len(corpus) != 1:
            raise ConfigError(f"--city is required with a multi-city corpus ({sorted(corpus)})")
        return next(iter(corpus))
    if o["city"] not in corpus:
        raise ConfigError(f"city {o['city']!r} not in corpus {sorted(corpus)}")
    return o["city"]


def cmd_cluster(o: dict) -> None:
    _need(o, "corpus", "embeddings")
    corpus = load_corpus(o["corpus"], o["embeddings"])
    city = corpus[_target(o, corpus)]
    e = city.embeddings
    a = clus.agglomerate(e.vectors, o["k"], o["linkage"], e.cells)
    a = clus.order_by_service_time(a, city.deliveries, o["stat"])
    # summaries cover only cells present in the feature matrix
    tagged = [i for i, c in enumerate(a.cells) if city.features.row(c) is not None]
    sub = clus.ClusterAssignment([a.cells[i] for i in tagged], a.labels[tagged], a.k, a.ordering_stat)
    o["out"].mkdir(parents=True, exist_ok=True)
    clus.write_assignment_csv(a, o["out"] / "assignments.csv")
    clus.write_summary_json(clus.cluster_summary(sub, city.features), o["out"] / "summary.json")


def cmd_fit(o: dict) -> None:
    _need(o, "corpus")
    corpus = load_corpus(o["corpus"], o.get("embeddings"))
    target = _target(o, corpus)
    scheme = ev.SchemeSpec.for_corpus(o["scheme"], target, list(corpus))
    train = [d for cid in scheme.source_cities for d in corpus[cid].deliveries]
    model = ev.fit_model(o["model"], corpus, train, target, o["features"], _experiment_config(o), o["seed"])
    o["out"].mkdir(parents=True, exist_ok=True)
    _write_json(model.to_dict(), o["out"] / "model.json")


def cmd_eval(o: dict) -> None:
    _need(o, "corpus")
    corpus = load_corpus(o["corpus"], o.get("embeddings"))
    target = _target(o, corpus)
    scheme = ev.SchemeSpec.for_corpus(o["scheme"], target, list(corpus))
    kinds = ev.MODEL_KINDS if o["model"] == "all" else (o["model"],)
    config = _experiment_config(o)
    reports = [ev.run_experiment(corpus, scheme, k, o["features"], config) for k in kinds]
    o["out"].mkdir(parents=True, exist_ok=True)
    for r in reports:
        ev.write_fold_csv(r, o["out"] / f"folds_{r.model}.csv")
    ev.write_report_json(reports, o["out"] / "report.json")
    (o["out"] / "table.txt").write_text(ev.format_table(reports), encoding="utf-8")


def cmd_map(o: dict) -> None:
    _need(o, "corpus", "model_file")
    model = ev.FittedModel.from_dict(json.loads(o["model_file"].read_text(encoding="utf-8")))
    corpus = load_corpus(o["corpus"], o.get("embeddings"))
    city = corpus[_target(o, corpus)]
    cells = sorted(set(city.features.cells) | {d.cell for d in city.deliveries})
    probs = ev.exceedance_map(model, cells, [float(t) for t in o["thresholds"]], corpus)
    o["out"].mkdir(parents=True, exist_ok=True)
    ev.write_geojson(ev.exceedance_geojson(probs), o["out"] / "exceedance.geojson")


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "embed": cmd_embed, "cluster": cmd_cluster,
            "fit": cmd_fit, "eval": cmd_eval, "map": cmd_map}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        opts = resolve(args)
        COMMANDS[args.command](opts)
    except (ValidationError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
