"""Command-line front end.

Exit codes: 0 success, 1 unexpected error, 2 usage, 3 missing input file,
4 schema or config violation, 5 dimension mismatch, 6 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import diff as D
from .evaluate import (
    ClimatologyBaseline,
    evaluate_gaussian,
    slot_rows_csv,
    slotwise_report,
    sparsify,
)
from .graph import NetworkError, load_network, save_network
from .synthgen import GroundTruth, Scenario, generate_scenario, oracle_metrics
from .train import (
    TrainConfig,
    TrainedModel,
    compile_trips,
    export_representations,
    fit,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)
from .trips import (
    MAX_LINKS,
    MIN_LINKS,
    DimensionError,
    TripError,
    assign_slot,
    filter_trips,
    load_trips,
    save_trips,
    split_trips,
)

log = logging.getLogger("sptte")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_DIMENSION, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What a command was run with; its digest is embedded in checkpoints and reports."""

    command: str
    config: dict
    seed: int
    threads: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        doc = {**self.to_dict(), "digest": self.digest()}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _json_dump(doc, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(_require(path, "config file").read_text())
    if not isinstance(doc, dict):
        raise TripError("config file must hold a JSON object")
    return doc


def _dataclass_from(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise TripError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**doc)


def _data_paths(data: Path) -> dict[str, Path]:
    return {k: data / f for k, f in (("links", "links.csv"), ("edges", "edges.csv"), ("train", "train.csv"),
                                     ("val", "val.csv"), ("test", "test.csv"), ("gt", "ground_truth.json"))}


def _load_net(args, manifest: RunManifest):
    paths = _data_paths(Path(args.data)) if getattr(args, "data", None) else {}
    links = _require(args.network or paths.get("links"), "network links file")
    edges = args.edges or paths.get("edges")
    if links.suffix.lower() != ".json":
        edges = _require(edges, "network edges file")
        manifest.add_input(edges)
    manifest.add_input(links)
    return load_network(links, edges)


def _load_model(path, manifest: RunManifest) -> TrainedModel:
    p = _require(path, "model checkpoint")
    manifest.add_input(p)
    model, _ = load_checkpoint(p)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, manifest: RunManifest) -> None:
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    scenario = _dataclass_from(Scenario, doc)
    manifest.config = asdict(scenario)
    manifest.seed = scenario.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_scenario(scenario)
    paths = _data_paths(out)
    save_network(ds.network, paths["links"], paths["edges"])
    train, val, test = split_trips(ds.trips, scenario.seed)
    save_trips(ds.trips, out / "trips.csv")
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_trips(part, paths[name])
    ds.ground_truth.save(paths["gt"])
    oracle = oracle_metrics(ds.ground_truth, test)
    _json_dump({"oracle_test": oracle.to_dict(), "manifest_digest": manifest.digest()}, out / "oracle.json")
    manifest.outputs = sorted(str(p) for p in [*paths.values(), out / "trips.csv", out / "oracle.json"])
    manifest.write(out / "manifest.json")
    print(f"wrote {len(ds.trips)} trips over {ds.network.num_links} links to {out}")


def cmd_train(args, manifest: RunManifest) -> None:
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    cfg = _dataclass_from(TrainConfig, doc)
    manifest.config = {**cfg.to_dict(), "min_links": args.min_links, "max_links": args.max_links}
    manifest.seed = cfg.seed
    net = _load_net(args, manifest)
    paths = _data_paths(Path(args.data)) if args.data else {}
    train_path = _require(args.train or paths.get("train"), "training trips")
    manifest.add_input(train_path)
    train = filter_trips(load_trips(train_path), args.min_links, args.max_links)
    if not train:
        raise TripError(f"no training trips with {args.min_links} to {args.max_links} links")
    val = []
    val_path = args.val or (paths["val"] if paths and paths["val"].exists() else None)
    if val_path is not None:
        manifest.add_input(_require(val_path, "validation trips"))
        val = filter_trips(load_trips(val_path), args.min_links, args.max_links)
    out = Path(args.out)
    manifest.outputs = [str(out)]
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    manifest.outputs.append(str(log_path))

    lines = []

    def on_epoch(rec):
        lines.append(json.dumps(rec.to_dict(), sort_keys=True))
        log.info("epoch %d train_nll %.4f val_nll %.4f val_mape %.4f (%.1fs)", rec.epoch, rec.train_nll,
                 rec.val_nll, rec.val_mape, rec.wall_s)

    res = fit(train, val, net, cfg, callback=on_epoch)
    # wall-clock time is the one non-reproducible field; it stays in the log only
    meta = {"manifest": manifest.to_dict(), "manifest_digest": manifest.digest(), "best_epoch": res.best_epoch,
            "init_val_nll": res.init_val_nll, "diverged": res.diverged, "messages": res.messages}
    save_checkpoint(res.model, out, meta)
    log_path.write_text("".join(line + "\n" for line in lines))
    manifest.write(out.with_suffix(".manifest.json"))
    if args.plot:
        from .plotting import plot_history

        plot_history([json.loads(line) for line in lines], args.plot)
    for m in res.messages:
        print(m, file=sys.stderr)
    print(f"best epoch {res.best_epoch}; checkpoint {out}")
    if res.diverged and res.best_epoch == 0:
        raise NumericalError("training diverged before completing an epoch")


def _write_predictions(trips, tg, out: Path, cov_path: str | None) -> None:
    with open(out, "w") as fh:
        for i, t in enumerate(trips):
            rec = {"trip_id": t.trip_id if t.trip_id is not None else i, "mean_s": float(tg.mean[i]),
                   "std_s": float(math.sqrt(tg.variance[i]))}
            fh.write(json.dumps(rec) + "\n")
    if cov_path:
        np.save(cov_path, tg.covariance)


def cmd_predict(args, manifest: RunManifest) -> None:
    model = _load_model(args.model, manifest)
    q = _require(args.queries, "query trips")
    manifest.add_input(q)
    manifest.config = {"interpolate": args.interpolate, "joint": bool(args.cov)}
    trips = load_trips(q, require_time=False)
    tg = model.predict(trips, interpolate=args.interpolate, include_cross=bool(args.cov))
    _write_predictions(trips, tg, Path(args.out), args.cov)
    manifest.outputs = [args.out] + ([args.cov] if args.cov else [])
    manifest.write(Path(args.out).with_suffix(".manifest.json"))
    print(f"wrote {len(trips)} predictions to {args.out}")


def cmd_interpolate(args, manifest: RunManifest) -> None:
    if not 0.0 <= args.fraction <= 1.0:
        raise UsageError("--fraction must lie in [0, 1]")
    model = _load_model(args.model, manifest)
    q = _require(args.queries, "query trips")
    manifest.add_input(q)
    manifest.config = {"slot": args.slot, "fraction": args.fraction, "joint": bool(args.cov)}
    trips = load_trips(q, require_time=False)
    tg = model.predict_at(trips, args.slot + args.fraction, include_cross=bool(args.cov))
    _write_predictions(trips, tg, Path(args.out), args.cov)
    manifest.outputs = [args.out] + ([args.cov] if args.cov else [])
    manifest.write(Path(args.out).with_suffix(".manifest.json"))
    print(f"wrote {len(trips)} predictions at slot position {args.slot + args.fraction} to {args.out}")


def _load_predictions(path: Path, trips) -> tuple[np.ndarray, np.ndarray]:
    recs = {}
    for line in path.read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            recs[int(r["trip_id"])] = (float(r["mean_s"]), float(r.get("std_s", 0.0)))
    try:
        pairs = [recs[int(t.trip_id)] for t in trips]
    except KeyError as exc:
        raise TripError(f"no prediction for trip {exc.args[0]}") from None
    mean, std = (np.array(x) for x in zip(*pairs))
    return mean, std


def cmd_eval(args, manifest: RunManifest) -> None:
    trips_path = _require(args.trips, "evaluation trips")
    manifest.add_input(trips_path)
    trips = load_trips(trips_path)
    obs = np.array([t.total_time for t in trips])
    scale, slot_cfg, model = None, None, None
    if args.predictions:
        p = _require(args.predictions, "predictions file")
        manifest.add_input(p)
        mean, std = _load_predictions(p, trips)
    else:
        model = _load_model(args.model, manifest)
        tg = model.predict(trips, interpolate=args.interpolate)
        mean, std = tg.mean, tg.std
        scale, slot_cfg = model.transform.scale, model.slot_cfg
    manifest.config = {"interpolate": args.interpolate, "sample_seed": args.sample_seed}
    report = evaluate_gaussian(mean, std, obs, scale, args.sample_seed)
    doc = {"report": report.to_dict(), "manifest_digest": manifest.digest()}
    if model is not None and args.baseline:
        base_path = _require(args.baseline, "baseline training trips")
        manifest.add_input(base_path)
        base = ClimatologyBaseline.fit(load_trips(base_path), model.network.lengths, model.slot_cfg)
        bm, bs = base.predict(trips, model.network.lengths)
        doc["climatology"] = evaluate_gaussian(bm, bs, obs).to_dict()
        doc["manifest_digest"] = manifest.digest()
    out = Path(args.out)
    _json_dump(doc, out)
    outputs = [str(out)]
    if slot_cfg is None:
        from .trips import SlotConfig

        slot_cfg = SlotConfig()
    rows = slotwise_report(mean, std, obs, [assign_slot(t.depart_ts, slot_cfg) for t in trips],
                           slot_cfg.slots_per_day, scale)
    if args.slots:
        Path(args.slots).write_text(slot_rows_csv(rows))
        outputs.append(args.slots)
    if args.plot:
        from .plotting import plot_slotwise

        plot_slotwise(rows, args.plot, slot_cfg.slot_seconds)
        outputs.append(args.plot)
    manifest.outputs = outputs
    manifest.write(out.with_suffix(".manifest.json"))
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_sparsify(args, manifest: RunManifest) -> None:
    data = Path(args.data)
    paths = _data_paths(data)
    net = _load_net(argparse.Namespace(data=args.data, network=None, edges=None), manifest)
    for k in ("train", "test"):
        manifest.add_input(_require(paths[k], f"{k} trips"))
    seed = args.seed if args.seed is not None else 0
    manifest.seed = seed
    manifest.config = {"temporal_keep": args.temporal_keep, "spatial_knockout": args.spatial_knockout}
    train, test = load_trips(paths["train"]), load_trips(paths["test"])
    kept, test, knocked = sparsify(train, test, args.temporal_keep, args.spatial_knockout, seed, net.num_links)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    new = _data_paths(out)
    save_trips(kept, new["train"])
    copied = []
    for k in ("links", "edges", "test", "gt"):
        if paths[k].exists() and paths[k].resolve() != new[k].resolve():
            shutil.copyfile(paths[k], new[k])
            copied.append(str(new[k]))
    if paths["val"].exists():
        val = load_trips(paths["val"])
        val_kept, _, _ = sparsify(val, [], args.temporal_keep, args.spatial_knockout, seed, net.num_links)
        save_trips(val_kept, new["val"])
        copied.append(str(new["val"]))
    _json_dump({"knocked_links": knocked.tolist(), "train_before": len(train), "train_after": len(kept),
                "manifest_digest": manifest.digest()}, out / "sparsify.json")
    manifest.outputs = sorted([str(new["train"]), str(out / "sparsify.json"), *copied])
    manifest.write(out / "manifest.json")
    print(f"kept {len(kept)} of {len(train)} training trips; knocked out {knocked.size} links")


def cmd_check_grad(args, manifest: RunManifest) -> None:
    seed = args.seed if args.seed is not None else 0
    manifest.seed = seed
    manifest.config = {"num_links": args.links, "tolerance": args.tolerance}
    ds = generate_scenario(Scenario(num_links=args.links, num_trips=400, days=1, min_trip_links=3,
                                    max_trip_links=8, seed=seed))
    cfg = TrainConfig(r_h=3, r_e=3, gru_hidden=4, eta=3, k_aug=3, seed=seed)
    model = TrainedModel.initial(ds.trips, ds.network, cfg, ds.n_slots)
    compiled = compile_trips(ds.trips, cfg.k_aug, cfg.slot_config(), ds.network.lengths, model.transform)
    counts: dict[int, int] = {}
    for s, _ in compiled:
        counts[s] = counts.get(s, 0) + 1
    slot = max(sorted(counts), key=lambda s: counts[s])
    blocks = [cb for s, cb in compiled if s == slot][:8]
    from .encoder import encode_slot

    rep = D.grad_check(lambda p: total_loss(encode_slot(p, model.context, slot), blocks, p, cfg)[0],
                       model.params, tolerance=args.tolerance, probe_names=("embed",), seed=seed)
    print("\n".join(rep.lines()))
    if not rep.passed:
        raise NumericalError(f"gradient check failed: max relative error {rep.max_rel_error:.3e}")


def cmd_export_reprs(args, manifest: RunManifest) -> None:
    model = _load_model(args.model, manifest)
    try:
        slots = [int(s) for s in args.slots.split(",") if s.strip()]
    except ValueError:
        raise UsageError("--slots must be a comma-separated list of integers") from None
    manifest.config = {"slots": slots}
    reps = export_representations(model, slots)
    with open(args.out, "wb") as fh:
        np.savez(fh, **reps)
    manifest.outputs = [args.out]
    manifest.write(Path(args.out).with_suffix(".manifest.json"))
    print(f"wrote {len(reps)} matrices to {args.out}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default 1, or $SPTTE_THREADS); 1 gives bitwise-reproducible runs")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sptte", description="Probabilistic trip travel-time estimation.")
    p.add_argument("--version", action="version", version=f"sptte {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic network, trips and ground truth")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    def data_args(sp):
        sp.add_argument("--data", help="directory with links.csv, edges.csv, train.csv, val.csv")
        sp.add_argument("--network", help="links CSV or network JSON")
        sp.add_argument("--edges", help="edges CSV")

    s = sub.add_parser("train", parents=[common], help="fit a model and write a checkpoint")
    data_args(s)
    s.add_argument("--train", help="training trips (CSV or JSONL)")
    s.add_argument("--val", help="validation trips")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--min-links", type=int, default=MIN_LINKS, help="shorter trips are rejected at ingestion")
    s.add_argument("--max-links", type=int, default=MAX_LINKS, help="longer trips are rejected at ingestion")
    s.add_argument("--out", required=True, help="checkpoint path (.zip)")
    s.add_argument("--log", help="training log path (JSON lines)")
    s.add_argument("--plot", help="training curve PNG")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="trip means and standard deviations")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", required=True, help="trips with departure times; total_time may be blank")
    s.add_argument("--out", required=True, help="JSON lines: trip_id, mean_s, std_s")
    s.add_argument("--interpolate", action="store_true", help="interpolate between slot states")
    s.add_argument("--cov", help="also write the joint covariance (.npy)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("interpolate", parents=[common], help="predict under the state between two slots")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--slot", type=int, required=True, help="chronological slot index i")
    s.add_argument("--fraction", type=float, required=True, help="position between slot i (0) and i+1 (1)")
    s.add_argument("--out", required=True)
    s.add_argument("--cov")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("eval", parents=[common], help="score a model or a predictions file")
    s.add_argument("--trips", required=True, help="trips with observed times")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--predictions", help="JSON lines from predict")
    s.add_argument("--interpolate", action="store_true")
    s.add_argument("--sample-seed", type=int, default=None, help="score seeded samples instead of the mean")
    s.add_argument("--baseline", help="training trips for the per-slot climatology baseline")
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--slots", help="per-slot CSV")
    s.add_argument("--plot", help="per-slot PNG")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sparsify", parents=[common], help="thin a dataset directory in time and space")
    s.add_argument("--data", required=True)
    s.add_argument("--temporal-keep", type=float, default=1.0)
    s.add_argument("--spatial-knockout", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("check-grad", parents=[common], help="finite-difference check of the full loss")
    s.add_argument("--links", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("export-reprs", parents=[common], help="dump smoothed branch representations")
    s.add_argument("--model", required=True)
    s.add_argument("--slots", required=True, help="comma-separated chronological slots")
    s.add_argument("--out", required=True, help=".npz path")
    s.set_defaults(func=cmd_export_reprs)
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SPTTE_THREADS")
    try:
        return int(env) if env else 1
    except ValueError:
        raise UsageError(f"SPTTE_THREADS must be an integer, got {env!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _threads(args)
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        manifest = RunManifest(args.command, {}, args.seed if args.seed is not None else 0, threads)
        with threadpool_limits(threads):
            args.func(args, manifest)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DimensionError, D.ShapeError) as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except (NumericalError, D.NonFiniteError, D.CholeskyError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TripError, NetworkError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
