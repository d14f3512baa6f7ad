"""fakepcd command line: simulate, train, attribute, explain, ablate, rerun.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attribution import (
    AttributionError,
    assign_ids,
    evaluate,
    load_anchor_set,
    mean_source_distance,
    save_anchor_set,
    select_threshold,
    tune_percentile,
)
from .config import ConfigError, Settings, load_settings
from .explain import (
    ExplainError,
    build_fingerprint,
    critical_depth_image,
    critical_points,
    match_similar,
    write_cells_csv,
    write_pgm,
)
from .nnet import CheckpointError, ModelError, NumericError, embed, encode, load_checkpoint, save_checkpoint
from .pipeline import (
    closed_stage,
    fit_anchors,
    fresh_model,
    open_model,
    open_stage,
    open_world_eval,
    perturbation_table,
    scenario_from,
    scenario_from_dir,
    threshold_curve,
)
from .pointcloud import PointCloud, PointCloudError, read_point_cloud
from .simsource import Scenario, SimulationError
from .store import RunManifest, StoreError, read_dataset_dir, read_run_manifest, write_dataset_dir, write_rows
from .train import TrainConfigError

log = logging.getLogger("fakepcd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
ABLATIONS = ("threshold-sweep", "dim-sweep", "pretrain", "perturb")
USAGE_ERRORS = (
    ConfigError,
    SimulationError,
    PointCloudError,
    CheckpointError,
    AttributionError,
    ExplainError,
    StoreError,
    TrainConfigError,
    ModelError,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


# --- shared plumbing ----------------------------------------------------------


def _thread_cap() -> Optional[int]:
    raw = os.environ.get("FAKEPCD_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"FAKEPCD_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"FAKEPCD_THREADS must be a positive integer, got {raw!r}")
    return value


def _settings(args) -> Settings:
    overrides: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_settings(Path(args.config) if args.config else None, overrides)



def _default_out(args) -> Path:
    defaults = {
        "simulate": "sim",
        "train": f"run-{getattr(args, 'stage', '')}",
        "attribute": "attribute",
        "explain": "explain",
        "ablate": f"ablate-{getattr(args, 'which', '')}",
    }
    return Path(defaults[args.command])


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else _default_out(args)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, settings: Settings, threads) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(args.recorded_argv),
        config=settings.to_text(),
        seeds={"seed": settings.seed},
        threads=threads,
    )


def _scenario_for(args, settings: Settings) -> Scenario:
    """Scenario from ``--data`` when given, else simulated from the config."""
    if getattr(args, "data", None):
        return scenario_from_dir(args.data, settings)
    return scenario_from(settings)


def _metrics_writer(rows: list):
    def on_epoch(m):
        rows.append((m.epoch, m.loss, m.accuracy))
        log.info("epoch %d loss %.5f accuracy %.4f", m.epoch, m.loss, m.accuracy)

    return on_epoch


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args, settings: Settings, manifest: RunManifest) -> int:
    out = _out_dir(args)
    scenario = scenario_from(settings)
    written = write_dataset_dir(scenario, out)
    (out / "scenario.cfg").write_text(settings.to_text(), encoding="utf-8")
    manifest.outputs += [str(p) for p in written] + [str(out / "scenario.cfg")]
    manifest.notes["counts"] = {s: len(getattr(scenario, s)) for s in ("train", "validation", "test")}
    print(f"wrote {len(written) - 1} clouds to {out}")
    return EXIT_OK


# --- train --------------------------------------------------------------------


def cmd_train(args, settings: Settings, manifest: RunManifest) -> int:
    out = _out_dir(args)
    stored = read_dataset_dir(Path(args.data))
    train = stored.split("train")
    manifest.inputs["data"] = str(Path(args.data).resolve())
    every = (settings.closed if args.stage == "closed" else settings.open).checkpoint_every
    rows: list = []
    log_epoch = _metrics_writer(rows)
    snapshots: List[str] = []

    if args.stage == "closed":
        if args.init_from:
            raise UsageError("--init-from applies to the open stage only")
        model = fresh_model(settings, len(stored.known))
        manifest.notes["init"] = "fresh"
    else:
        init = None
        if args.init_from:
            init = load_checkpoint(Path(args.init_from))
            manifest.inputs["init_from"] = str(Path(args.init_from).resolve())
        model = open_model(settings, init)
        manifest.notes["init"] = args.init_from and str(Path(args.init_from).resolve()) or "fresh"

    def on_epoch(m):
        log_epoch(m)
        if every and (m.epoch + 1) % every == 0:
            path = out / f"epoch_{m.epoch + 1:04d}.fpcd"
            save_checkpoint(model, path)
            snapshots.append(str(path))

    try:
        if args.stage == "closed":
            result = closed_stage(train, settings, model, on_epoch)
        else:
            result = open_stage(train, settings, model, on_epoch)
    finally:
        write_rows(out / "metrics.csv", ("epoch", "loss", "accuracy"), rows)
        manifest.outputs.append(str(out / "metrics.csv"))
    ckpt = out / "checkpoint.fpcd"
    save_checkpoint(result.model, ckpt)
    manifest.outputs += [str(ckpt)] + snapshots
    manifest.notes["epochs_run"] = len(result.metrics)
    manifest.notes["stopped_early"] = result.stopped_early
    manifest.notes["known_sources"] = stored.known
    last = result.metrics[-1]
    print(f"{args.stage} stage: {len(result.metrics)} epochs, loss {last.loss:.5f}, accuracy {last.accuracy:.4f}")
    return EXIT_OK


# --- attribute ----------------------------------------------------------------


def _load_inputs(paths: Sequence[str]) -> List[PointCloud]:
    return [read_point_cloud(Path(p)) for p in paths]


def _embed_clouds(model, clouds: Sequence[PointCloud]) -> np.ndarray:
    sizes = {len(c) for c in clouds}
    if len(sizes) == 1:
        return embed(model, np.stack([c.points for c in clouds]))
    return np.concatenate([embed(model, c.points[None]) for c in clouds])


def cmd_attribute(args, settings: Settings, manifest: RunManifest) -> int:
    out = _out_dir(args)
    if args.percentile is not None and not 0 < args.percentile <= 100:
        raise UsageError(f"--percentile must be in (0, 100], got {args.percentile}")
    model = load_checkpoint(Path(args.checkpoint))
    if not model.projection:
        raise UsageError(f"{args.checkpoint}: checkpoint has no projection head (train the open stage first)")
    manifest.inputs["checkpoint"] = str(Path(args.checkpoint).resolve())
    stored = read_dataset_dir(Path(args.data)) if args.data else None
    if stored is not None:
        manifest.inputs["data"] = str(Path(args.data).resolve())

    if args.anchors:
        anchors = load_anchor_set(Path(args.anchors))
        manifest.inputs["anchors"] = str(Path(args.anchors).resolve())
    elif args.build_anchors:
        if stored is None:
            raise UsageError("--build-anchors needs --data with a train split")
        s = replace(settings, attribution=replace(settings.attribution, anchors_per_source=args.build_anchors))
        anchors = fit_anchors(model, stored.split("train"), s, stored.known)
        save_anchor_set(anchors, out / "anchors.fpcd")
        manifest.outputs.append(str(out / "anchors.fpcd"))
    else:
        raise UsageError("give --anchors FILE or --build-anchors N")
    if anchors.dim != model.embed_dim:
        raise UsageError(f"anchor dimension {anchors.dim} does not match checkpoint embedding dimension {model.embed_dim}")

    if args.tune:
        if stored is None:
            raise UsageError("--tune needs --data with a validation split")
        val = stored.split("validation")
        p, curve = tune_percentile(anchors, embed(model, val.points), val.labels, settings.attribution.percentile_grid)
        write_rows(
            out / "tuning.csv",
            ("percentile", "known_accuracy", "unknown_accuracy"),
            [(pp, ev.known_accuracy, ev.unknown_accuracy) for pp, ev in curve],
        )
        manifest.outputs.append(str(out / "tuning.csv"))
        print(f"tuned percentile P={p:g}")
    elif args.percentile is not None:
        p = args.percentile
    elif settings.attribution.percentile is not None:
        p = settings.attribution.percentile
    else:
        raise UsageError("give --percentile P or --tune")
    policy = select_threshold(anchors, p)
    manifest.notes["percentile"] = p
    manifest.notes["threshold"] = policy.threshold

    truth = None
    if args.inputs:
        clouds = _load_inputs(args.inputs)
        ids = list(args.inputs)
        z = _embed_clouds(model, clouds)
        manifest.inputs["clouds"] = ",".join(str(Path(p).resolve()) for p in args.inputs)
    elif stored is not None:
        data = stored.split(args.split)
        ids = stored.paths[args.split]
        z = embed(model, data.points)
        truth = data.labels
    else:
        raise UsageError("nothing to attribute: give --inputs or --data")
    d = mean_source_distance(z, anchors)
    verdict = assign_ids(d, policy.threshold)
    names = list(anchors.names)
    header = ["query"] + [f"d_{n}" for n in names] + ["threshold", "verdict", "margin"]
    rows = []
    for qid, dist, v in zip(ids, d, verdict):
        rows.append([qid, *dist.tolist(), policy.threshold, "Unknown" if v < 0 else names[v], float(dist.min() - policy.threshold)])
    if truth is not None:
        header.append("truth")
        for row, t in zip(rows, truth):
            row.append("Unknown" if t < 0 else names[t])
    write_rows(out / "report.csv", header, rows)
    manifest.outputs.append(str(out / "report.csv"))
    if truth is not None:
        ev = evaluate(verdict, truth)
        summary = [(k, v) for k, v in ev.as_dict().items()]
        write_rows(out / "summary.csv", ("metric", "value"), summary)
        manifest.outputs.append(str(out / "summary.csv"))
        manifest.notes["evaluation"] = ev.as_dict()
        print(f"known accuracy {ev.known_accuracy}, unknown accuracy {ev.unknown_accuracy}")
    print(f"P={p:g} threshold={policy.threshold:.6f}; {len(rows)} clouds attributed")
    return EXIT_OK


# --- explain ------------------------------------------------------------------


def cmd_explain(args, settings: Settings, manifest: RunManifest) -> int:
    out = _out_dir(args)
    model = load_checkpoint(Path(args.checkpoint))
    manifest.inputs["checkpoint"] = str(Path(args.checkpoint).resolve())
    res = settings.explain.resolution
    stored = read_dataset_dir(Path(args.data)) if args.data else None
    if stored is not None:
        manifest.inputs["data"] = str(Path(args.data).resolve())

    if args.critical:
        if not args.inputs:
            raise UsageError("--critical needs --inputs")
        rows = []
        for path in args.inputs:
            cloud = read_point_cloud(Path(path))
            crit = critical_points(model, cloud)
            full = encode(model, cloud, heads=()).global_feature[0]
            sub = encode(model, crit.points, heads=()).global_feature[0]
            exact = bool(np.array_equal(full, sub))
            rows += [(path, int(i), exact) for i in crit.indices]
            stem = Path(path).stem
            write_pgm(critical_depth_image(model, cloud, settings.explain.plane, (res, res)), out / f"critical_{stem}.pgm")
            manifest.outputs.append(str(out / f"critical_{stem}.pgm"))
            print(f"{path}: {len(crit.indices)} critical points, subset re-encoding exact: {exact}")
        write_rows(out / "critical.csv", ("cloud", "index", "subset_exact"), rows)
        manifest.outputs.append(str(out / "critical.csv"))

    if args.fingerprint:
        if stored is None:
            raise UsageError("--fingerprint needs --data")
        data = stored.split(args.split)
        for source in sorted(set(data.sources)):
            clouds = [PointCloud(p) for p, s in zip(data.points, data.sources) if s == source]
            fp = build_fingerprint(
                model, clouds, args.fingerprint, (res, res), seed=settings.seed, source=source, plane=settings.explain.plane
            )
            write_pgm(fp.cells, out / f"fingerprint_{source}.pgm")
            write_cells_csv(fp.cells, out / f"fingerprint_{source}.csv")
            manifest.outputs += [str(out / f"fingerprint_{source}.pgm"), str(out / f"fingerprint_{source}.csv")]
        print(f"fingerprints for {len(set(data.sources))} sources written to {out}")

    if args.match:
        if not args.inputs or not args.candidates:
            raise UsageError("--match needs --inputs and --candidates")
        cands = _load_inputs(args.candidates)
        rows = []
        for path in args.inputs:
            idx, cd = match_similar(read_point_cloud(Path(path)), cands)
            rows.append((path, args.candidates[idx], idx, cd))
            print(f"{path}: nearest {args.candidates[idx]} (chamfer {cd:.6g})")
        write_rows(out / "match.csv", ("query", "match", "match_index", "chamfer"), rows)
        manifest.outputs.append(str(out / "match.csv"))

    if not (args.critical or args.fingerprint or args.match):
        raise UsageError("choose at least one of --critical, --fingerprint M, --match")
    return EXIT_OK


# --- ablate -------------------------------------------------------------------


def _render_curves(path: Path, series: Dict[str, List[float]], height: int = 64) -> None:
    """Tiny line chart as a PGM: one polyline per series, values in [0, 1]."""
    width = max(len(v) for v in series.values()) * 8
    img = np.zeros((height, width))
    for shade, values in zip(np.linspace(1.0, 0.5, len(series)), series.values()):
        xs = np.linspace(0, width - 1, num=len(values))
        for x0, x1, y0, y1 in zip(xs[:-1], xs[1:], values[:-1], values[1:]):
            for t in np.linspace(0, 1, 16):
                x = int(round(x0 + t * (x1 - x0)))
                y = height - 1 - int(round((y0 + t * (y1 - y0)) * (height - 1)))
                img[min(max(y, 0), height - 1), x] = shade
    write_pgm(img, path)


def _trained_open(args, settings: Settings, scenario: Scenario, manifest: RunManifest, pretrain: bool = True):
    if getattr(args, "checkpoint", None):
        manifest.inputs["checkpoint"] = str(Path(args.checkpoint).resolve())
        return load_checkpoint(Path(args.checkpoint))
    init = closed_stage(scenario.train, settings).model if pretrain else None
    return open_stage(scenario.train, settings, init).model


def cmd_ablate(args, settings: Settings, manifest: RunManifest) -> int:
    if args.which not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.which!r}; choose from {', '.join(ABLATIONS)}")
    out = _out_dir(args)
    scenario = _scenario_for(args, settings)
    if args.data:
        manifest.inputs["data"] = str(Path(args.data).resolve())
    csv_path = out / f"{args.which}.csv"
    series: Dict[str, List[float]] = {}

    if args.which == "threshold-sweep":
        model = _trained_open(args, settings, scenario, manifest)
        rows = threshold_curve(model, scenario, settings)
        write_rows(csv_path, ("percentile", "threshold", "known_accuracy", "unknown_accuracy", "macro_f1"), rows)
        series = {"known": [r[2] for r in rows], "unknown": [r[3] for r in rows]}
    elif args.which == "dim-sweep":
        rows = []
        closed = closed_stage(scenario.train, settings).model
        for d in settings.ablation.dims:
            s = replace(settings, model=replace(settings.model, embed_dim=d))
            model = open_stage(scenario.train, s, closed.copy()).model
            rep = open_world_eval(model, scenario, s)
            rows.append((d, rep.percentile, rep.threshold, rep.evaluation.known_accuracy, rep.evaluation.unknown_accuracy))
            log.info("dim %d: known %.3f unknown %.3f", d, rows[-1][3], rows[-1][4])
        write_rows(csv_path, ("embed_dim", "percentile", "threshold", "known_accuracy", "unknown_accuracy"), rows)
        series = {"known": [r[3] for r in rows], "unknown": [r[4] for r in rows]}
    elif args.which == "pretrain":
        pre = _trained_open(args, settings, scenario, manifest, pretrain=True)
        scratch = open_stage(scenario.train, settings, None).model
        rows = []
        for p in settings.ablation.pretrain_grid:
            for name, model in (("pretrained", pre), ("scratch", scratch)):
                ev = open_world_eval(model, scenario, settings, percentile=p).evaluation
                rows.append((name, p, ev.known_accuracy, ev.unknown_accuracy))
        write_rows(csv_path, ("init", "percentile", "known_accuracy", "unknown_accuracy"), rows)
        series = {n: [r[3] for r in rows if r[0] == n] for n in ("pretrained", "scratch")}
    else:
        model = _trained_open(args, settings, scenario, manifest)
        rows = perturbation_table(model, scenario, settings)
        write_rows(csv_path, ("perturbation", "known_accuracy", "unknown_accuracy", "delta_known", "delta_unknown"), rows)
        series = {"known": [r[1] for r in rows], "unknown": [r[2] for r in rows]}
    manifest.outputs.append(str(csv_path))
    if args.plot:
        _render_curves(out / f"{args.which}.pgm", series)
        manifest.outputs.append(str(out / f"{args.which}.pgm"))
    print(f"{args.which}: {len(rows)} rows written to {csv_path}")
    return EXIT_OK


# --- rerun --------------------------------------------------------------------


def cmd_rerun(args) -> int:
    data = read_run_manifest(Path(args.manifest))
    argv = list(data["argv"])
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


# --- parser -------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--config", default=default, help="config file (key = value with [section] headers)")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument(
        "--set", action="append", default=default, metavar="KEY=VALUE", help="override one config key, e.g. open.epochs=30"
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fakepcd", description="Point cloud source attribution on simulated generators.")
    parser.add_argument("--version", action="version", version=f"fakepcd {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a simulated dataset on disk")

    p = sub.add_parser("train", parents=[common], help="train the closed or open stage")
    p.add_argument("--stage", choices=("closed", "open"), required=True)
    p.add_argument("--data", required=True, help="dataset directory written by simulate")
    p.add_argument("--init-from", help="closed-stage checkpoint to start the open stage from")

    p = sub.add_parser("attribute", parents=[common], help="attribute clouds to known sources or Unknown")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--anchors", help="anchor set file")
    g.add_argument("--build-anchors", type=int, metavar="N", help="build N anchors per source from --data train split")
    g2 = p.add_mutually_exclusive_group()
    g2.add_argument("--percentile", type=float, metavar="P")
    g2.add_argument("--tune", action="store_true", help="pick P on the validation split")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="test", help="split of --data to attribute (default test)")
    p.add_argument("--inputs", nargs="+", help="point cloud files (.pcda or .xyz)")

    p = sub.add_parser("explain", parents=[common], help="critical points, fingerprints and Chamfer matching")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--critical", action="store_true")
    p.add_argument("--fingerprint", type=int, metavar="M")
    p.add_argument("--match", action="store_true")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--candidates", nargs="+")
    p.add_argument("--data")
    p.add_argument("--split", default="train")

    p = sub.add_parser("ablate", parents=[common], help="threshold, dimension, pretraining and perturbation studies")
    p.add_argument("which", help="|".join(ABLATIONS))
    p.add_argument("--data", help="dataset directory (default: simulate from config)")
    p.add_argument("--checkpoint", help="trained open-stage checkpoint to reuse")
    p.add_argument("--plot", action="store_true", help="also render the curves as a PGM")

    p = sub.add_parser("rerun", help="re-execute a run from its run.json")
    p.add_argument("manifest")
    p.add_argument("--out")
    return parser


_PATH_FLAGS = ("--config", "--data", "--init-from", "--checkpoint", "--anchors")
_PATH_LISTS = ("--inputs", "--candidates")


def _recorded_argv(argv: Sequence[str]) -> List[str]:
    """argv with --out dropped and input paths made absolute, for the run manifest."""
    out: List[str] = []
    i = 0
    mode = None
    while i < len(argv):
        a = argv[i]
        if a == "--out":
            i += 2
            mode = None
            continue
        if a.startswith("--out="):
            i += 1
            continue
        if a.startswith("-"):
            mode = "list" if a in _PATH_LISTS else ("one" if a in _PATH_FLAGS else None)
            out.append(a)
        elif mode == "one":
            out.append(str(Path(a).resolve()))
            mode = None
        elif mode == "list":
            out.append(str(Path(a).resolve()))
        else:
            out.append(a)
        i += 1
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except StoreError as exc:
            print(f"fakepcd: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    args.recorded_argv = _recorded_argv(argv)
    # reports echo input paths; absolute ones keep reruns value-identical
    for name in ("inputs", "candidates"):
        if getattr(args, name, None):
            setattr(args, name, [str(Path(p).resolve()) for p in getattr(args, name)])
    handlers = {
        "simulate": cmd_simulate,
        "train": cmd_train,
        "attribute": cmd_attribute,
        "explain": cmd_explain,
        "ablate": cmd_ablate,
    }
    try:
        threads = _thread_cap()
        settings = _settings(args)
        manifest = _manifest(args, settings, threads)
        from threadpoolctl import threadpool_limits

        # a fixed BLAS thread count keeps reductions in a fixed order, hence bit-exact reruns
        with threadpool_limits(limits=threads or 1):
            code = handlers[args.command](args, settings, manifest)
        manifest.finish(_out_dir(args))
        return code
    except NumericError as exc:
        print(f"fakepcd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"fakepcd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"fakepcd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
