"""Command-line harness: generate scenes, run the algorithms, summarize metrics.

Exit codes: 0 success, 1 runtime failure (missing or malformed files),
2 degraded run (solver did not converge on more than 10% of the frames of
some run), 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, pcp, pipeline, scene, subspace

log = logging.getLogger("rrpcp")

EXIT_OK, EXIT_FAIL, EXIT_DEGRADED, EXIT_USAGE = 0, 1, 2, 64
ALGO_CHOICES = ("suppred-modcs", "rrpcp", "pcp", "all")
# CLI name -> pipeline algorithm
_ONLINE = {"suppred-modcs": "suppred-modcs", "rrpcp": "plain-rrpcp"}
DEGRADED_FRACTION = 0.10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrpcp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a scene with ground truth")
    g.add_argument("--config", type=Path, default=None,
                   help="scene config JSON (default: the bundled paper_sec4.json)")
    g.add_argument("--seed", type=int, nargs="+", default=None,
                   help="one or more seeds (default: the config's seed list)")
    g.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("run", help="run algorithms on generated scenes")
    r.add_argument("--scene", type=Path, nargs="+", required=True)
    r.add_argument("--algo", choices=ALGO_CHOICES, default="all")
    r.add_argument("--config", type=Path, default=None,
                   help="config whose 'pipeline' section overrides the scene's")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--jobs", type=int, default=1, help="scenes processed in parallel")
    r.add_argument("--save-estimates", action="store_true",
                   help="also dump S_hat and L_hat as raw float files")

    s = sub.add_parser("report", help="summarize metrics CSVs")
    s.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    s.add_argument("--out", type=Path, required=True)
    return p


# --- generate ---------------------------------------------------------------

def cmd_generate(config=None, seeds=None, out=".") -> list[Path]:
    path = Path(config) if config else scene.bundled_config_path()
    cfg = scene.load_config(path)
    seeds = list(seeds) if seeds else list(cfg.get("seeds", [0]))
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"seeds must be distinct, got {seeds}")
    out = Path(out)
    written = []
    for sd in seeds:
        seq, training = scene.build_scene(cfg, sd)
        target = out if len(seeds) == 1 else out / f"seed_{sd}"
        written.append(scene.save_scene(target, cfg, sd, seq, training))
        log.info("wrote scene seed=%d to %s", sd, target)
    return written


# --- run --------------------------------------------------------------------

def _algorithms(algo: str) -> list[str]:
    return ["suppred-modcs", "rrpcp", "pcp"] if algo == "all" else [algo]


def _pipeline_settings(meta: dict, config_path) -> dict:
    if config_path is not None:
        return dict(scene.load_config(config_path).get("pipeline", {}))
    return dict(meta["config"].get("pipeline", {}))


def run_scene(scene_dir, algorithms, out, config_path=None, save_estimates=False) -> dict:
    """Run each algorithm on one scene directory and write its CSVs.

    Returns ``{algorithm: nonconverged fraction}``.
    """
    seq, training, meta = scene.load_scene(scene_dir)
    settings = _pipeline_settings(meta, config_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    status = {}
    sub0 = None
    for algo in algorithms:
        if algo == "pcp":
            res, _ = pcp.run_pcp(seq)
        else:
            cfg = pipeline.PipelineConfig.from_dict(settings, algorithm=_ONLINE[algo],
                                                    seed=meta["seed"])
            if sub0 is None:
                sub0 = subspace.estimate_initial_pc(training, cfg.energy_fraction, cfg.center)
            res = pipeline.run_online(seq, sub0, cfg)
        scene.write_metrics_csv(out / f"metrics_{algo}.csv", res.rows, pipeline.METRIC_COLUMNS)
        if res.tracks is not None:
            write_tracks_csv(out / f"tracks_{algo}.csv", res.tracks, seq.truth.states)
        if save_estimates:
            scene.write_raw(out / f"S_hat_{algo}.bin", res.S_hat)
            scene.write_raw(out / f"L_hat_{algo}.bin", res.L_hat)
        status[algo] = res.nonconverged_fraction
        log.info("%s on %s: median rel_err_S %.4g, non-converged %.1f%%", algo, scene_dir,
                 pipeline.median_rel_err(res.rows), 100 * res.nonconverged_fraction)
    return status


def write_tracks_csv(path, tracks, true_states=None) -> None:
    """Estimated (and true, when known) position/velocity per frame, object, axis."""
    H, n_obj, ndim, _ = tracks.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "object", "axis", "p_est", "v_est", "p_true", "v_true"])
        for k in range(H):
            for j in range(n_obj):
                for a in range(ndim):
                    row = [k + 1, j, a, repr(float(tracks[k, j, a, 0])), repr(float(tracks[k, j, a, 1]))]
                    if true_states is not None:
                        row += [repr(float(true_states[j, a, k, 0])), repr(float(true_states[j, a, k, 1]))]
                    else:
                        row += ["", ""]
                    w.writerow(row)


def _run_one(args):
    return run_scene(*args)


def cmd_run(scenes, algo="all", config=None, out=".", jobs=1, save_estimates=False) -> int:
    if algo not in ALGO_CHOICES:
        raise UsageError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGO_CHOICES)}")
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    scenes = [Path(s) for s in scenes]
    for s in scenes:
        if not (s / "scene.json").exists():
            raise FileNotFoundError(f"{s}: not a scene directory (scene.json missing)")
    algorithms = _algorithms(algo)
    out = Path(out)
    targets = [out if len(scenes) == 1 else out / s.name for s in scenes]
    tasks = [(s, algorithms, t, config, save_estimates) for s, t in zip(scenes, targets)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            statuses = list(ex.map(_run_one, tasks))
    else:
        statuses = [_run_one(t) for t in tasks]

    seeds = [json.loads((s / "scene.json").read_text())["seed"] for s in scenes]
    manifest = {
        "config": str(config) if config else None,
        "scenes": [str(s) for s in scenes],
        "seeds": seeds,
        "algorithms": algorithms,
        "out": str(out),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "nonconverged_fraction": {str(t): st for t, st in zip(targets, statuses)},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    degraded = [(str(t), a, f) for t, st in zip(targets, statuses) for a, f in st.items()
                if f > DEGRADED_FRACTION]
    for t, a, f in degraded:
        log.warning("%s in %s: solver did not converge on %.0f%% of frames", a, t, 100 * f)
    return EXIT_DEGRADED if degraded else EXIT_OK


# --- report -----------------------------------------------------------------

def _series_name(path: Path, taken: set) -> str:
    stem = path.stem
    name = stem[len("metrics_"):] if stem.startswith("metrics_") else stem
    if name in taken:
        name = f"{path.parent.name}/{name}"
    taken.add(name)
    return name


def _algo_of(name: str) -> str:
    return name.rsplit("/", 1)[-1]


def _col(rows, key) -> np.ndarray:
    vals = [r[key] for r in rows]
    return np.array([float(v) if v != "" else np.nan for v in vals])


def summarize(series: dict[str, list[dict]]) -> dict[str, dict]:
    """Per-algorithm statistics pooled over all frames of its CSVs."""
    pooled: dict[str, list[dict]] = {}
    for name, rows in series.items():
        pooled.setdefault(_algo_of(name), []).extend(rows)
    stats = {}
    for algo, rows in pooled.items():
        rel = _col(rows, "rel_err_S")
        rel = rel[~np.isnan(rel)]
        upd = _col(rows, "extras_upd") + _col(rows, "misses_upd")
        pred = _col(rows, "extras_pred") + _col(rows, "misses_pred")
        conv = _col(rows, "converged")
        stats[algo] = {
            "frames": len(rows),
            "median_rel_err_S": float(np.median(rel)) if rel.size else np.nan,
            "p90_rel_err_S": float(np.percentile(rel, 90)) if rel.size else np.nan,
            "median_rel_err_L": float(np.nanmedian(_col(rows, "rel_err_L"))),
            "median_support_err_upd": float(np.nanmedian(upd)),
            "median_support_err_pred": float(np.nanmedian(pred)) if not np.all(np.isnan(pred))
            else np.nan,
            "nonconverged_frames": int(np.sum(conv == 0)),
        }
    return stats


# lower is better for all of these
_ORDER_METRICS = ("median_rel_err_S", "p90_rel_err_S", "median_rel_err_L", "median_support_err_upd")


def ordering_lines(stats: dict[str, dict]) -> list[str]:
    lines = []
    for m in _ORDER_METRICS:
        ranked = sorted((v[m], a) for a, v in stats.items() if not np.isnan(v[m]))
        if not ranked:
            continue
        chain = " < ".join(f"{a} ({v:.4g})" for v, a in ranked)
        lines.append(f"{m}: winner {ranked[0][1]}; {chain}")
    return lines


def cmd_report(inputs, out) -> dict:
    if not inputs:
        raise UsageError("report needs at least one CSV")
    series: dict[str, list[dict]] = {}
    taken: set = set()
    for p in map(Path, inputs):
        rows = scene.read_metrics_csv(p)
        missing = {"frame", "rel_err_S"} - set(rows[0].keys() if rows else ())
        if not rows:
            raise ValueError(f"{p}: no metric rows")
        if missing:
            raise ValueError(f"{p}: missing columns {sorted(missing)}")
        series[_series_name(p, taken)] = rows
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stats = summarize(series)

    cols = ["algorithm", "frames", "median_rel_err_S", "p90_rel_err_S", "median_rel_err_L",
            "median_support_err_pred", "median_support_err_upd", "nonconverged_frames"]
    lines = ["\t".join(cols)]
    for a, v in stats.items():
        lines.append("\t".join([a] + [scene._fmt(v[c]) for c in cols[1:]]))
    lines.append("")
    lines += ordering_lines(stats)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    names = list(series)
    H = max(len(r) for r in series.values())
    with open(out / "rel_err_S.txt", "w") as fh:
        fh.write("# frame " + " ".join(names) + "\n")
        for k in range(H):
            vals = [rows[k]["rel_err_S"] if k < len(rows) and rows[k]["rel_err_S"] else "nan"
                    for rows in series.values()]
            fh.write(f"{k + 1} " + " ".join(vals) + "\n")
    support_cols = ("extras_pred", "misses_pred", "extras_upd", "misses_upd")
    with open(out / "support_errors.txt", "w") as fh:
        fh.write("# frame " + " ".join(f"{n}:{c}" for n in names for c in support_cols) + "\n")
        for k in range(H):
            vals = []
            for rows in series.values():
                for c in support_cols:
                    v = rows[k].get(c, "") if k < len(rows) else ""
                    vals.append(v if v != "" else "nan")
            fh.write(f"{k + 1} " + " ".join(vals) + "\n")
    return stats


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(args.config, args.seed, args.out)
            return EXIT_OK
        if args.command == "run":
            return cmd_run(args.scene, args.algo, args.config, args.out, args.jobs,
                           args.save_estimates)
        if args.command == "report":
            stats = cmd_report(args.inputs, args.out)
            print((Path(args.out) / "summary.txt").read_text(), end="")
            return EXIT_OK if stats else EXIT_FAIL
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rrpcp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"rrpcp: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
