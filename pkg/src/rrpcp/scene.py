"""Scene configuration files and the scene/estimate file formats.

Raw dumps are a one-line ASCII header ``"n horizon\\n"`` followed by
little-endian float64 values, frame-major (all ``n`` values of frame 1,
then frame 2, ...).
"""
from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import synthdata
from .synthdata import BackgroundModel, FrameSequence, GroundTruth, ObjectSpec, ScheduleEvent


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    return json.loads(resources.files("rrpcp.data").joinpath("scene_schema.json").read_text())


def bundled_config_path(name: str = "paper_sec4.json") -> Path:
    return Path(str(resources.files("rrpcp.data").joinpath(name)))


def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{source}: at {where}{_line_hint(text, exc)}: {exc.message}") from exc
    ndim = len(cfg["image_dims"])
    for j, o in enumerate(cfg["objects"]):
        for key in ("position", "velocity"):
            if len(o[key]) != ndim:
                raise ConfigError(f"{source}: objects/{j}/{key} needs {ndim} components")
    return cfg


def _line_hint(text: str, exc) -> str:
    # best effort: locate the last path key in the source text
    for part in reversed(list(exc.absolute_path)):
        if isinstance(part, str):
            for i, line in enumerate(text.splitlines(), 1):
                if f'"{part}"' in line:
                    return f" (line {i})"
    return ""


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def background_model(cfg: dict, seed) -> BackgroundModel:
    bg = cfg["background"]
    n = int(np.prod(cfg["image_dims"]))
    initial = bg["initial"]
    m = bg.get("n_candidates", initial)
    rng = np.random.default_rng(seed)
    U = synthdata.random_orthonormal(n, m, rng)
    schedule = tuple(ScheduleEvent(ev["time"], tuple(ev.get("add", ())), tuple(ev.get("decay", ())))
                     for ev in bg.get("schedule", ()))
    return BackgroundModel(
        U=U, initial=tuple(range(initial)), schedule=schedule, f=bg.get("f", 0.95),
        stationary_stddevs=np.asarray(bg.get("stationary_stddev", 1.0), float),
        growth_frames=bg.get("growth_frames", 20),
        initial_fraction=bg.get("initial_fraction", 0.1),
        decay_rate=bg.get("decay_rate", 0.9))


def object_specs(cfg: dict) -> list[ObjectSpec]:
    q = cfg.get("q", 0.0)
    return [ObjectSpec(half_width=o["half_width"], intensity=float(o["intensity"]),
                       position=tuple(o["position"]), velocity=tuple(o["velocity"]),
                       accel_variance=q,
                       bounds=tuple(tuple(b) for b in o["bounds"]) if "bounds" in o else None)
            for o in cfg["objects"]]


def build_scene(cfg: dict, seed: int) -> tuple[FrameSequence, np.ndarray]:
    """Generate ``(frames with ground truth, training matrix)`` for one seed."""
    s_dirs, s_train, s_bg, s_fg = np.random.SeedSequence(seed).spawn(4)
    model = background_model(cfg, s_dirs)
    bg = cfg["background"]
    train_len = bg.get("training_length", max(2 * len(model.initial), 2))
    training = synthdata.gen_training(model, train_len, s_train) if model.initial else \
        np.zeros((model.n, train_len))
    L, _ = synthdata.gen_background(model, cfg["horizon"], s_bg)
    fg = synthdata.gen_foreground(object_specs(cfg), cfg["image_dims"], cfg["horizon"], s_fg,
                                  boundary=cfg.get("boundary", "reflect"))
    seq = synthdata.compose(L, fg, cfg["image_dims"])
    seq.meta = {"seed": seed, "objects": cfg["objects"], "name": cfg.get("name", "")}
    return seq, training


def write_raw(path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype=float)
    n, horizon = X.shape
    with open(path, "wb") as fh:
        fh.write(f"{n} {horizon}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(X.T).astype("<f8").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header")
        n, horizon = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * horizon:
        raise ValueError(f"{path}: expected {n * horizon} values, found {data.size}")
    return data.reshape(horizon, n).T.astype(float)


SCENE_FILES = ("M", "L", "S", "O", "T", "training")


def save_scene(out, cfg: dict, seed: int, seq: FrameSequence, training: np.ndarray) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t = seq.truth
    for name, X in (("M", seq.M), ("L", t.L), ("S", t.S), ("O", t.O),
                    ("T", t.support.astype(float)), ("training", training)):
        write_raw(out / f"{name}.bin", X)
    meta = {
        "seed": seed,
        "n": seq.n,
        "horizon": seq.horizon,
        "image_dims": list(seq.image_dims),
        "config": cfg,
        "true_states": t.states.tolist(),
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def load_scene(path) -> tuple[FrameSequence, np.ndarray, dict]:
    path = Path(path)
    meta_file = path / "scene.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"{path}: not a scene directory (scene.json missing)")
    meta = json.loads(meta_file.read_text())
    arrays = {}
    for name in SCENE_FILES:
        arrays[name] = read_raw(path / f"{name}.bin")
    n, horizon = meta["n"], meta["horizon"]
    for name in ("M", "L", "S", "O", "T"):
        if arrays[name].shape != (n, horizon):
            raise ValueError(f"{path}/{name}.bin has shape {arrays[name].shape}, "
                             f"scene.json says ({n}, {horizon})")
    truth = GroundTruth(L=arrays["L"], O=arrays["O"], S=arrays["S"],
                        support=arrays["T"] > 0.5, states=np.asarray(meta["true_states"]))
    seq = FrameSequence(M=arrays["M"], image_dims=tuple(meta["image_dims"]), truth=truth,
                        meta={"seed": meta["seed"], "objects": meta["config"]["objects"],
                              "name": meta["config"].get("name", "")})
    return seq, arrays["training"], meta


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = [getattr(r, c) for c in columns]
            if getattr(r, "s_zero", False):
                # relative error undefined when the true sparse part is zero
                vals[columns.index("rel_err_S")] = None
            w.writerow([_fmt(v) for v in vals])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
