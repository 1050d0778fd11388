"""Declarative parameter sweeps: one exact target plus one training run per grid point.

A sweep is described by a :class:`SweepSpec` (experiment kind, grid axes,
fixed parameters, model and training settings, master seed). Points are run
independently, optionally in a process pool whose size comes from the
``LHVNET_WORKERS`` environment variable, and each finished point leaves a
JSON done-marker so that an interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lhvnet import __version__
from lhvnet.exceptions import ValidationError
from lhvnet.io import atomic_write_text
from lhvnet.model import LayerConfig, Sharing
from lhvnet.quantum import (
    BELL_KINDS,
    NetworkConfig,
    bell_state,
    maximally_mixed,
    measurement_basis,
    noisy_povm,
    target_distribution,
    werner_state,
    x_state,
)
from lhvnet.training import ModelSpec, TrainConfig, train

log = logging.getLogger(__name__)

KINDS = (
    "measurement_grid",
    "x_state_scan",
    "noise_source",
    "noise_detector",
    "shared_randomness",
    "dissimilar_sources",
    "dissimilar_noise",
)

WORKERS_ENV = "LHVNET_WORKERS"

# best measurement point for pure Bell sources; default for every mixed-state sweep
DEFAULT_U2, DEFAULT_W2 = 0.875, 0.55

PRESETS = {
    "rgb4": {"u2": 0.875, "w2": 0.55, "base": "phi_plus"},
    "rgb4_u2_085": {"u2": 0.85, "w2": 1.0, "base": "phi_plus"},
}

# axes each kind must sweep (extra axes are allowed where they are fixed params)
_REQUIRED_AXES = {
    "measurement_grid": ("u2", "w2"),
    "x_state_scan": ("t",),
    "noise_source": ("v",),
    "noise_detector": ("v",),
    "shared_randomness": ("K",),
    "dissimilar_sources": ("t",),
    "dissimilar_noise": ("v",),
}

_DEFAULT_PARAMS = {
    "measurement_grid": {"base": "phi_plus"},
    "x_state_scan": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "path": "center_to_corner", "corner": "phi_plus"},
    "noise_source": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "base": "phi_plus"},
    "noise_detector": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "base": "phi_plus"},
    "shared_randomness": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "base": "phi_plus", "v": 1.0,
                          "mode": "shared_all", "pair": "0,1"},
    "dissimilar_sources": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "family": "EEX"},
    "dissimilar_noise": {"u2": DEFAULT_U2, "w2": DEFAULT_W2, "base": "phi_plus", "count": 3},
}


_EXTRA_AXES = {"x_state_scan": ("p", "q", "s"), "shared_randomness": ("v",)}


def spec_problems(kind: str, axes, params: dict) -> list[str]:
    """Every problem with a sweep description, so they can be reported together."""
    if kind not in KINDS:
        return [f"kind: unknown experiment {kind!r}"]
    errors = []
    names = [n for n, _ in axes]
    allowed = set(_REQUIRED_AXES[kind]) | {"u2", "w2"} | set(_EXTRA_AXES.get(kind, ()))
    for need in _REQUIRED_AXES[kind]:
        if need not in names:
            errors.append(f"grid.{need}: required axis missing")
    for name, values in axes:
        if name not in allowed:
            errors.append(f"grid.{name}: not a sweepable parameter of {kind}")
        elif not values:
            errors.append(f"grid.{name}: empty axis")
        elif name == "K":
            if any(v < 1 or v != int(v) for v in values):
                errors.append("grid.K: entries must be integers >= 1")
        elif name in ("u2", "w2", "v", "t") and any(not 0 <= v <= 1 for v in values):
            errors.append(f"grid.{name}: values must lie in [0, 1]")
    merged = {**_DEFAULT_PARAMS[kind], **params}
    for key in ("u2", "w2", "v"):
        if key in merged and key not in names:
            try:
                if not 0 <= float(merged[key]) <= 1:
                    errors.append(f"params.{key}: must lie in [0, 1]")
            except (TypeError, ValueError):
                errors.append(f"params.{key}: not a number")
    for key in ("base", "corner"):
        if key in merged and merged[key] not in BELL_KINDS:
            errors.append(f"params.{key}: unknown Bell state {merged[key]!r}")
    if kind == "dissimilar_sources" and merged["family"] not in ("MMX", "EMX", "EEX"):
        errors.append(f"params.family: expected MMX, EMX or EEX, got {merged['family']!r}")
    if kind == "dissimilar_noise" and str(merged["count"]) not in ("1", "2", "3"):
        errors.append("params.count: must be 1, 2 or 3")
    if kind == "x_state_scan" and merged["path"] not in ("center_to_corner", "edge", "pqs"):
        errors.append(f"params.path: unknown path {merged['path']!r}")
    if kind == "shared_randomness" and merged["mode"] not in ("shared_all", "shared_pair"):
        errors.append(f"params.mode: unknown sharing mode {merged['mode']!r}")
    return errors


def parse_axis(text: str) -> tuple[float, ...]:
    """``"0.5:1.0:0.1"`` (inclusive) or a comma separated list."""
    text = str(text).strip()
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError:
            raise ValidationError(f"bad range {text!r}; expected start:stop:step") from None
        if step <= 0 or stop < start:
            raise ValidationError(f"bad range {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 12) for i in range(n))
    if not text:
        return ()
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ValidationError(f"bad value list {text!r}") from None


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    axes: tuple[tuple[str, tuple[float, ...]], ...]
    params: dict = field(default_factory=dict)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValidationError("invalid sweep spec: " + "; ".join(errors))

    def problems(self) -> list[str]:
        return spec_problems(self.kind, self.axes, self.params)

    def merged_params(self) -> dict:
        return {**_DEFAULT_PARAMS.get(self.kind, {}), **self.params}

    def points(self) -> list[dict]:
        """Cartesian product of the axes, in row-major order of ``axes``."""
        names = [n for n, _ in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.axes))]

    def point_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])

    def to_dict(self) -> dict:
        cfg = self.train
        return {
            "kind": self.kind,
            "axes": [[n, list(v)] for n, v in self.axes],
            "params": {k: self.merged_params()[k] for k in sorted(self.merged_params())},
            "model": self.model.to_dict(),
            "train": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        m = d.get("model", {})
        model = ModelSpec(
            LayerConfig(*m.get("layers", (1, 1, 1))),
            tuple(m.get("widths", ModelSpec().widths)),
            Sharing.from_dict(m["sharing"]) if "sharing" in m else Sharing(),
            int(m.get("fourier", 0)),
            bool(m.get("train_mixture", True)),
        )
        return cls(
            d["kind"],
            tuple((n, tuple(float(x) for x in v)) for n, v in d["axes"]),
            dict(d.get("params", {})),
            model,
            TrainConfig(**d.get("train", {})),
            int(d.get("seed", 0)),
        )

    def spec_hash(self) -> str:
        blob = json.dumps({"spec": self.to_dict(), "version": __version__}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SweepResult:
    kind: str
    param_names: list[str]
    rows: list[dict]
    spec_hash: str
    version: str = __version__
    skipped: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


# --------------------------------------------------------------------------- points


def dissimilar_path_state(t: float) -> np.ndarray:
    """Third source along rho_M -> rho_C (t in [0, 0.5]) -> rho_E (t in [0.5, 1])."""
    t = float(t)
    if not 0 <= t <= 1:
        raise ValidationError(f"path parameter must lie in [0, 1], got {t}")
    if t <= 0.5:
        return x_state(0.25 + 0.5 * t, 0.0, 0.0)
    return x_state(0.5, t - 0.5, 0.0)


def x_path_state(path: str, t: float, corner: str = "phi_plus", point: dict | None = None) -> np.ndarray:
    """Two-qubit X state along a named path.

    ``center_to_corner`` is the Werner segment from I/4 to a Bell corner;
    ``edge`` runs from the classically anti-correlated mixture (t = 0) to
    phi_plus (t = 1) with p = q = t/2; ``pqs`` takes p, q, s from ``point``.
    """
    if path == "center_to_corner":
        return x_state(*_werner_xparams(t, corner))
    if path == "edge":
        return x_state(t / 2, t / 2, 0.0)
    if path == "pqs":
        point = point or {}
        return x_state(point["p"], point["q"], point["s"])
    raise ValidationError(f"unknown X-state path {path!r}")


def _werner_xparams(v: float, corner: str) -> tuple[float, float, float]:
    sign = -1.0 if corner.endswith("minus") else 1.0
    if corner.startswith("phi"):
        return (1 + v) / 4, sign * v / 2, 0.0
    return (1 - v) / 4, 0.0, sign * v / 2


def point_network(kind: str, params: dict) -> NetworkConfig:
    """NetworkConfig for one grid point. Raises ValidationError for invalid states."""
    p = params
    meas = measurement_basis(p.get("u2", DEFAULT_U2), p.get("w2", DEFAULT_W2))
    if kind == "measurement_grid":
        return NetworkConfig.symmetric(bell_state(p["base"]), meas)
    if kind == "x_state_scan":
        return NetworkConfig.symmetric(x_path_state(p["path"], p.get("t", 0.0), p["corner"], p), meas)
    if kind == "noise_source":
        return NetworkConfig.symmetric(werner_state(p["v"], p["base"]), meas)
    if kind == "noise_detector":
        return NetworkConfig.symmetric(bell_state(p["base"]), noisy_povm(meas, p["v"]))
    if kind == "shared_randomness":
        return NetworkConfig.symmetric(werner_state(p["v"], p["base"]), meas)
    if kind == "dissimilar_sources":
        fixed = {"M": maximally_mixed(4), "E": bell_state("phi_plus")}
        fam = p["family"]
        x = dissimilar_path_state(p["t"])
        return NetworkConfig(fixed[fam[0]], fixed[fam[1]], x, meas, meas, meas)
    if kind == "dissimilar_noise":
        noisy, pure = werner_state(p["v"], p["base"]), bell_state(p["base"])
        count = int(p["count"])
        srcs = [noisy if k < count else pure for k in range(3)]
        return NetworkConfig(*srcs, meas, meas, meas)
    raise ValidationError(f"unknown experiment kind {kind!r}")


def point_model(spec: SweepSpec, params: dict) -> ModelSpec:
    if spec.kind != "shared_randomness":
        return spec.model
    k = int(params["K"])
    if k == 1:
        sharing = Sharing()
    elif params["mode"] == "shared_pair":
        pair = tuple(int(x) for x in str(params["pair"]).split(","))
        sharing = Sharing.shared_pair(k, pair)
    else:
        sharing = Sharing.shared_all(k)
    return replace(spec.model, sharing=sharing)


def run_point(spec: SweepSpec, index: int, point: dict) -> dict:
    """Train one grid point; returns a row dict (or a skip record with ``reason``)."""
    params = {**spec.merged_params(), **point}
    seed = spec.point_seed(index)
    t0 = time.perf_counter()
    try:
        target = target_distribution(point_network(spec.kind, params))
    except ValidationError as exc:
        return {"index": index, "params": point, "skipped": True, "reason": str(exc), "seed": seed}
    result = train(target, point_model(spec, params), replace(spec.train, seed=seed))
    return {
        "index": index,
        "params": point,
        "skipped": False,
        "best_distance": result.best_distance,
        "best_kl": result.best_kl,
        "verdict": result.verdict,
        "seed": seed,
        "steps": spec.train.steps,
        "restarts": len(result.restarts),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def _run_point_job(payload):
    spec_dict, index, point = payload
    return run_point(SweepSpec.from_dict(spec_dict), index, point)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_sweep(spec: SweepSpec, out_dir: str | os.PathLike | None = None, workers: int | None = None) -> SweepResult:
    """Run every grid point, skipping points that already have a matching done-marker."""
    h = spec.spec_hash()
    points = spec.points()
    done: dict[int, dict] = {}
    marker_dir = None
    if out_dir is not None:
        marker_dir = Path(out_dir) / f"points-{h}"
        marker_dir.mkdir(parents=True, exist_ok=True)
        for i in range(len(points)):
            marker = marker_dir / f"{i:05d}.json"
            if marker.exists():
                rec = json.loads(marker.read_text())
                if rec.get("spec_hash") == h:
                    done[i] = rec["row"]
    todo = [i for i in range(len(points)) if i not in done]
    log.info("sweep %s (%s): %d points, %d to run", spec.kind, h, len(points), len(todo))

    def record(row):
        done[row["index"]] = row
        if marker_dir is not None:
            atomic_write_text(marker_dir / f"{row['index']:05d}.json",
                              json.dumps({"spec_hash": h, "row": row}, sort_keys=True))

    workers = workers or worker_count()
    if workers > 1 and len(todo) > 1:
        payloads = [(spec.to_dict(), i, points[i]) for i in todo]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_point_job, payloads):
                record(row)
    else:
        for i in todo:
            record(run_point(spec, i, points[i]))

    rows = [done[i] for i in range(len(points))]
    result = SweepResult(
        spec.kind,
        [n for n, _ in spec.axes],
        [r for r in rows if not r["skipped"]],
        h,
        skipped=[r for r in rows if r["skipped"]],
    )
    if out_dir is not None:
        write_sweep_csv(result, Path(out_dir) / f"{spec.kind}.csv")
    return result


# --------------------------------------------------------------------------- CSV

_TAIL = ("best_distance", "best_kl", "verdict", "seed", "steps", "wall_ms")


def sweep_header(param_names: list[str]) -> list[str]:
    head = ["experiment"]
    for k, name in enumerate(param_names, 1):
        head += [f"param{k}_name", f"param{k}"]
    return head + list(_TAIL)


def write_sweep_csv(result: SweepResult, path) -> None:
    import io as _io

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(sweep_header(result.param_names))
    for row in result.rows:
        line = [result.kind]
        for name in result.param_names:
            line += [name, repr(float(row["params"][name]))]
        line += [repr(float(row["best_distance"])), repr(float(row["best_kl"])), row["verdict"],
                 row["seed"], row["steps"], f"{row['wall_ms']:.1f}"]
        w.writerow(line)
    atomic_write_text(path, buf.getvalue())


def read_sweep_csv(path) -> SweepResult:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_params = (len(header) - 1 - len(_TAIL)) // 2
        rows, names, kind = [], [], None
        for line in reader:
            kind = line[0]
            names = [line[1 + 2 * k] for k in range(n_params)]
            params = {line[1 + 2 * k]: float(line[2 + 2 * k]) for k in range(n_params)}
            tail = dict(zip(_TAIL, line[1 + 2 * n_params:]))
            rows.append({
                "index": len(rows),
                "params": params,
                "skipped": False,
                "best_distance": float(tail["best_distance"]),
                "best_kl": float(tail["best_kl"]),
                "verdict": tail["verdict"],
                "seed": int(tail["seed"]),
                "steps": int(tail["steps"]),
                "wall_ms": float(tail["wall_ms"]),
            })
    if kind is None:
        names = [header[2 + 2 * k] for k in range(n_params)]
    return SweepResult(kind or "", names, rows, "")


# --------------------------------------------------------------------------- studies


def _sweep(kind, axes, params, model, train_cfg, seed, out_dir, workers):
    spec = SweepSpec(kind, tuple((n, tuple(v)) for n, v in axes), params,
                     model or ModelSpec(), train_cfg or TrainConfig(), seed)
    return run_sweep(spec, out_dir, workers)


def measurement_grid(u2_values=parse_axis("0:1:0.025"), w2_values=parse_axis("0:1:0.025"), base="phi_plus",
                     model=None, train_cfg=None, seed=0, out_dir=None, workers=None) -> SweepResult:
    return _sweep("measurement_grid", [("u2", u2_values), ("w2", w2_values)], {"base": base},
                  model, train_cfg, seed, out_dir, workers)


def x_state_scan(t_values, path="center_to_corner", corner="phi_plus", u2=DEFAULT_U2, w2=DEFAULT_W2,
                 model=None, train_cfg=None, seed=0, out_dir=None, workers=None) -> SweepResult:
    return _sweep("x_state_scan", [("t", t_values)], {"path": path, "corner": corner, "u2": u2, "w2": w2},
                  model, train_cfg, seed, out_dir, workers)


def noise_robustness(v_values=parse_axis("0.5:1.0:0.01"), mode="source", base="phi_plus", u2=DEFAULT_U2,
                     w2=DEFAULT_W2, model=None, train_cfg=None, seed=0, out_dir=None, workers=None) -> SweepResult:
    if mode not in ("source", "detector"):
        raise ValidationError(f"noise mode must be 'source' or 'detector', got {mode!r}")
    return _sweep(f"noise_{mode}", [("v", v_values)], {"base": base, "u2": u2, "w2": w2},
                  model, train_cfg, seed, out_dir, workers)


def shared_randomness_study(k_values=(1, 2, 3, 4), mode="shared_all", pair=(0, 1), v=1.0, preset="rgb4",
                            model=None, train_cfg=None, seed=0, out_dir=None, workers=None) -> SweepResult:
    params = {**PRESETS[preset], "v": v, "mode": mode, "pair": ",".join(map(str, pair))}
    return _sweep("shared_randomness", [("K", tuple(float(k) for k in k_values))], params,
                  model, train_cfg, seed, out_dir, workers)


def dissimilar_sources_study(family="EEX", t_values=parse_axis("0:1:0.1"), u2=DEFAULT_U2, w2=DEFAULT_W2,
                             model=None, train_cfg=None, seed=0, out_dir=None, workers=None) -> SweepResult:
    return _sweep("dissimilar_sources", [("t", t_values)], {"family": family, "u2": u2, "w2": w2},
                  model, train_cfg, seed, out_dir, workers)


def dissimilar_noise_study(count=3, v_values=parse_axis("0.5:1.0:0.05"), base="phi_plus", u2=DEFAULT_U2,
                           w2=DEFAULT_W2, model=None, train_cfg=None, seed=0, out_dir=None,
                           workers=None) -> SweepResult:
    return _sweep("dissimilar_noise", [("v", v_values)], {"count": count, "base": base, "u2": u2, "w2": w2},
                  model, train_cfg, seed, out_dir, workers)
