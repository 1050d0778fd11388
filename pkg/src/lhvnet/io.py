"""File formats, configuration parsing and atomic writes.

Formats (all text floats use 17 significant digits so they round-trip):

* distribution file: 64 lines ``a b c p``
* state file: ``dim=n`` header then n rows of n complex entries
* checkpoint: ``.npz`` of parameter arrays plus a JSON ``__meta__`` entry
* train result: JSON
* response tables: CSV with a JSON sidecar holding the mixture weights
"""

from __future__ import annotations

import configparser
import csv
import io as _io
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from lhvnet import __version__
from lhvnet.exceptions import ValidationError
from lhvnet.model import PARTIES, LayerConfig, LhvModel, Sharing
from lhvnet.quantum import (
    CLASSICAL_CORRELATED,
    NetworkConfig,
    bell_state,
    clean_distribution,
    maximally_mixed,
    measurement_basis,
    noisy_povm,
    validate_density_matrix,
    werner_state,
    x_state,
)

CHECKPOINT_VERSION = 1
_FMT = "%.17g"


class FormatError(ValidationError):
    """A file could not be parsed as the expected format."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_bytes(path, writer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- distributions


def format_distribution(p) -> str:
    p = np.asarray(p, float).reshape(4, 4, 4)
    lines = [f"{a} {b} {c} {_FMT % p[a, b, c]}" for a in range(4) for b in range(4) for c in range(4)]
    return "\n".join(lines) + "\n"


def write_distribution(path, p) -> None:
    atomic_write_text(path, format_distribution(p))


def read_distribution(path) -> np.ndarray:
    p = np.full((4, 4, 4), np.nan)
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if len(rows) != 64:
        raise FormatError(f"{path}: expected 64 lines, found {len(rows)}")
    for n, row in enumerate(rows, 1):
        try:
            a, b, c, val = int(row[0]), int(row[1]), int(row[2]), float(row[3])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: line {n} is not 'a b c p'") from None
        if len(row) != 4 or not all(0 <= k < 4 for k in (a, b, c)):
            raise FormatError(f"{path}: line {n} is not 'a b c p'")
        if not np.isnan(p[a, b, c]):
            raise FormatError(f"{path}: outcome ({a}, {b}, {c}) listed twice")
        p[a, b, c] = val
    return clean_distribution(p.ravel())


# --------------------------------------------------------------------------- states


def write_state(path, rho) -> None:
    rho = np.asarray(rho, complex)
    lines = [f"dim={rho.shape[0]}"]
    for row in rho:
        lines.append(" ".join(f"{z.real:.17g}{z.imag:+.17g}j" for z in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_state(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    m = re.fullmatch(r"dim\s*=\s*(\d+)", lines[0]) if lines else None
    if not m:
        raise FormatError(f"{path}: missing 'dim=n' header")
    dim = int(m.group(1))
    if len(lines) != dim + 1:
        raise FormatError(f"{path}: expected {dim} matrix rows, found {len(lines) - 1}")
    try:
        rho = np.array([[complex(x) for x in ln.split()] for ln in lines[1:]])
    except ValueError:
        raise FormatError(f"{path}: unparseable matrix entry") from None
    if rho.shape != (dim, dim):
        raise FormatError(f"{path}: matrix is not {dim}x{dim}")
    return validate_density_matrix(rho, str(path))


# --------------------------------------------------------------------------- checkpoints


def model_meta(model: LhvModel) -> dict:
    c = model.config
    return {
        "format": "lhvnet-checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "layers": [c.k_a, c.k_b, c.k_c],
        "max_product": c.max_product,
        "widths": list(model.widths),
        "sharing": model.sharing.to_dict(),
        "seed": int(model.seed),
        "fourier": model.fourier,
        "train_mixture": model.train_mixture,
        "lineage": [list(x) for x in model.lineage],
    }


def save_checkpoint(path, model: LhvModel) -> None:
    arrays = {k: np.asarray(v) for k, v in model.params.items()}
    arrays["__meta__"] = np.array(json.dumps(model_meta(model)))
    _atomic_write_bytes(path, lambda fh: np.savez(fh, **arrays))


def load_checkpoint(path) -> LhvModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k: np.array(data[k]) for k in data.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if meta.get("format") != "lhvnet-checkpoint":
        raise FormatError(f"{path}: not an lhvnet checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    model = LhvModel(
        LayerConfig(*meta["layers"], max_product=meta["max_product"]),
        tuple(meta["widths"]),
        Sharing.from_dict(meta["sharing"]),
        params,
        meta["seed"],
        meta["fourier"],
        meta["train_mixture"],
        [tuple(x) for x in meta["lineage"]],
    )
    _check_param_shapes(model, path)
    return model


def _check_param_shapes(model: LhvModel, path) -> None:
    from lhvnet.model import init_model

    ref = init_model(model.config, model.widths, 0, model.sharing, model.fourier, model.train_mixture)
    if set(ref.params) != set(model.params):
        raise FormatError(f"{path}: parameter set does not match the stored architecture")
    for k, v in ref.params.items():
        if model.params[k].shape != v.shape:
            raise FormatError(f"{path}: parameter {k} has shape {model.params[k].shape}, expected {v.shape}")


# --------------------------------------------------------------------------- train results


def write_train_result(path, result) -> None:
    atomic_write_text(path, json.dumps(result.to_dict(), indent=1, allow_nan=True) + "\n")


def read_train_result(path):
    from lhvnet.training import TrainResult

    with open(path) as fh:
        try:
            return TrainResult.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed train result ({exc})") from None


# --------------------------------------------------------------------------- response tables

TABLE_HEADER = ["party", "copy", "layer_i", "layer_j", "grid_x", "grid_y", "p0", "p1", "p2", "p3"]


def write_response_tables(path, table) -> None:
    path = Path(path)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    pts = table.points
    for party in PARTIES:
        arr = table.tables[party]
        K, rows, cols, G, _, _ = arr.shape
        for m in range(K):
            for i in range(rows):
                for j in range(cols):
                    for x in range(G):
                        for y in range(G):
                            w.writerow([party, m, i, j, _FMT % pts[x], _FMT % pts[y],
                                        *(_FMT % v for v in arr[m, i, j, x, y])])
    atomic_write_text(path, buf.getvalue())
    side = {"grid": table.grid, "weights": [w_.tolist() for w_ in table.weights]}
    atomic_write_text(weights_sidecar(path), json.dumps(side) + "\n")


def weights_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".weights.json")


def read_response_tables(path):
    from lhvnet.training import ResponseTable

    side = json.loads(weights_sidecar(path).read_text())
    G = int(side["grid"])
    weights = tuple(np.asarray(w, float) for w in side["weights"])
    K = weights[0].shape[0]
    ka, kb, kc = (w.shape[1] for w in weights)
    shapes = {"alice": (kb, kc), "bob": (ka, kc), "charlie": (ka, kb)}
    tables = {p: np.full((K, *shapes[p], G, G, 4), np.nan) for p in PARTIES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != TABLE_HEADER:
            raise FormatError(f"{path}: unexpected response table header")
        for row in reader:
            party, m, i, j = row[0], int(row[1]), int(row[2]), int(row[3])
            x = int(round(float(row[4]) * G - 0.5))
            y = int(round(float(row[5]) * G - 0.5))
            tables[party][m, i, j, x, y] = [float(v) for v in row[6:]]
    if any(np.isnan(t).any() for t in tables.values()):
        raise FormatError(f"{path}: response table is incomplete")
    return ResponseTable(G, tables, weights)


# --------------------------------------------------------------------------- config files


def read_config(path) -> dict[str, str]:
    """Flat ``{"section.key": value}`` view of a key-value config file.

    Keys outside any section are kept as written, so ``train.steps = 10`` at
    the top of the file and ``steps = 10`` under ``[train]`` are equivalent.
    """
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            name = key if section == "__root__" else f"{section}.{key}"
            flat[name] = value.strip()
    return flat


_SOURCE_RE = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def parse_source(text: str, base_dir: Path | None = None) -> np.ndarray:
    """Source expression, e.g. ``werner(0.94,phi_plus)``, ``x(0.3,0.1,0)``, ``file(rho.txt)``."""
    m = _SOURCE_RE.match(text)
    if not m:
        raise ValidationError(f"cannot parse source {text!r}")
    name, args = m.group(1), [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
    try:
        if name == "maximally_mixed":
            return maximally_mixed(4)
        if name == "classical_correlated":
            return CLASSICAL_CORRELATED.copy()
        if name == "bell":
            return bell_state(args[0])
        if name in ("phi_plus", "phi_minus", "psi_plus", "psi_minus"):
            return bell_state(name)
        if name == "werner":
            return werner_state(float(args[0]), args[1] if len(args) > 1 else "psi_minus")
        if name == "x":
            return x_state(*(float(a) for a in args))
        if name == "file":
            p = Path(args[0])
            return read_state(p if p.is_absolute() or base_dir is None else base_dir / p)
    except (IndexError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad arguments in source {text!r}") from None
    raise ValidationError(f"unknown source family {name!r}")


def parse_measurement(text: str):
    """``(u2,w2)``, ``u2,w2`` or ``noisy(v,u2,w2)``."""
    text = text.strip()
    noisy = None
    m = re.fullmatch(r"noisy\s*\((.*)\)", text)
    if m:
        parts = [x.strip() for x in m.group(1).split(",")]
        noisy, text = parts[0], ",".join(parts[1:])
    nums = [x for x in text.strip("() ").split(",") if x.strip()]
    try:
        vals = [float(x) for x in nums]
    except ValueError:
        raise ValidationError(f"cannot parse measurement {text!r}") from None
    if len(vals) not in (1, 2):
        raise ValidationError(f"measurement needs u2 or (u2, w2), got {text!r}")
    basis = measurement_basis(*vals)
    return basis if noisy is None else noisy_povm(basis, float(noisy))


_PARTY_KEYS = {"alice": "meas_alice", "bob": "meas_bob", "charlie": "meas_charlie"}


def network_from_config(cfg: dict[str, str], base_dir: Path | None = None) -> NetworkConfig:
    """NetworkConfig from keys ``sources``/``source.alpha``... and ``meas``/``meas.alice``..."""
    get = lambda *keys: next((cfg[k] for k in keys if k in cfg), None)  # noqa: E731
    errors = []
    srcs = []
    for name in ("alpha", "beta", "gamma"):
        text = get(f"source.{name}", f"network.source.{name}", "sources", "network.sources")
        if text is None:
            errors.append(f"source.{name}: missing (set 'sources' or 'source.{name}')")
            srcs.append(None)
            continue
        try:
            srcs.append(parse_source(text, base_dir))
        except ValidationError as exc:
            errors.append(f"source.{name}: {exc}")
    meas = []
    for party in _PARTY_KEYS:
        text = get(f"meas.{party}", f"network.meas.{party}", "meas", "network.meas")
        if text is None:
            errors.append(f"meas.{party}: missing (set 'meas' or 'meas.{party}')")
            continue
        try:
            meas.append(parse_measurement(text))
        except ValidationError as exc:
            errors.append(f"meas.{party}: {exc}")
    if errors:
        raise ValidationError("; ".join(errors))
    return NetworkConfig(*srcs, *meas)


_TRAIN_TYPES = {"n_batch": int, "steps": int, "lr": float, "lr_final": float, "restarts": int, "loss": str,
                "seed": int, "delta_local": float, "n_eval": int, "log_every": int, "beta1": float,
                "beta2": float, "eps": float}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())


def model_spec_from_config(cfg: dict[str, str], errors: list[str]):
    from lhvnet.training import ModelSpec

    kw = {}
    try:
        if "model.layers" in cfg:
            kw["layers"] = LayerConfig(*_ints(cfg["model.layers"]))
    except (TypeError, ValueError, ValidationError) as exc:
        errors.append(f"model.layers: {exc}")
    try:
        if "model.widths" in cfg:
            kw["widths"] = _ints(cfg["model.widths"])
    except ValueError as exc:
        errors.append(f"model.widths: {exc}")
    try:
        mode = cfg.get("model.sharing", "independent")
        copies = int(cfg.get("model.copies", "1"))
        pair = _ints(cfg.get("model.pair", "0,1"))
        kw["sharing"] = Sharing(mode, copies, pair)
    except (ValueError, ValidationError) as exc:
        errors.append(f"model.sharing: {exc}")
    for key, conv in (("fourier", int), ("train_mixture", _bool)):
        if f"model.{key}" in cfg:
            try:
                kw[key] = conv(cfg[f"model.{key}"])
            except ValueError as exc:
                errors.append(f"model.{key}: {exc}")
    try:
        return ModelSpec(**kw)
    except ValidationError as exc:
        errors.append(f"model: {exc}")
        return None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def train_config_from_config(cfg: dict[str, str], errors: list[str]):
    from lhvnet.training import TrainConfig

    kw = {}
    for key, value in cfg.items():
        if not key.startswith("train."):
            continue
        name = key[len("train."):]
        if name not in _TRAIN_TYPES:
            errors.append(f"{key}: unknown key")
            continue
        try:
            kw[name] = _TRAIN_TYPES[name](value)
        except ValueError:
            errors.append(f"{key}: cannot parse {value!r}")
    if "seed" in cfg and "seed" not in kw:
        try:
            kw["seed"] = int(cfg["seed"])
        except ValueError:
            errors.append(f"seed: cannot parse {cfg['seed']!r}")
    try:
        return TrainConfig(**kw)
    except ValidationError as exc:
        errors.append(f"train: {exc}")
        return None


_MODEL_KEYS = {"layers", "widths", "sharing", "copies", "pair", "fourier", "train_mixture"}


def check_known_keys(cfg: dict[str, str], allowed_prefixes: tuple[str, ...], allowed: tuple[str, ...] = ()) -> list[str]:
    errors = []
    for key in cfg:
        if key in allowed or any(key.startswith(p) for p in allowed_prefixes):
            if key.startswith("model.") and key[len("model."):] not in _MODEL_KEYS:
                errors.append(f"{key}: unknown key")
            continue
        errors.append(f"{key}: unknown key")
    return errors


def sweep_spec_from_config(cfg: dict[str, str]):
    """Build a SweepSpec, reporting every offending key in one error."""
    from lhvnet.experiments import KINDS, SweepSpec, parse_axis, spec_problems

    errors = check_known_keys(cfg, ("grid.", "params.", "model.", "train."), ("sweep.kind", "sweep.seed", "seed"))
    kind = cfg.get("sweep.kind")
    if kind is None:
        errors.append("sweep.kind: missing")
    elif kind not in KINDS:
        errors.append(f"sweep.kind: unknown experiment {kind!r}")
    axes = []
    for key, value in cfg.items():
        if key.startswith("grid."):
            try:
                axes.append((key[len("grid."):], parse_axis(value)))
            except ValidationError as exc:
                errors.append(f"{key}: {exc}")
    if not axes:
        errors.append("grid: no axes given")
    params = {}
    for key, value in cfg.items():
        if key.startswith("params."):
            name = key[len("params."):]
            try:
                params[name] = float(value) if name in ("u2", "w2", "v", "p", "q", "s") else value
            except ValueError:
                errors.append(f"{key}: cannot parse {value!r}")
    if "params.count" in cfg:
        try:
            params["count"] = int(cfg["params.count"])
        except ValueError:
            errors.append(f"params.count: cannot parse {cfg['params.count']!r}")
    model = model_spec_from_config(cfg, errors)
    train_cfg = train_config_from_config({k: v for k, v in cfg.items() if k != "seed"}, errors)
    try:
        seed = int(cfg.get("sweep.seed", cfg.get("seed", "0")))
    except ValueError:
        errors.append("sweep.seed: not an integer")
        seed = 0
    if kind in KINDS:
        errors += spec_problems(kind, axes, params)
    spec = None
    if not errors:
        try:
            spec = SweepSpec(kind, tuple(axes), params, model, train_cfg, seed)
        except ValidationError as exc:
            errors.append(str(exc).removeprefix("invalid sweep spec: "))
    if errors:
        raise ValidationError("invalid sweep config: " + "; ".join(errors))
    return spec


# --------------------------------------------------------------------------- SVG plots


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="11">\n{body}\n</svg>\n')


def svg_line_plot(xs, ys, xlabel: str, ylabel: str, hline: float | None = None) -> str:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    W, H, pad = 480, 320, 50
    x0, x1 = (xs.min(), xs.max()) if xs.size and xs.max() > xs.min() else (0.0, 1.0)
    y0, y1 = 0.0, max(float(np.nanmax(ys)) if ys.size else 1.0, hline or 0.0, 1e-12) * 1.1
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (W - 2 * pad)  # noqa: E731
    sy = lambda y: H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)  # noqa: E731
    parts = [f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="#444"/>']
    if hline is not None:
        parts.append(f'<line x1="{pad}" x2="{W - pad}" y1="{sy(hline):.1f}" y2="{sy(hline):.1f}" '
                     f'stroke="#c33" stroke-dasharray="4 3"/>')
    pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#236" stroke-width="1.5"/>')
    parts += [f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="#236"/>' for x, y in zip(xs, ys)]
    parts.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{ylabel}</text>')
    parts.append(f'<text x="{pad}" y="{H - pad + 14}">{x0:.3g}</text>')
    parts.append(f'<text x="{W - pad}" y="{H - pad + 14}" text-anchor="end">{x1:.3g}</text>')
    parts.append(f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3g}</text>')
    return _svg(W, H, "\n".join(parts))


def svg_heatmap(xs, ys, values, xlabel: str, ylabel: str) -> str:
    """``values[i, j]`` at (xs[i], ys[j]); darker means larger."""
    xs, ys, values = np.asarray(xs), np.asarray(ys), np.asarray(values, float)
    W, H, pad = 420, 420, 50
    cw, ch = (W - 2 * pad) / len(xs), (H - 2 * pad) / len(ys)
    vmax = float(np.nanmax(values)) or 1.0
    parts = []
    for i in range(len(xs)):
        for j in range(len(ys)):
            shade = int(255 * (1 - values[i, j] / vmax)) if np.isfinite(values[i, j]) else 255
            parts.append(f'<rect x="{pad + i * cw:.1f}" y="{H - pad - (j + 1) * ch:.1f}" width="{cw:.1f}" '
                         f'height="{ch:.1f}" fill="rgb({shade},{shade},255)"/>')
    parts.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{ylabel}</text>')
    parts.append(f'<text x="{W - pad}" y="{pad - 8}" text-anchor="end">max {vmax:.3g}</text>')
    return _svg(W, H, "\n".join(parts))


def sweep_svg(result, delta_local: float | None = None) -> str:
    names = result.param_names
    dist = np.array(result.column("best_distance"), float)
    if len(names) == 1:
        xs = [r["params"][names[0]] for r in result.rows]
        order = np.argsort(xs)
        return svg_line_plot(np.asarray(xs)[order], dist[order], names[0], "best distance", delta_local)
    if len(names) == 2:
        xs = sorted({r["params"][names[0]] for r in result.rows})
        ys = sorted({r["params"][names[1]] for r in result.rows})
        grid = np.full((len(xs), len(ys)), np.nan)
        for r, d in zip(result.rows, dist):
            grid[xs.index(r["params"][names[0]]), ys.index(r["params"][names[1]])] = d
        return svg_heatmap(xs, ys, grid, names[0], names[1])
    raise ValidationError("plots support sweeps over one or two axes")
