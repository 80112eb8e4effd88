"""Long closed-loop simulation of a trained policy, metrics, and
trajectory export (CSV and a self-contained SVG plot)."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write, fmt
from .errors import DataFileError, ShapeError
from .plant import LinearSSM, observe, step
from .policy import MlpPolicy, build_features
from .scenarios import ScenarioConfig, gen_disturbance, sample_band, sample_initial

__all__ = [
    "Trajectory", "Metrics", "simulate", "metrics", "aggregate", "export_csv", "read_csv",
    "render_svg", "write_metrics",
]


@dataclass
class Trajectory:
    """Per-step record; row ``k`` holds the state *before* ``u[k]`` is applied."""

    g: np.ndarray       # (S, nx); None when read back from CSV
    y: np.ndarray       # (S, ny)
    u: np.ndarray       # (S, nu)
    d: np.ndarray       # (S, nd)
    y_min: np.ndarray   # (S, ny)
    y_max: np.ndarray   # (S, ny)

    def __len__(self):
        return self.y.shape[0]

    @property
    def k(self):
        return np.arange(len(self))


def simulate(model: LinearSSM, policy: MlpPolicy, steps=3000, seed=0, band_dwell=500,
             scenario_cfg: ScenarioConfig = ScenarioConfig(), policy_fn=None) -> Trajectory:
    """Run the closed loop for ``steps`` steps without taping.

    The band is redrawn every ``band_dwell`` steps from the training band
    distribution; disturbances come from the training process, with one
    meal draw per ``scenario_cfg.horizon`` steps.  ``policy_fn`` overrides
    the policy with any ``features -> u`` callable.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if band_dwell < 1:
        raise ValueError(f"band_dwell must be >= 1, got {band_dwell}")
    act = policy_fn if policy_fn is not None else policy.act
    if policy_fn is None and (policy.in_dim != 3 * model.ny + model.nd or policy.nu != model.nu):
        raise ShapeError(f"policy (in={policy.in_dim}, nu={policy.nu}) incompatible with plant "
                         f"(in={3 * model.ny + model.nd}, nu={model.nu})")
    c = scenario_cfg
    rng = np.random.default_rng(seed)
    g = sample_initial(rng, model.nx, c.init_lo, c.init_hi)
    y_min = np.empty((steps, model.ny))
    y_max = np.empty((steps, model.ny))
    for start in range(0, steps, band_dwell):
        n = min(band_dwell, steps - start)
        lo, hi = sample_band(rng, n, model.ny, c.band_lo, c.band_hi, c.band_width)
        y_min[start:start + n] = lo
        y_max[start:start + n] = hi
    d = gen_disturbance(rng, steps, model.nd, c.d_rho, c.d_sigma, c.d_max, c.p_meal,
                        c.d_basal, window=c.horizon)
    G = np.empty((steps, model.nx))
    Y = np.empty((steps, model.ny))
    U = np.empty((steps, model.nu))
    for k in range(steps):
        y = observe(model, g)
        u = np.asarray(act(build_features(y, y_min[k], y_max[k], d[k])), dtype=np.float64)
        G[k], Y[k], U[k] = g, y, u
        g = step(model, g, u, d[k])
    return Trajectory(G, Y, U, d, y_min, y_max)


@dataclass
class Metrics:
    time_in_band_fraction: float
    mean_abs_du: float
    band_violation_count: int
    max_band_excursion: float
    mean_u: float
    control_bound_fraction: float
    transient: int
    steps: int

    def as_text(self) -> str:
        return "".join(f"{k}={_fmt_val(v)}\n" for k, v in asdict(self).items())


def _fmt_val(v):
    return str(v) if isinstance(v, (int, np.integer)) else fmt(v)


def metrics(traj: Trajectory, transient=200, u_min=None, u_max=None) -> Metrics:
    """Band and control statistics, scoring steps ``k >= transient``.

    ``mean_abs_du`` and ``mean_u`` use every step.  When bounds are given
    ``control_bound_fraction`` is the share of steps with ``u`` inside them.
    """
    S = len(traj)
    if transient < 0:
        raise ValueError("transient must be >= 0")
    if S <= transient:
        raise ValueError(f"trajectory of {S} steps is too short for transient={transient}")
    y = traj.y[transient:]
    below = np.maximum(traj.y_min[transient:] - y, 0.0)
    above = np.maximum(y - traj.y_max[transient:], 0.0)
    outside = np.any((below > 0) | (above > 0), axis=1)
    du = np.abs(np.diff(traj.u, axis=0))
    if u_min is not None:
        ok = np.all((traj.u >= u_min) & (traj.u <= u_max), axis=1)
        bound_frac = float(ok.mean())
    else:
        bound_frac = float("nan")
    return Metrics(
        time_in_band_fraction=float(1.0 - outside.mean()),
        mean_abs_du=float(du.mean()) if du.size else 0.0,
        band_violation_count=int(outside.sum()),
        max_band_excursion=float(np.max(np.maximum(below, above))),
        mean_u=float(traj.u.mean()),
        control_bound_fraction=bound_frac,
        transient=int(transient),
        steps=int(S),
    )


def aggregate(items: list) -> Metrics:
    """Combine metrics from several runs (means, summed counts, worst excursion)."""
    if not items:
        raise ValueError("nothing to aggregate")
    return Metrics(
        time_in_band_fraction=float(np.mean([m.time_in_band_fraction for m in items])),
        mean_abs_du=float(np.mean([m.mean_abs_du for m in items])),
        band_violation_count=int(sum(m.band_violation_count for m in items)),
        max_band_excursion=float(max(m.max_band_excursion for m in items)),
        mean_u=float(np.mean([m.mean_u for m in items])),
        control_bound_fraction=float(np.mean([m.control_bound_fraction for m in items])),
        transient=items[0].transient,
        steps=int(sum(m.steps for m in items)),
    )


def write_metrics(m: Metrics, out_dir, extra=None) -> None:
    out_dir = Path(out_dir)
    atomic_write(out_dir / "metrics.txt", m.as_text())
    payload = {**asdict(m), **(extra or {})}
    atomic_write(out_dir / "metrics.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cols(name, n):
    return [name] if n == 1 else [f"{name}_{i}" for i in range(n)]


def csv_columns(ny, nu, nd):
    return ["k"] + _cols("y", ny) + _cols("u", nu) + _cols("d", nd) + _cols("ymin", ny) + _cols("ymax", ny)


def export_csv(traj: Trajectory, path) -> None:
    """Write ``k,y,u,d,ymin,ymax`` with 17 significant digits."""
    if len(traj) == 0:
        raise ValueError("refusing to export an empty trajectory")
    ny, nu, nd = traj.y.shape[1], traj.u.shape[1], traj.d.shape[1]
    buf = io.StringIO()
    buf.write(",".join(csv_columns(ny, nu, nd)) + "\n")
    for k in range(len(traj)):
        vals = [*traj.y[k], *traj.u[k], *traj.d[k], *traj.y_min[k], *traj.y_max[k]]
        buf.write(str(k) + "," + ",".join(fmt(v) for v in vals) + "\n")
    atomic_write(path, buf.getvalue())


def read_csv(path, ny=1, nu=1, nd=1) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    cols = csv_columns(ny, nu, nd)
    if not lines or lines[0].split(",") != cols:
        raise DataFileError(f"{path}: expected header {','.join(cols)}")
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln], dtype=np.float64)
    except ValueError as exc:
        raise DataFileError(f"{path}: malformed row ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(cols) or data.shape[0] == 0:
        raise DataFileError(f"{path}: expected rows of {len(cols)} fields")
    if np.any(data[:, 0] != np.arange(data.shape[0])):
        raise DataFileError(f"{path}: step column is not 0..{data.shape[0] - 1}")
    c = 1
    y = data[:, c:c + ny]; c += ny
    u = data[:, c:c + nu]; c += nu
    d = data[:, c:c + nd]; c += nd
    lo = data[:, c:c + ny]; c += ny
    hi = data[:, c:c + ny]
    return Trajectory(None, y, u, d, lo, hi)


# ---------------------------------------------------------------- SVG ----

_W, _PANEL_H, _PAD_L, _PAD_R, _PAD_T, _GAP = 960, 200, 60, 20, 30, 40
_COLORS = {"y": "#0072b2", "band": "#009e73", "u": "#d55e00", "d": "#cc79a7"}


def _scale(lo, hi):
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _points(xs, ys):
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def render_svg(traj: Trajectory, path, title="closed-loop trajectory") -> None:
    """Three stacked panels: output with band envelope, control, disturbance."""
    S = len(traj)
    if S == 0:
        raise ValueError("refusing to render an empty trajectory")
    plot_w = _W - _PAD_L - _PAD_R
    xs = _PAD_L + (np.arange(S) / max(S - 1, 1)) * plot_w
    panels = [
        ("y", [traj.y[:, 0]], (traj.y_min[:, 0], traj.y_max[:, 0])),
        ("u", [traj.u[:, j] for j in range(traj.u.shape[1])], None),
        ("d", [traj.d[:, j] for j in range(traj.d.shape[1])], None),
    ]
    height = _PAD_T + len(panels) * (_PANEL_H + _GAP)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{height}" '
           f'viewBox="0 0 {_W} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{height}" fill="white"/>',
           f'<text x="{_PAD_L}" y="18" font-size="14">{title}</text>']
    for p, (name, series, band) in enumerate(panels):
        top = _PAD_T + p * (_PANEL_H + _GAP)
        values = np.concatenate(series + (list(band) if band else []))
        lo, hi = _scale(float(np.min(values)), float(np.max(values)))

        def sy(v, top=top, lo=lo, hi=hi):
            return top + _PANEL_H - (np.asarray(v) - lo) / (hi - lo) * _PANEL_H

        out.append(f'<rect x="{_PAD_L}" y="{top}" width="{plot_w}" height="{_PANEL_H}" '
                   f'fill="none" stroke="#888"/>')
        for frac in (0.0, 0.5, 1.0):
            v = lo + frac * (hi - lo)
            out.append(f'<text x="{_PAD_L - 6}" y="{sy(v):.2f}" text-anchor="end" '
                       f'dominant-baseline="middle">{v:.2f}</text>')
        out.append(f'<text x="{_PAD_L + 6}" y="{top + 14}">{name}</text>')
        if band is not None:
            lower, upper = band
            poly = _points(xs, sy(upper)) + " " + _points(xs[::-1], sy(lower)[::-1])
            out.append(f'<polygon points="{poly}" fill="{_COLORS["band"]}" fill-opacity="0.2" '
                       f'stroke="{_COLORS["band"]}" stroke-width="0.8"/>')
        for s in series:
            out.append(f'<polyline points="{_points(xs, sy(s))}" fill="none" '
                       f'stroke="{_COLORS[name]}" stroke-width="1"/>')
    out.append(f'<text x="{_PAD_L + plot_w / 2:.2f}" y="{height - 8}" text-anchor="middle">'
               f'step k (0..{S - 1})</text>')
    out.append("</svg>")
    atomic_write(path, "\n".join(out) + "\n")
