"""Synthetic training scenarios: initial states, reference bands and
disturbance trajectories."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._io import atomic_write, fmt
from .errors import ConfigError, DataFileError

__all__ = [
    "ScenarioConfig", "Scenario", "Dataset", "sample_initial", "sample_band",
    "gen_disturbance", "generate", "batches", "batch_indices", "save", "load",
]

FORMAT_TAG = "ncgmm-dataset v1"


@dataclass(frozen=True)
class ScenarioConfig:
    n_train: int = 2000
    n_dev: int = 200
    horizon: int = 100
    init_lo: float = 10.0
    init_hi: float = 20.0
    band_lo: float = 12.0
    band_hi: float = 18.0
    band_width: float = 2.0
    # disturbance: AR(1) around d_basal, clamped to [0, d_basal + d_max]
    d_basal: float = 4.0
    d_rho: float = 0.9
    d_sigma: float = 0.1
    d_max: float = 1.0
    p_meal: float = 0.5

    def validate(self, prefix="scenarios"):
        if self.n_train < 1:
            raise ConfigError(f"{prefix}.n_train: must be >= 1, got {self.n_train}")
        if self.n_dev < 1:
            raise ConfigError(f"{prefix}.n_dev: must be >= 1, got {self.n_dev}")
        if self.horizon < 1:
            raise ConfigError(f"{prefix}.horizon: must be >= 1, got {self.horizon}")
        if not self.init_lo < self.init_hi:
            raise ConfigError(f"{prefix}.init_lo: must be < init_hi ({self.init_lo} >= {self.init_hi})")
        if not self.band_lo <= self.band_hi:
            raise ConfigError(f"{prefix}.band_lo: must be <= band_hi ({self.band_lo} > {self.band_hi})")
        if not self.band_width > 0:
            raise ConfigError(f"{prefix}.band_width: must be positive, got {self.band_width}")
        if not 0.0 <= self.d_rho < 1.0:
            raise ConfigError(f"{prefix}.d_rho: must lie in [0, 1), got {self.d_rho}")
        if self.d_sigma < 0:
            raise ConfigError(f"{prefix}.d_sigma: must be >= 0, got {self.d_sigma}")
        if self.d_max < 0:
            raise ConfigError(f"{prefix}.d_max: must be >= 0, got {self.d_max}")
        if self.d_basal < 0:
            raise ConfigError(f"{prefix}.d_basal: must be >= 0, got {self.d_basal}")
        if not 0.0 <= self.p_meal <= 1.0:
            raise ConfigError(f"{prefix}.p_meal: must lie in [0, 1], got {self.p_meal}")
        return self


@dataclass
class Scenario:
    id: int
    g0: np.ndarray       # (nx,)
    y_min: np.ndarray    # (N, ny)
    y_max: np.ndarray    # (N, ny)
    d: np.ndarray        # (N, nd)

    @property
    def N(self) -> int:
        return self.y_min.shape[0]

    def check(self):
        if self.y_max.shape != self.y_min.shape or self.d.shape[0] != self.N:
            raise ValueError(f"scenario {self.id}: band/disturbance lengths differ")
        if not np.all(self.y_min < self.y_max):
            raise ValueError(f"scenario {self.id}: y_min must be < y_max")
        for name in ("g0", "y_min", "y_max", "d"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"scenario {self.id}: non-finite {name}")
        return self

    def __eq__(self, other):
        return (isinstance(other, Scenario) and self.id == other.id
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("g0", "y_min", "y_max", "d")))


@dataclass
class Dataset:
    scenarios: list
    split: str
    seed: int
    N: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ValueError("scenario ids must be unique")

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    @cached_property
    def arrays(self):
        """Stacked ``(g0, y_min, y_max, d)`` with a leading scenario axis."""
        s = self.scenarios
        return (np.stack([x.g0 for x in s]), np.stack([x.y_min for x in s]),
                np.stack([x.y_max for x in s]), np.stack([x.d for x in s]))

    @property
    def dims(self):
        s = self.scenarios[0]
        return s.g0.shape[0], s.y_min.shape[1], s.d.shape[1]


def sample_initial(rng, nx=1, lo=10.0, hi=20.0) -> np.ndarray:
    if not lo < hi:
        raise ConfigError(f"scenarios.init_lo: must be < init_hi ({lo} >= {hi})")
    return rng.uniform(lo, hi, size=nx)


def sample_band(rng, N, ny=1, lo=12.0, hi=18.0, width=2.0):
    """Constant band over ``N`` steps; lower edge uniform on ``[lo, hi]``."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not width > 0:
        raise ConfigError(f"scenarios.band_width: must be positive, got {width}")
    low = rng.uniform(lo, hi, size=ny)
    y_min = np.tile(low, (N, 1))
    return y_min, y_min + width


def gen_disturbance(rng, N, nd=1, rho=0.9, sigma=0.1, d_max=1.0, p_meal=0.5,
                    d_basal=0.0, d0=None, window=None) -> np.ndarray:
    """Clipped AR(1) disturbance with random meal spikes, shape ``(N, nd)``.

    ``d[k+1] = clamp(d_basal + rho (d[k] - d_basal) + sigma eta, 0, d_basal + d_max)``

    Each window of ``window`` steps (default: the whole horizon) gets a
    meal with probability ``p_meal``: at a uniform step the level jumps by
    ``U[0.5 d_max, d_max]`` and then decays with the AR dynamics.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"scenarios.d_rho: must lie in [0, 1), got {rho}")
    if sigma < 0:
        raise ConfigError(f"scenarios.d_sigma: must be >= 0, got {sigma}")
    window = N if window is None else int(window)
    hi = d_basal + d_max
    n_win = -(-N // window)
    spikes = np.zeros((N, nd))
    for w in range(n_win):
        start = w * window
        length = min(window, N - start)
        # draw all three every window so the stream does not depend on p_meal
        hit = rng.random(nd) < p_meal
        at = rng.integers(0, length, size=nd)
        mag = rng.uniform(0.5 * d_max, d_max, size=nd)
        for j in range(nd):
            if hit[j]:
                spikes[start + at[j], j] = mag[j]
    eta = rng.standard_normal((N, nd))
    out = np.empty((N, nd))
    cur = np.full(nd, d_basal, dtype=np.float64) if d0 is None else np.array(d0, dtype=np.float64).reshape(nd)
    for k in range(N):
        cur = np.clip(cur + spikes[k], 0.0, hi)
        out[k] = cur
        cur = np.clip(d_basal + rho * (cur - d_basal) + sigma * eta[k], 0.0, hi)
    return out


def _make(rng, sid, cfg: ScenarioConfig, nx, ny, nd, N):
    g0 = sample_initial(rng, nx, cfg.init_lo, cfg.init_hi)
    y_min, y_max = sample_band(rng, N, ny, cfg.band_lo, cfg.band_hi, cfg.band_width)
    d = gen_disturbance(rng, N, nd, cfg.d_rho, cfg.d_sigma, cfg.d_max, cfg.p_meal, cfg.d_basal)
    return Scenario(sid, g0, y_min, y_max, d)


def generate(cfg: ScenarioConfig, seed: int, nx=1, ny=1, nd=1):
    """Build the train and dev datasets; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    N = cfg.horizon
    train_ss, dev_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(train_ss)
    train = [_make(rng, i, cfg, nx, ny, nd, N) for i in range(cfg.n_train)]
    rng = np.random.default_rng(dev_ss)
    dev = [_make(rng, cfg.n_train + i, cfg, nx, ny, nd, N) for i in range(cfg.n_dev)]
    return Dataset(train, "train", seed, N), Dataset(dev, "dev", seed, N)


def batch_indices(n: int, batch_size: int = 64, shuffle_seed=None) -> list:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int = 64, shuffle_seed=None) -> list:
    """Shuffled partition into batches; the last one may be short."""
    idx = batch_indices(len(dataset), batch_size, shuffle_seed)
    return [[dataset.scenarios[i] for i in b] for b in idx]


def _columns(name, n):
    return [name] if n == 1 else [f"{name}_{i}" for i in range(n)]


def header_columns(nx, ny, nd) -> list:
    return (["id", "k"] + _columns("g0", nx) + _columns("ymin", ny)
            + _columns("ymax", ny) + _columns("d", nd))


def save(dataset: Dataset, path) -> None:
    nx, ny, nd = dataset.dims
    buf = io.StringIO()
    buf.write(f"# {FORMAT_TAG}\n# split={dataset.split}\n# seed={dataset.seed}\n"
              f"# N={dataset.N}\n# count={len(dataset)}\n# nx={nx}\n# ny={ny}\n# nd={nd}\n")
    buf.write(",".join(header_columns(nx, ny, nd)) + "\n")
    for s in dataset.scenarios:
        g0 = [fmt(v) for v in s.g0]
        for k in range(dataset.N):
            row = ([str(s.id), str(k)] + g0 + [fmt(v) for v in s.y_min[k]]
                   + [fmt(v) for v in s.y_max[k]] + [fmt(v) for v in s.d[k]])
            buf.write(",".join(row) + "\n")
    atomic_write(path, buf.getvalue())


def load(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if "=" in body:
            key, val = body.split("=", 1)
            meta[key.strip()] = val.strip()
        elif body != FORMAT_TAG:
            raise DataFileError(f"{path}: unrecognized preamble line {lines[i]!r}")
        i += 1
    try:
        split, seed, N, count = meta["split"], int(meta["seed"]), int(meta["N"]), int(meta["count"])
        nx, ny, nd = int(meta["nx"]), int(meta["ny"]), int(meta["nd"])
    except (KeyError, ValueError) as exc:
        raise DataFileError(f"{path}: missing or malformed preamble ({exc})") from None
    cols = header_columns(nx, ny, nd)
    if i >= len(lines) or lines[i].strip().split(",") != cols:
        raise DataFileError(f"{path}: expected header {','.join(cols)}")
    body = [ln for ln in lines[i + 1:] if ln.strip()]
    if len(body) != N * count:
        raise DataFileError(f"{path}: expected {count} scenarios x N={N} rows, found {len(body)} rows")
    try:
        table = np.array([[float(v) for v in ln.split(",")] for ln in body]) if body else np.zeros((0, len(cols)))
    except ValueError as exc:
        raise DataFileError(f"{path}: malformed row ({exc})") from None
    if table.ndim != 2 or table.shape[1] != len(cols):
        raise DataFileError(f"{path}: rows must have {len(cols)} fields")
    table = table.reshape(count, N, len(cols))
    scenarios = []
    for block in table:
        sid = block[0, 0]
        if np.any(block[:, 0] != sid) or np.any(block[:, 1] != np.arange(N)):
            raise DataFileError(f"{path}: scenario {sid:g} rows are not k=0..{N - 1}")
        g0 = block[0, 2:2 + nx]
        if np.any(block[:, 2:2 + nx] != g0):
            raise DataFileError(f"{path}: scenario {sid:g} has inconsistent g0")
        c = 2 + nx
        scenarios.append(Scenario(int(sid), g0.copy(), block[:, c:c + ny].copy(),
                                  block[:, c + ny:c + 2 * ny].copy(),
                                  block[:, c + 2 * ny:c + 2 * ny + nd].copy()))
    try:
        return Dataset(scenarios, split, seed, N)
    except ValueError as exc:
        raise DataFileError(f"{path}: {exc}") from None
