"""Synthetic geospatial regression datasets and CSV round-tripping.

Two generators are provided.  ``generate_gwr`` lays points on a regular grid
and combines two covariates with smoothly varying coefficient surfaces (a
linear ramp and a Gaussian bump), which plants real spatial heterogeneity in
the target.  ``generate_sl`` draws points uniformly and mixes the target
through a spatial-lag process ``y = (I - rho*W)^-1 (X beta + eps)`` over
row-standardised 8-nearest-neighbour weights, which plants spatial
autocorrelation.

All randomness comes from numpy's default PCG64 generator seeded explicitly,
and the draw order is fixed (covariates first, then noise), so a dataset is a
pure function of ``(generator, n, seed, params)``.  CSV files are written with
17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .autodiff import ContractError
from .kdtree import KdTree
from .spatial import PointRecord

__all__ = [
    "GeoDataset",
    "CsvFormatError",
    "generate_gwr",
    "generate_sl",
    "gwr_beta1",
    "gwr_beta2",
    "save_csv",
    "load_csv",
]

GWR_NOISE_SD = 0.25
SL_NOISE_SD = 0.5
SL_BETA = (2.0, 3.0)
SL_N_NEIGHBORS = 8


class CsvFormatError(ValueError):
    """A dataset CSV violates the ``id,u,v,x1..xp,y`` schema."""


@dataclass
class GeoDataset:
    """Id-keyed rows of (2-D coordinates, p covariates, target)."""

    points: list[PointRecord]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def p(self) -> int:
        return len(self.points[0].x)

    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.points], dtype=np.int64)

    def coords(self) -> np.ndarray:
        return np.array([[r.u, r.v] for r in self.points])

    def covariates(self) -> np.ndarray:
        return np.array([r.x for r in self.points])

    def targets(self) -> np.ndarray:
        return np.array([r.y for r in self.points])


def gwr_beta1(u, v):
    """Linear-ramp coefficient surface: 0 at the origin, 3 at (1, 1)."""
    return 1.5 * (np.asarray(u) + np.asarray(v))


def gwr_beta2(u, v):
    """Gaussian-bump coefficient surface peaking at 3.0 in the square's centre."""
    r2 = (np.asarray(u) - 0.5) ** 2 + (np.asarray(v) - 0.5) ** 2
    return 1.0 + 2.0 * np.exp(-r2 / 0.1)


def generate_gwr(n: int, seed: int) -> GeoDataset:
    """Grid dataset whose target mixes x1, x2 with spatially varying slopes."""
    if n < 100:
        raise ContractError(f"need n >= 100, got {n}")
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"n must be a perfect square for the grid layout, got {n}")

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    eps = GWR_NOISE_SD * rng.standard_normal(n)

    centers = (np.arange(side) + 0.5) / side
    uu, vv = np.meshgrid(centers, centers, indexing="ij")
    u = uu.ravel()
    v = vv.ravel()
    y = gwr_beta1(u, v) * x[:, 0] + gwr_beta2(u, v) * x[:, 1] + eps

    points = [
        PointRecord(i, float(u[i]), float(v[i]), x[i].copy(), float(y[i]))
        for i in range(n)
    ]
    meta = {
        "generator": "gwr-r",
        "seed": int(seed),
        "params": {"n": int(n), "noise_sd": GWR_NOISE_SD},
    }
    return GeoDataset(points, meta)


def _sl_weights(coords: np.ndarray) -> sp.csr_matrix:
    """Row-standardised directed 8-nearest-neighbour adjacency."""
    n = coords.shape[0]
    tree = KdTree(coords, np.arange(n))
    rows, cols = [], []
    for i in range(n):
        hits = tree.knn(coords[i], SL_N_NEIGHBORS + 1)
        neigh = [pid for pid, _ in hits if pid != i][:SL_N_NEIGHBORS]
        rows.extend([i] * len(neigh))
        cols.extend(neigh)
    vals = np.full(len(rows), 1.0 / SL_N_NEIGHBORS)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def generate_sl(n: int, seed: int, rho: float = 0.6) -> GeoDataset:
    """Uniform-coordinate dataset with a spatial-lag (autocorrelated) target."""
    if n < 100:
        raise ContractError(f"need n >= 100, got {n}")
    if not abs(rho) < 1:
        raise ContractError(f"need |rho| < 1, got {rho}")

    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    x = rng.standard_normal((n, 2))
    eps = SL_NOISE_SD * rng.standard_normal(n)

    b = x @ np.asarray(SL_BETA) + eps
    w = _sl_weights(coords)
    a = sp.identity(n, format="csr") - rho * w
    y = spsolve(a.tocsc(), b)
    resid = np.abs(a @ y - b).max()
    if not resid <= 1e-10:
        raise ContractError(f"spatial-lag solve residual {resid:.3e} exceeds 1e-10")

    points = [
        PointRecord(i, float(coords[i, 0]), float(coords[i, 1]), x[i].copy(), float(y[i]))
        for i in range(n)
    ]
    meta = {
        "generator": "sl-r",
        "seed": int(seed),
        "params": {"n": int(n), "rho": float(rho), "noise_sd": SL_NOISE_SD,
                   "beta": list(SL_BETA), "k_neighbors": SL_N_NEIGHBORS},
    }
    return GeoDataset(points, meta)


# ---------------------------------------------------------------------------
# CSV schema: id,u,v,x1,...,xp,y   (y optional for pure-query files)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_csv(ds: GeoDataset, path) -> None:
    """Write ``id,u,v,x1..xp,y`` plus a ``.meta.json`` sidecar."""
    path = Path(path)
    p = ds.p
    header = ["id", "u", "v"] + [f"x{j + 1}" for j in range(p)] + ["y"]
    lines = [",".join(header)]
    for r in ds.points:
        cells = [str(r.id), _fmt(r.u), _fmt(r.v)]
        cells.extend(_fmt(val) for val in r.x)
        cells.append("" if r.y is None else _fmt(r.y))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if ds.meta:
        sidecar = path.with_suffix(path.suffix + ".meta.json")
        sidecar.write_text(json.dumps(ds.meta, sort_keys=True, indent=2) + "\n",
                           encoding="utf-8")


def load_csv(path) -> GeoDataset:
    """Parse a dataset CSV, inferring p from the ``x1..xp`` columns."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CsvFormatError(f"{path}: empty file")

    header = [h.strip() for h in lines[0].split(",")]
    has_y = header[-1] == "y"
    x_names = header[3:-1] if has_y else header[3:]
    expected = ["id", "u", "v"] + [f"x{j + 1}" for j in range(len(x_names))]
    actual = header[:-1] if has_y else header
    if actual != expected:
        for want, got in zip(expected, actual + ["<missing>"] * len(expected)):
            if want != got:
                raise CsvFormatError(f"{path}: expected column '{want}', found '{got}'")
        raise CsvFormatError(f"{path}: malformed header {header}")
    p = len(x_names)

    points = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise CsvFormatError(
                f"{path}: line {lineno}: expected {len(header)} cells, found {len(cells)}"
            )

        def parse(col_idx, caster):
            cell = cells[col_idx].strip()
            try:
                return caster(cell)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {lineno}, column '{header[col_idx]}': "
                    f"could not parse {cells[col_idx]!r}"
                ) from None

        pid = parse(0, int)
        u = parse(1, float)
        v = parse(2, float)
        x = np.array([parse(3 + j, float) for j in range(p)])
        y = None
        if has_y:
            cell = cells[3 + p].strip()
            y = None if cell == "" else parse(3 + p, float)
        points.append(PointRecord(pid, u, v, x, y))

    meta = {}
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return GeoDataset(points, meta)
