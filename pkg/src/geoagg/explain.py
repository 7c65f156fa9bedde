"""Shapley-style explanation with a joint location player.

Each prediction is decomposed into four parts: a base value (the mean
prediction over background rows), an intrinsic location effect, per-feature
effects, and per-feature location interactions:

    prediction = phi0 + phi_geo + sum_j phi_j + sum_j phi_geo_j

Location is one joint player, so the two coordinates are always swapped in and
out together, never mixed across background rows.  The game has ``p + 1``
players (player 0 is location) and is solved by exact coalition enumeration,
which makes the identity above hold to float precision at desk scale; a
kernel-weighted least-squares estimator (optionally subset-sampled) is
available as an alternative.  The pairwise location/feature interaction is the
Shapley interaction index, split half-and-half between the two mains so the
four components still sum to the prediction.

For attention models whose input sequences come from neighbour lookups, the
:func:`make_shap_predictor` wrapper keys every row by its original point id:
perturbing a row's coordinates or covariates changes what the model sees, but
the context sequence is always rebuilt from the id's true neighbours.  Rows
substituted from the background carry the background point's id, so the base
value is the genuine mean prediction of the background points.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .model import ModelConfig, ModelParams, forward_batch
from .spatial import (
    ContextPool,
    SequenceLookupError,
    neighbor_budget,
    precompute_neighbors,
    QueryPool,
    subset_indices,
)

_BATCH_ROWS = 512

__all__ = [
    "GEO_PLAYER",
    "RowBatch",
    "GeoShapleyResult",
    "shapley_exact",
    "shapley_kernel_ls",
    "interaction_index",
    "coalition_value",
    "coalition_values",
    "make_shap_predictor",
    "geoshapley_explain",
    "local_coefficients",
    "write_explanations_csv",
]

GEO_PLAYER = 0
MAX_EXACT_PLAYERS = 20


@dataclass
class RowBatch:
    """Rows a predictor consumes: point ids, planar coords, covariates."""

    ids: np.ndarray     # (n,)
    coords: np.ndarray  # (n, 2)
    x: np.ndarray       # (n, p)

    @classmethod
    def from_records(cls, records) -> "RowBatch":
        return cls(
            ids=np.array([r.id for r in records], dtype=np.int64),
            coords=np.array([[r.u, r.v] for r in records]),
            x=np.array([r.x for r in records]),
        )

    def __len__(self):
        return len(self.ids)

    def row(self, i: int):
        return self.ids[i], self.coords[i], self.x[i]


@dataclass
class GeoShapleyResult:
    """Per-row decomposition into base, location, feature, interaction parts."""

    ids: np.ndarray
    phi0: float
    phi_geo: np.ndarray    # (n,)
    phi: np.ndarray        # (n, p)
    phi_geo_x: np.ndarray  # (n, p)

    def reconstruct(self) -> np.ndarray:
        """Sum of all components; equals the model predictions row by row."""
        return self.phi0 + self.phi_geo + self.phi.sum(axis=1) + self.phi_geo_x.sum(axis=1)


def _check_player_count(n_players: int) -> None:
    if n_players < 1:
        raise ContractError("need at least one player")
    if n_players > MAX_EXACT_PLAYERS:
        raise ContractError(
            f"{n_players} players exceeds the exact-enumeration bound of "
            f"{MAX_EXACT_PLAYERS}; use shapley_kernel_ls with subset sampling"
        )


def shapley_exact(values: np.ndarray, n_players: int) -> np.ndarray:
    """Classic Shapley values from all ``2**n_players`` coalition values.

    ``values[mask]`` is the coalition value for the bitmask ``mask`` (bit a set
    means player a present).  phi_a is the factorial-weighted sum of marginal
    contributions over all coalitions not containing a.
    """
    _check_player_count(n_players)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != 2 ** n_players:
        raise ContractError(
            f"expected {2 ** n_players} coalition values, got {values.size}"
        )
    fact = [math.factorial(i) for i in range(n_players + 1)]
    denom = fact[n_players]
    weights = [fact[s] * fact[n_players - s - 1] / denom for s in range(n_players)]

    phi = np.zeros(n_players)
    for mask in range(2 ** n_players):
        size = bin(mask).count("1")
        for a in range(n_players):
            if not mask & (1 << a):
                phi[a] += weights[size] * (values[mask | (1 << a)] - values[mask])
    return phi


def shapley_kernel_ls(values: np.ndarray, n_players: int,
                      n_samples: int | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Kernel-weighted least-squares Shapley estimate.

    With ``n_samples=None`` every proper coalition enters the regression and
    the result matches exact enumeration; with ``n_samples`` set, that many
    coalitions are drawn (sizes proportional to the kernel weights), trading
    exactness for cost when enumeration is out of reach.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != 2 ** n_players:
        raise ContractError(
            f"expected {2 ** n_players} coalition values, got {values.size}"
        )
    full = 2 ** n_players - 1
    if n_samples is None:
        masks = [m for m in range(1, full)]
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        size_w = np.array(
            [(n_players - 1) / (s * (n_players - s)) for s in range(1, n_players)]
        )
        size_w = size_w / size_w.sum()
        masks = []
        for _ in range(n_samples):
            s = int(rng.choice(np.arange(1, n_players), p=size_w))
            members = rng.choice(n_players, size=s, replace=False)
            masks.append(int(sum(1 << int(a) for a in members)))

    design = np.zeros((len(masks), n_players))
    weights = np.zeros(len(masks))
    targets = np.zeros(len(masks))
    for i, mask in enumerate(masks):
        s = bin(mask).count("1")
        for a in range(n_players):
            design[i, a] = 1.0 if mask & (1 << a) else 0.0
        weights[i] = (n_players - 1) / (math.comb(n_players, s) * s * (n_players - s))
        targets[i] = values[mask] - values[0]

    # efficiency constraint folded in by eliminating the last player
    gap = values[full] - values[0]
    reduced = design[:, :-1] - design[:, -1:]
    rhs = targets - design[:, -1] * gap
    sw = np.sqrt(weights)
    sol, *_ = np.linalg.lstsq(reduced * sw[:, None], rhs * sw, rcond=None)
    phi = np.empty(n_players)
    phi[:-1] = sol
    phi[-1] = gap - sol.sum()
    return phi


def interaction_index(values: np.ndarray, n_players: int, a: int, b: int) -> float:
    """Shapley interaction index between players ``a`` and ``b``.

    The coalition-weighted mixed difference
    ``v(S+{a,b}) - v(S+{a}) - v(S+{b}) + v(S)`` over all S excluding a and b.
    """
    _check_player_count(n_players)
    if a == b:
        raise ContractError("interaction index needs two distinct players")
    values = np.asarray(values, dtype=np.float64).ravel()
    fact = [math.factorial(i) for i in range(n_players)]
    denom = fact[n_players - 1]
    others = [i for i in range(n_players) if i not in (a, b)]
    total = 0.0
    for r in range(len(others) + 1):
        weight = fact[r] * fact[n_players - r - 2] / denom
        for combo in itertools.combinations(others, r):
            mask = sum(1 << i for i in combo)
            mixed = (
                values[mask | (1 << a) | (1 << b)]
                - values[mask | (1 << a)]
                - values[mask | (1 << b)]
                + values[mask]
            )
            total += weight * mixed
    return total


# ---------------------------------------------------------------------------
# coalition evaluation
# ---------------------------------------------------------------------------


def _coalition_rows(instance_row, mask: int, background: RowBatch):
    """Background-substituted rows for one coalition.

    Players in the coalition take the instance's values; absent players take
    each background row's values.  The location player carries both the (u, v)
    pair and the point id, so ids always match the row whose location is used.
    """
    inst_id, inst_coord, inst_x = instance_row
    n_bg = len(background)
    p = background.x.shape[1]
    if mask & (1 << GEO_PLAYER):
        ids = np.full(n_bg, inst_id, dtype=np.int64)
        coords = np.tile(inst_coord, (n_bg, 1))
    else:
        ids = background.ids.copy()
        coords = background.coords.copy()
    x = background.x.copy()
    for j in range(p):
        if mask & (1 << (j + 1)):
            x[:, j] = inst_x[j]
    return ids, coords, x


def coalition_value(predictor, instance_row, mask: int, background: RowBatch) -> float:
    """Mean prediction over background substitutions for one coalition."""
    if len(background) == 0:
        raise ContractError("background must not be empty")
    ids, coords, x = _coalition_rows(instance_row, mask, background)
    return float(np.mean(predictor(ids, coords, x)))


def coalition_values(predictor, instance_row, background: RowBatch,
                     n_players: int) -> np.ndarray:
    """Values for every coalition bitmask, via one batched predictor call."""
    if len(background) == 0:
        raise ContractError("background must not be empty")
    n_bg = len(background)
    all_ids, all_coords, all_x = [], [], []
    for mask in range(2 ** n_players):
        ids, coords, x = _coalition_rows(instance_row, mask, background)
        all_ids.append(ids)
        all_coords.append(coords)
        all_x.append(x)
    preds = predictor(
        np.concatenate(all_ids),
        np.concatenate(all_coords),
        np.concatenate(all_x),
    )
    preds = np.asarray(preds, dtype=np.float64).reshape(2 ** n_players, n_bg)
    return preds.mean(axis=1)


class ShapPredictor:
    """Batched row predictor for the attention model, keyed by point id.

    Context sequences are always rebuilt from the true neighbours of each
    row's id (cached once per id); the row's possibly perturbed coordinates
    and covariates feed only the model's own input channels.  By default one
    deterministic member is used so Shapley identities are exact; set
    ``members > 1`` for ensemble-mean explanations.
    """

    def __init__(self, params: ModelParams, config: ModelConfig,
                 context: ContextPool, points, members: int = 1,
                 expansion: float = 1.0, seed: int = 0):
        self.params = params
        self.config = config
        self.context = context
        self.members = members
        self.expansion = expansion
        self.seed = seed
        self._cand_arrays: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        records = points.points if hasattr(points, "points") else points.records
        pool = QueryPool(records)
        self._cache = precompute_neighbors(
            pool, context, neighbor_budget(config.l_max, expansion)
        )

    def _member_rng(self, member: int, pid: int) -> np.random.Generator:
        # keyed per (member, id) so the same row always draws the same subset,
        # whatever order rows arrive in
        return np.random.default_rng([self.seed, member, pid])

    def neighbor_ids(self, pid: int, member: int = 0):
        """Context ids one member's sequence would use for ``pid``."""
        entry = self._entry(pid)
        rng = self._member_rng(member, pid)
        return [entry[i][0]
                for i in subset_indices(entry, pid, self.config.l_max, rng)]

    def _entry(self, pid: int):
        if pid not in self._cache:
            # rows substituted from the background carry context-pool ids;
            # their true neighbourhoods are filled in on first use
            rec = self.context.by_id.get(pid)
            if rec is None:
                raise SequenceLookupError(f"unknown point id {pid}")
            self._cache.entries[pid] = self.context.tree.knn((rec.u, rec.v), self._cache.k)
        return self._cache[pid]

    def __call__(self, ids, coords, x) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        coords = np.asarray(coords, dtype=np.float64).reshape(len(ids), 2)
        x = np.asarray(x, dtype=np.float64).reshape(len(ids), -1)
        n = len(ids)
        p = self.params.p
        l_max = self.config.l_max
        out = np.zeros(n)
        feats = np.empty((n, l_max, p + 1))
        seq_coords = np.empty((n, l_max, 2))
        for member in range(self.members):
            for i in range(n):
                pid = int(ids[i])
                entry = self._entry(pid)
                idx = subset_indices(entry, pid, l_max,
                                     self._member_rng(member, pid))
                cand_feats, cand_coords = self._candidates(pid, entry)
                feats[i, 0, :p] = x[i]
                feats[i, 0, p] = 0.0
                feats[i, 1:] = cand_feats[idx]
                seq_coords[i, 0] = coords[i]
                seq_coords[i, 1:] = cand_coords[idx]
            for start in range(0, n, _BATCH_ROWS):
                stop = min(start + _BATCH_ROWS, n)
                out[start:stop] += forward_batch(feats[start:stop],
                                                 seq_coords[start:stop],
                                                 self.params, self.config)
        return out / self.members

    def _candidates(self, pid: int, entry):
        cached = self._cand_arrays.get(pid)
        if cached is None:
            p = self.params.p
            cand_feats = np.empty((len(entry), p + 1))
            cand_coords = np.empty((len(entry), 2))
            for i, (cid, _) in enumerate(entry):
                rec = self.context.by_id[cid]
                cand_feats[i, :p] = rec.x
                cand_feats[i, p] = rec.y
                cand_coords[i, 0] = rec.u
                cand_coords[i, 1] = rec.v
            cached = (cand_feats, cand_coords)
            self._cand_arrays[pid] = cached
        return cached


def make_shap_predictor(params: ModelParams, config: ModelConfig,
                        context: ContextPool, points,
                        members: int = 1, expansion: float = 1.0,
                        seed: int = 0) -> ShapPredictor:
    """Predictor over (id, coords, covariates) rows for post-hoc explainers.

    ``points`` supplies the true records (dataset or pool) whose ids may later
    appear in perturbed rows; their neighbourhoods are precomputed here.
    """
    return ShapPredictor(params, config, context, points,
                         members=members, expansion=expansion, seed=seed)


def geoshapley_explain(predictor, instances: RowBatch,
                       background: RowBatch) -> GeoShapleyResult:
    """Exact location-aware Shapley decomposition for every instance row."""
    if instances.x.shape[1] != background.x.shape[1]:
        raise ContractError("instances and background must share the covariate schema")
    p = instances.x.shape[1]
    n_players = p + 1
    _check_player_count(n_players)

    n = len(instances)
    phi_geo = np.zeros(n)
    phi = np.zeros((n, p))
    phi_geo_x = np.zeros((n, p))
    phi0 = 0.0
    for i in range(n):
        values = coalition_values(predictor, instances.row(i), background, n_players)
        phi0 = float(values[0])
        raw = shapley_exact(values, n_players)
        sii = np.array([
            interaction_index(values, n_players, GEO_PLAYER, j + 1) for j in range(p)
        ])
        phi_geo_x[i] = sii
        phi[i] = raw[1:] - sii / 2.0
        phi_geo[i] = raw[GEO_PLAYER] - sii.sum() / 2.0
    return GeoShapleyResult(ids=instances.ids.copy(), phi0=phi0,
                            phi_geo=phi_geo, phi=phi, phi_geo_x=phi_geo_x)


def local_coefficients(result: GeoShapleyResult, instances: RowBatch,
                       background: RowBatch) -> np.ndarray:
    """Per-row slope estimates ``(phi_j + phi_geo_j) / (x_ij - xbar_j)``.

    Rows where the covariate sits within ``1e-3`` background standard
    deviations of the background mean get NaN instead of a blown-up ratio.
    """
    if len(instances) != len(result.ids):
        raise ContractError("result and instances are not aligned")
    xbar = background.x.mean(axis=0)
    xstd = background.x.std(axis=0)
    denom = instances.x - xbar
    valid = np.abs(denom) >= 1e-3 * xstd
    beta = np.full_like(denom, np.nan)
    contrib = result.phi + result.phi_geo_x
    beta[valid] = contrib[valid] / denom[valid]
    return beta


def write_explanations_csv(path, result: GeoShapleyResult,
                           beta: np.ndarray | None = None) -> None:
    """``id,phi0,phi_geo,phi_x*,phi_geo_x*`` plus slope columns, NaN as empty."""
    p = result.phi.shape[1]
    header = ["id", "phi0", "phi_geo"]
    header += [f"phi_x{j + 1}" for j in range(p)]
    header += [f"phi_geo_x{j + 1}" for j in range(p)]
    if beta is not None:
        header += [f"beta_hat_x{j + 1}" for j in range(p)]
    fmt = lambda v: "" if not np.isfinite(v) else f"{v:.17g}"  # noqa: E731
    lines = [",".join(header)]
    for i, pid in enumerate(result.ids):
        cells = [str(int(pid)), fmt(result.phi0), fmt(result.phi_geo[i])]
        cells += [fmt(v) for v in result.phi[i]]
        cells += [fmt(v) for v in result.phi_geo_x[i]]
        if beta is not None:
            cells += [fmt(v) for v in beta[i]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
