"""Exact Cholesky sampling of fractional Brownian motion on a time grid."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, FactorizationError
from .kernel import HurstParam, TimeGrid, as_hurst

logger = logging.getLogger(__name__)

MAX_NODES = 4096
BLOCK_PATHS = 1024


def covariance(h, s, t):
    """E[B_s B_t] = (s^2h + t^2h - |s - t|^2h) / 2."""
    h = as_hurst(h).h
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ContractError("covariance needs s, t >= 0")
    out = 0.5 * (s ** (2 * h) + t ** (2 * h) - np.abs(s - t) ** (2 * h))
    return out.item() if out.ndim == 0 else out


def node_covariance(grid: TimeGrid, h) -> np.ndarray:
    t = grid.nodes[1:]
    return covariance(h, t[:, None], t[None, :])


@lru_cache(maxsize=32)
def _factor(nodes: bytes, h: float) -> np.ndarray:
    grid = TimeGrid(np.frombuffer(nodes))
    R = node_covariance(grid, h)
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * R.diagonal().max()
        logger.warning("Cholesky failed for h=%s on %d nodes; retrying with jitter %.3g",
                       h, grid.n_nodes, jitter)
    try:
        return np.linalg.cholesky(R + jitter * np.eye(R.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"covariance not positive definite for h={h} on grid "
            f"[0, {grid.t_max}] with {grid.n_nodes} nodes") from exc


def cholesky_factor(grid: TimeGrid, h) -> np.ndarray:
    """Lower Cholesky factor of the covariance at nodes[1:] (node 0 is pinned at 0)."""
    if grid.n_nodes > MAX_NODES:
        raise ContractError(f"grid has {grid.n_nodes} nodes; the sampler caps at {MAX_NODES}")
    return _factor(grid.nodes.tobytes(), as_hurst(h).h)


def _rng(seed: int, noise: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(noise, block))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class FbmEnsemble:
    """Sampled paths, shape (n_paths, n_noises, n_nodes)."""

    grid: TimeGrid
    hursts: tuple
    paths: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_noises(self) -> int:
        return self.paths.shape[1]

    def noise(self, k: int = 0) -> np.ndarray:
        return self.paths[:, k, :]

    def increments(self, k: int = 0) -> np.ndarray:
        return np.diff(self.paths[:, k, :], axis=-1)

    def subsample(self, stride: int) -> "FbmEnsemble":
        grid = self.grid.subsample(stride)
        return FbmEnsemble(grid, self.hursts, self.paths[..., ::stride], self.seed)

    def to_csv(self, path) -> None:
        """Write columns path_id, noise_id, t, value."""
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "noise_id", "t", "value"])
            for p in range(self.n_paths):
                for k in range(self.n_noises):
                    for ti, v in zip(t, self.paths[p, k]):
                        w.writerow([p, k, repr(float(ti)), repr(float(v))])


def sample_ensemble(grid: TimeGrid, hursts, n_paths: int, seed: int,
                    workers: int = 1) -> FbmEnsemble:
    """Sample independent fBm paths for each Hurst index in ``hursts``.

    Standard normals come from Philox substreams keyed by (seed, noise, block of
    BLOCK_PATHS paths), so the result does not depend on ``workers``.
    """
    if isinstance(hursts, (float, int, HurstParam)):
        hursts = (hursts,)
    hursts = tuple(as_hurst(h) for h in hursts)
    if n_paths < 1:
        raise ContractError("n_paths must be at least 1")
    if not 1 <= len(hursts) <= 2:
        raise ContractError("between one and two driving noises are supported")
    n = grid.n_nodes
    paths = np.zeros((n_paths, len(hursts), n))
    blocks = [(k, b) for k in range(len(hursts))
              for b in range((n_paths + BLOCK_PATHS - 1) // BLOCK_PATHS)]
    factors = [cholesky_factor(grid, h) for h in hursts]

    def fill(job):
        k, b = job
        lo = b * BLOCK_PATHS
        hi = min(n_paths, lo + BLOCK_PATHS)
        z = _rng(seed, k, b).standard_normal((hi - lo, n - 1))
        paths[lo:hi, k, 1:] = z @ factors[k].T

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, blocks))
    else:
        for job in blocks:
            fill(job)
    paths.setflags(write=False)
    return FbmEnsemble(grid, hursts, paths, int(seed))


@dataclass(frozen=True)
class CovRow:
    s: float
    t: float
    empirical: float
    exact: float
    std_error: float
    z: float

    @property
    def flagged(self) -> bool:
        return abs(self.z) > 4.0


def empirical_cov_report(ensemble: FbmEnsemble, pairs, noise: int = 0) -> list[CovRow]:
    """Compare E[B_s B_t] estimates with the exact covariance.

    The process is centred, so the estimator is the sample mean of B_s B_t;
    its standard error is the sample standard deviation of the products over
    sqrt(n_paths).
    """
    rows = []
    X = ensemble.noise(noise)
    h = ensemble.hursts[noise]
    n = ensemble.n_paths
    for s, t in pairs:
        i = ensemble.grid.index_of(s)
        j = ensemble.grid.index_of(t)
        prod = X[:, i] * X[:, j]
        emp = float(prod.mean())
        se = float(prod.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
        exact = covariance(h, s, t)
        z = (emp - exact) / se if se > 0 else (0.0 if emp == exact else float("inf"))
        rows.append(CovRow(float(s), float(t), emp, exact, se, z))
    return rows
