"""Streaming Monte Carlo engine for one-step assignment estimators.

Implements a single hard-assignment step (classify each pure-noise
observation to its best-matching template by inner product, then average
per class) and a single soft step (softmax-weighted averages at
sharpness beta), in two sampling modes:

* full mode draws observations n ~ N(0, I_d) and also returns the
  estimator vectors themselves;
* gram mode draws the projection vector S = scale * (factor @ z) with
  z ~ N(0, I_L) directly, which has exactly the distribution of
  (<n, x_k>)_k and makes the cost dimension-free.

Samples are split into a fixed number of chunks; each chunk owns an RNG
stream derived from (seed, chunk index) and accumulates partial sums,
which are then combined in index order with compensated summation.
Results are therefore bitwise reproducible for fixed (seed, chunks,
backend) no matter how many worker threads run.

The orthonormal high-L sweeps get dedicated diagonal-only entry points
that track just the per-sample argmax / softmax self terms, avoiding the
L x L accumulators.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FactorizationError,
    RankError,
)
from .templates import GramModel, TemplateSet

_AUTO_CHUNK_ROWS = 131072
_MAX_AUTO_CHUNKS = 64
_GRAM_SLICE = 4_000_000
_FULL_SLICE = 2_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Sampling plan for one estimator run.

    m is the number of observations, beta the softmax sharpness
    (math.inf selects hard assignment), chunks the number of independent
    accumulation blocks (None picks a deterministic default from m).
    threads never affect values. backend (None defers to the active
    backend) never affects the values of hard_assign / soft_assign; the
    diagonal fast paths draw backend-specific sample streams, so their
    results are deterministic per backend but not identical across
    backends.
    """

    m: int
    seed: int = 0
    mode: str = "gram"
    beta: float = math.inf
    chunks: int = None
    threads: int = None
    backend: str = None
    template_spec: str = None

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        if self.mode not in ("full", "gram"):
            raise ConfigError(f"mode must be 'full' or 'gram', got {self.mode!r}")
        if not (self.beta > 0):
            raise DomainError(f"beta must be positive (inf = hard), got {self.beta}")
        if self.chunks is None:
            auto = max(1, min(_MAX_AUTO_CHUNKS, self.m // _AUTO_CHUNK_ROWS))
            object.__setattr__(self, "chunks", auto)
        if int(self.chunks) != self.chunks or not 1 <= self.chunks <= self.m:
            raise ConfigError(
                f"chunks must be an integer in [1, m], got {self.chunks}")
        object.__setattr__(self, "chunks", int(self.chunks))
        if self.backend not in (None, "numba", "numpy"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    def resolved_backend(self):
        return self.backend or _kernels.active_backend()


@dataclass(frozen=True)
class AssignmentEstimate:
    """Immutable result of one hard or soft estimator run.

    corr[l][k] = <x_hat_l, x_k> (raw inner products); mass[l] is the
    cluster fraction (hard) or mean softmax weight (soft); stderr holds
    delta-method Monte Carlo standard errors for corr entries.
    avg_self_corr = sum_l mass[l] * corr[l][l] carries its own pooled
    stderr, which accounts for cross-cluster covariance. estimates holds
    the L estimator vectors in full mode, None in gram mode. Rows listed
    in undefined had an empty cluster; their corr entries are NaN and a
    warning is attached.
    """

    mode: str
    corr: np.ndarray
    stderr: np.ndarray
    mass: np.ndarray
    m: int
    beta: float
    seed: int
    chunks: int
    backend: str
    avg_self_corr: float
    avg_self_stderr: float
    estimates: np.ndarray = None
    warnings: tuple = ()
    undefined: tuple = ()

    def __post_init__(self):
        for name in ("corr", "stderr", "mass", "estimates"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if np.any(self.mass < -1e-12):
            raise DomainError("negative mass entry")
        if abs(float(self.mass.sum()) - 1.0) > 1e-9:
            raise DomainError(
                f"mass must sum to 1 within 1e-9, got {self.mass.sum()!r}")
        live = self.mass > 0
        ok = np.ones_like(self.mass, dtype=bool)
        ok[list(self.undefined)] = False
        if np.any(~(self.stderr[live & ok] > 0)):
            raise DomainError("stderr must be positive wherever mass > 0")

    @property
    def L(self):
        return self.mass.shape[0]

    def save_csv(self, directory, stem="estimate"):
        """Write corr / stderr / mass tables as headed CSV files."""
        L = self.L
        cols = ",".join(f"corr_with_t{k}" for k in range(L))
        np.savetxt(os.path.join(directory, f"{stem}_corr.csv"), self.corr,
                   delimiter=",", header=cols, comments="", fmt="%.17g")
        np.savetxt(os.path.join(directory, f"{stem}_stderr.csv"), self.stderr,
                   delimiter=",", header=cols.replace("corr_with", "stderr"),
                   comments="", fmt="%.17g")
        np.savetxt(os.path.join(directory, f"{stem}_mass.csv"),
                   self.mass[None, :], delimiter=",",
                   header=",".join(f"mass_t{k}" for k in range(L)),
                   comments="", fmt="%.17g")


@dataclass(frozen=True)
class GramDiagEstimate:
    """Diagonal-only statistics from the fused orthonormal-template path.

    self_corr[l] = mean own-template projection within cluster l (hard)
    or weighted mean (soft); avg_self_corr pools all samples. Only valid
    for identity correlation, where the own projection of a hard winner
    is the row maximum.
    """

    corr_diag: np.ndarray
    stderr_diag: np.ndarray
    mass: np.ndarray
    m: int
    beta: float
    seed: int
    chunks: int
    backend: str
    scale: float
    avg_self_corr: float
    avg_self_stderr: float

    def __post_init__(self):
        for name in ("corr_diag", "stderr_diag", "mass"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def L(self):
        return self.mass.shape[0]


def _split_input(obj, mode):
    """Reduce a TemplateSet or GramModel to sampling ingredients."""
    if isinstance(obj, GramModel):
        if mode != "gram":
            raise ConfigError("a GramModel supports gram mode only")
        return obj.rho.shape[0], None, obj.scale, np.array(obj.factor), None
    if isinstance(obj, TemplateSet):
        if mode == "full":
            return obj.L, obj.d, obj.common_norm, None, np.array(obj.matrix)
        corr = obj.correlation()
        return obj.L, None, obj.common_norm, _psd_factor(corr), None
    raise ConfigError(f"expected TemplateSet or GramModel, got {type(obj)!r}")


def _psd_factor(corr):
    """Factor F with F @ F.T = corr, tolerating a semidefinite matrix.

    Cholesky when positive definite; otherwise an eigendecomposition
    with negative eigenvalues clipped at zero, which handles exactly
    antipodal template pairs (correlation -1).
    """
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(corr)
        if vals.min() < -1e-8:
            raise FactorizationError(
                f"correlation matrix has eigenvalue {vals.min():.3e} < 0")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _chunk_plan(cfg):
    return _kernels.chunk_rows(cfg.m, cfg.chunks)


def _run_chunks(cfg, worker):
    """Run worker(chunk_index, rows) over all chunks, in parallel when asked."""
    rows = _chunk_plan(cfg)
    threads = cfg.threads
    if threads is None:
        threads = min(len(rows), os.cpu_count() or 1)
    if threads <= 1 or len(rows) == 1:
        return [worker(c, r) for c, r in enumerate(rows)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(worker, c, r) for c, r in enumerate(rows)]
        return [f.result() for f in futs]


def _kahan_combine(parts):
    """Sum tuples of accumulator arrays over chunks, compensated, in order."""
    totals = [np.zeros_like(a) for a in parts[0]]
    comps = [np.zeros_like(a) for a in parts[0]]
    for part in parts:
        for t, c, v in zip(totals, comps, part):
            y = v - c
            s = t + y
            c[...] = (s - t) - y
            t[...] = s
    return totals


def hard_assign(templates, cfg):
    """One hard assignment-and-average step on pure noise.

    templates is a TemplateSet (either mode) or GramModel (gram mode).
    """
    if not math.isinf(cfg.beta):
        raise ConfigError("hard_assign expects cfg.beta = inf; use soft_assign")
    backend = cfg.resolved_backend()
    L, d, scale, factor, matrix = _split_input(templates, cfg.mode)
    if cfg.mode == "gram":
        sf = (scale * factor).T.copy()
        slice_rows = max(1, _GRAM_SLICE // L)

        def worker(chunk, rows):
            counts = np.zeros(L)
            sum1 = np.zeros((L, L))
            sum2 = np.zeros((L, L))
            pooled = np.zeros(2)
            labels = np.empty(slice_rows, dtype=np.int64)
            g = _kernels.chunk_generator(cfg.seed, chunk)
            done = 0
            while done < rows:
                take = min(slice_rows, rows - done)
                s = g.standard_normal((take, L)) @ sf
                _kernels.hard_block(backend, s, labels[:take],
                                    counts, sum1, sum2, pooled)
                done += take
            return counts, sum1, sum2, pooled

        counts, sum1, sum2, pooled = _kahan_combine(_run_chunks(cfg, worker))
        vec = None
    else:
        slice_rows = max(1, _FULL_SLICE // d)

        def worker(chunk, rows):
            counts = np.zeros(L)
            sum1 = np.zeros((L, L))
            sum2 = np.zeros((L, L))
            pooled = np.zeros(2)
            vec = np.zeros((L, d))
            labels = np.empty(slice_rows, dtype=np.int64)
            g = _kernels.chunk_generator(cfg.seed, chunk)
            done = 0
            while done < rows:
                take = min(slice_rows, rows - done)
                n = g.standard_normal((take, d))
                s = n @ matrix
                _kernels.hard_block(backend, s, labels[:take],
                                    counts, sum1, sum2, pooled)
                _kernels.label_vectors(backend, n, labels[:take], vec)
                done += take
            return counts, sum1, sum2, pooled, vec

        counts, sum1, sum2, pooled, vec = _kahan_combine(_run_chunks(cfg, worker))
        with np.errstate(invalid="ignore", divide="ignore"):
            vec = vec / counts[:, None]
    return _finalize_hard(cfg, backend, counts, sum1, sum2, pooled, vec)


def soft_assign(templates, cfg):
    """One softmax-weighted averaging step (single EM iteration) on noise."""
    if math.isinf(cfg.beta):
        raise ConfigError("soft_assign expects finite cfg.beta")
    backend = cfg.resolved_backend()
    beta = float(cfg.beta)
    L, d, scale, factor, matrix = _split_input(templates, cfg.mode)
    dummy = np.zeros((1, 1))
    if cfg.mode == "gram":
        sf = (scale * factor).T.copy()
        slice_rows = max(1, _GRAM_SLICE // L)

        def worker(chunk, rows):
            w1 = np.zeros(L)
            w2 = np.zeros(L)
            a1 = np.zeros((L, L))
            a2 = np.zeros((L, L))
            a3 = np.zeros((L, L))
            pooled = np.zeros(2)
            g = _kernels.chunk_generator(cfg.seed, chunk)
            done = 0
            while done < rows:
                take = min(slice_rows, rows - done)
                s = g.standard_normal((take, L)) @ sf
                _kernels.soft_block(backend, s, beta, dummy, False,
                                    w1, w2, a1, a2, a3, pooled)
                done += take
            return w1, w2, a1, a2, a3, pooled

        w1, w2, a1, a2, a3, pooled = _kahan_combine(_run_chunks(cfg, worker))
        vec = None
    else:
        slice_rows = max(1, _FULL_SLICE // d)

        def worker(chunk, rows):
            w1 = np.zeros(L)
            w2 = np.zeros(L)
            a1 = np.zeros((L, L))
            a2 = np.zeros((L, L))
            a3 = np.zeros((L, L))
            pooled = np.zeros(2)
            vec = np.zeros((L, d))
            p = np.empty((slice_rows, L))
            g = _kernels.chunk_generator(cfg.seed, chunk)
            done = 0
            while done < rows:
                take = min(slice_rows, rows - done)
                n = g.standard_normal((take, d))
                s = n @ matrix
                _kernels.soft_block(backend, s, beta, p[:take], True,
                                    w1, w2, a1, a2, a3, pooled)
                _kernels.weighted_vectors(backend, n, p[:take], vec)
                done += take
            return w1, w2, a1, a2, a3, pooled, vec

        w1, w2, a1, a2, a3, pooled, vec = _kahan_combine(_run_chunks(cfg, worker))
        vec = vec / w1[:, None]
    return _finalize_soft(cfg, backend, beta, w1, w2, a1, a2, a3, pooled, vec)


def _finalize_hard(cfg, backend, counts, sum1, sum2, pooled, vec):
    L = counts.shape[0]
    m = cfg.m
    corr = np.full((L, L), np.nan)
    stderr = np.full((L, L), np.inf)
    warnings_ = []
    undefined = []
    for l in range(L):
        c = counts[l]
        if c < 1:
            undefined.append(l)
            warnings_.append(f"empty cluster {l}: corr row undefined")
            continue
        corr[l] = sum1[l] / c
        if c >= 2:
            var = np.maximum(sum2[l] - sum1[l] ** 2 / c, 0.0)
            stderr[l] = np.sqrt(var) / c
        else:
            warnings_.append(f"cluster {l} has a single sample: stderr infinite")
    mass = counts / m
    avg = pooled[0] / m
    avg_se = math.sqrt(max(pooled[1] / m - avg * avg, 0.0) / m)
    return AssignmentEstimate(
        mode=cfg.mode, corr=corr, stderr=stderr, mass=mass, m=m,
        beta=math.inf, seed=cfg.seed, chunks=cfg.chunks, backend=backend,
        avg_self_corr=avg, avg_self_stderr=avg_se, estimates=vec,
        warnings=tuple(warnings_), undefined=tuple(undefined))


def _finalize_soft(cfg, backend, beta, w1, w2, a1, a2, a3, pooled, vec):
    L = w1.shape[0]
    m = cfg.m
    corr = a1 / w1[:, None]
    # delta-method stderr of the ratio estimator sum(p S)/sum(p):
    # Var ~ sum(p^2 (S - R)^2) / (sum p)^2, expanded in streaming moments
    var_num = np.maximum(a3 - 2.0 * corr * a2 + corr ** 2 * w2[:, None], 0.0)
    stderr = np.sqrt(var_num) / w1[:, None]
    mass = w1 / m
    avg = pooled[0] / m
    avg_se = math.sqrt(max(pooled[1] / m - avg * avg, 0.0) / m)
    return AssignmentEstimate(
        mode=cfg.mode, corr=corr, stderr=stderr, mass=mass, m=m,
        beta=beta, seed=cfg.seed, chunks=cfg.chunks, backend=backend,
        avg_self_corr=avg, avg_self_stderr=avg_se, estimates=vec,
        warnings=(), undefined=())


def hard_assign_diag(L, cfg, scale=1.0):
    """Hard run for L orthonormal templates, diagonal statistics only.

    Equivalent to hard_assign on an identity-correlation Gram but
    tracking just per-cluster count / mean / variance of the winning
    projection, which keeps memory and time O(L) per sample even at
    L = 4096. The numba backend fuses sampling into the scan.
    """
    if not math.isinf(cfg.beta):
        raise ConfigError("hard_assign_diag expects cfg.beta = inf")
    backend = cfg.resolved_backend()
    L = int(L)
    if L < 2:
        raise DomainError(f"need at least two templates, got L={L}")

    def worker(chunk, rows):
        counts = np.zeros(L)
        d1 = np.zeros(L)
        d2 = np.zeros(L)
        pooled = np.zeros(2)
        _kernels.hard_diag_chunk(backend, cfg.seed, chunk, rows, L,
                                 float(scale), counts, d1, d2, pooled)
        return counts, d1, d2, pooled

    counts, d1, d2, pooled = _kahan_combine(_run_chunks(cfg, worker))
    with np.errstate(invalid="ignore", divide="ignore"):
        diag = d1 / counts
        var = np.maximum(d2 - d1 ** 2 / np.maximum(counts, 1.0), 0.0)
        se = np.where(counts >= 2, np.sqrt(var) / np.maximum(counts, 1.0),
                      np.inf)
    avg = pooled[0] / cfg.m
    avg_se = math.sqrt(max(pooled[1] / cfg.m - avg * avg, 0.0) / cfg.m)
    return GramDiagEstimate(
        corr_diag=diag, stderr_diag=se, mass=counts / cfg.m, m=cfg.m,
        beta=math.inf, seed=cfg.seed, chunks=cfg.chunks, backend=backend,
        scale=float(scale), avg_self_corr=avg, avg_self_stderr=avg_se)


def soft_assign_diag(L, cfg, scale=1.0):
    """Soft run for L orthonormal templates, diagonal statistics only."""
    if math.isinf(cfg.beta):
        raise ConfigError("soft_assign_diag expects finite cfg.beta")
    backend = cfg.resolved_backend()
    beta = float(cfg.beta)
    L = int(L)
    if L < 2:
        raise DomainError(f"need at least two templates, got L={L}")

    def worker(chunk, rows):
        w1 = np.zeros(L)
        w2 = np.zeros(L)
        b1 = np.zeros(L)
        b2 = np.zeros(L)
        b3 = np.zeros(L)
        pooled = np.zeros(2)
        _kernels.soft_diag_chunk(backend, cfg.seed, chunk, rows, L,
                                 float(scale), beta, w1, w2, b1, b2, b3,
                                 pooled)
        return w1, w2, b1, b2, b3, pooled

    w1, w2, b1, b2, b3, pooled = _kahan_combine(_run_chunks(cfg, worker))
    diag = b1 / w1
    var_num = np.maximum(b3 - 2.0 * diag * b2 + diag ** 2 * w2, 0.0)
    se = np.sqrt(var_num) / w1
    avg = pooled[0] / cfg.m
    avg_se = math.sqrt(max(pooled[1] / cfg.m - avg * avg, 0.0) / cfg.m)
    return GramDiagEstimate(
        corr_diag=diag, stderr_diag=se, mass=w1 / cfg.m, m=cfg.m,
        beta=beta, seed=cfg.seed, chunks=cfg.chunks, backend=backend,
        scale=float(scale), avg_self_corr=avg, avg_self_stderr=avg_se)


def correlation_matrix(est, templates):
    """Recompute <x_hat_l, x_k> from full-mode estimator vectors."""
    if est.mode != "full" or est.estimates is None:
        raise ConfigError("correlation_matrix needs a full-mode estimate")
    if templates.d != est.estimates.shape[1]:
        raise DimensionError(
            f"dimension mismatch: templates d={templates.d}, "
            f"estimates d={est.estimates.shape[1]}")
    return est.estimates @ templates.matrix


def span_residual(est, templates):
    """Fraction of each estimator vector outside the template span."""
    if est.mode != "full" or est.estimates is None:
        raise ConfigError("span_residual needs a full-mode estimate")
    if templates.d <= templates.L:
        raise DimensionError("span residual needs d > L")
    q, r = np.linalg.qr(templates.matrix)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise RankError("template matrix is numerically rank deficient")
    out = np.empty(est.L)
    for l in range(est.L):
        v = est.estimates[l]
        nv = np.linalg.norm(v)
        if not np.isfinite(nv) or nv == 0.0:
            out[l] = np.nan
            continue
        resid = v - q @ (q.T @ v)
        out[l] = np.linalg.norm(resid) / nv
    return out


def extract_coefficients(est, templates):
    """Least-squares coefficients of each estimator in the template basis.

    Solves corr = alpha @ G for alpha, with G the unnormalized Gram
    matrix of the templates.
    """
    if isinstance(templates, GramModel):
        gram = templates.covariance()
    else:
        gram = templates.matrix.T @ templates.matrix
    try:
        alpha = np.linalg.solve(gram.T, est.corr.T).T
    except np.linalg.LinAlgError as exc:
        raise RankError(f"singular Gram matrix: {exc}") from exc
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankError(f"Gram matrix numerically singular (cond={cond:.2e})")
    return alpha
