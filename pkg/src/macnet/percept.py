"""Perceptual distances, the category-attribute embedding, and Beta/KDE statistics.

Judgments are pooled yes/no answers per unordered category pair. Their
"no" fraction gives a dissimilarity matrix ``D``; ``solve_category_attribute_matrix``
then finds rows ``a_k`` in the unit cube whose scaled Euclidean distances
reproduce ``D`` while each attribute column stays close to a U-shaped Beta
prior.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import betaln

KDE_FLOOR = 1e-6
MIN_BANDWIDTH = 0.01
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BetaParams:
    a: float = 0.5
    b: float = 0.5

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta parameters must be positive, got a={self.a}, b={self.b}")


def default_grid(n: int = 32) -> np.ndarray:
    """Midpoints (2i - 1) / 2n of n equal cells of (0, 1)."""
    return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)


def check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("density grid must be a non-empty 1-D sequence")
    if np.any(grid <= 0) or np.any(grid >= 1):
        raise ValueError("density grid points must lie strictly inside (0, 1)")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("density grid must be strictly increasing")
    return grid


# judgments and distances ------------------------------------------------------

@dataclass
class SimilarityJudgments:
    """Yes/no similarity answers keyed by category pair (order irrelevant)."""

    n_categories: int
    records: list = field(default_factory=list)  # dicts with keys a, b, yes, no

    def add(self, a: int, b: int, yes: int, no: int) -> None:
        if yes < 0 or no < 0:
            raise ValueError("vote counts must be non-negative")
        self.records.append({"a": int(a), "b": int(b), "yes": int(yes), "no": int(no)})

    def pooled(self) -> dict:
        counts: dict = {}
        for r in self.records:
            key = (min(r["a"], r["b"]), max(r["a"], r["b"]))
            y, n = counts.get(key, (0, 0))
            counts[key] = (y + r["yes"], n + r["no"])
        return counts

    def to_json(self) -> str:
        return json.dumps(self.records, indent=1)

    @classmethod
    def from_records(cls, records: Iterable[dict], n_categories: Optional[int] = None) -> "SimilarityJudgments":
        records = list(records)
        for r in records:
            missing = {"a", "b", "yes", "no"} - set(r)
            if missing:
                raise ValueError(f"judgment record {r} lacks keys {sorted(missing)}")
        if n_categories is None:
            n_categories = 1 + max(max(r["a"], r["b"]) for r in records) if records else 0
        out = cls(n_categories)
        for r in records:
            out.add(r["a"], r["b"], r["yes"], r["no"])
        return out

    @classmethod
    def load(cls, path, n_categories: Optional[int] = None) -> "SimilarityJudgments":
        return cls.from_records(json.loads(Path(path).read_text()), n_categories)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def build_distance_matrix(judgments: SimilarityJudgments) -> np.ndarray:
    """Fraction of "no" answers per category pair; zero diagonal."""
    k = judgments.n_categories
    counts = judgments.pooled()
    D = np.zeros((k, k))
    missing = []
    for i in range(k):
        for j in range(i + 1, k):
            yes, no = counts.get((i, j), (0, 0))
            if yes + no == 0:
                missing.append((i, j))
                continue
            D[i, j] = D[j, i] = no / (yes + no)
    if missing:
        raise ValueError(f"no judgments for category pairs {missing}")
    return D


def check_distance_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {D.shape}")
    if not np.allclose(D, D.T, atol=1e-12):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.diag(D) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    if np.any(D < 0) or np.any(D > 1):
        raise ValueError("distances must lie in [0, 1]")
    return D


def embedding_distances(A) -> np.ndarray:
    """Pairwise row distances ||a_k - a_l|| / sqrt(M)."""
    A = np.asarray(A, dtype=np.float64)
    diff = A[:, None, :] - A[None, :, :]
    return np.sqrt((diff ** 2).sum(-1)) / math.sqrt(A.shape[1])


# Beta / KDE / KL --------------------------------------------------------------

def beta_pdf(p, beta: BetaParams = BetaParams()):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr <= 0) or np.any(p_arr >= 1):
        raise ValueError("beta_pdf is only evaluated strictly inside (0, 1)")
    logpdf = (beta.a - 1) * np.log(p_arr) + (beta.b - 1) * np.log1p(-p_arr) - betaln(beta.a, beta.b)
    out = np.exp(logpdf)
    return float(out) if out.ndim == 0 else out


def _as_columns(samples) -> tuple[np.ndarray, bool]:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"samples must be 1-D or 2-D (columns), got shape {x.shape}")


def _quantile_weights(sorted_idx: np.ndarray, q: float) -> list[tuple[np.ndarray, float]]:
    n = sorted_idx.shape[0]
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    hi = min(lo + 1, n - 1)
    return [(sorted_idx[lo], 1.0 - frac), (sorted_idx[hi], frac)]


def silverman_bandwidth(samples) -> np.ndarray:
    """max(0.9 * min(std, IQR / 1.34) * n^(-1/5), 0.01) per column."""
    x, squeeze = _as_columns(samples)
    h = _silverman(x)[0]
    return float(h[0]) if squeeze else h


def _silverman(x: np.ndarray):
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    iqr = (q75 - q25) / 1.34
    use_sd = sd <= iqr
    raw = 0.9 * np.where(use_sd, sd, iqr) * n ** -0.2
    return np.maximum(raw, MIN_BANDWIDTH), raw, sd, use_sd


def _silverman_vjp(x: np.ndarray, gh: np.ndarray) -> np.ndarray:
    """Gradient of sum(gh * h(x)) with respect to x for the Silverman rule."""
    n, m = x.shape
    h, raw, sd, use_sd = _silverman(x)
    out = np.zeros_like(x)
    scale = 0.9 * n ** -0.2
    order = np.argsort(x, axis=0, kind="stable")
    for col in range(m):
        if raw[col] <= MIN_BANDWIDTH or gh[col] == 0:
            continue
        if use_sd[col]:
            if sd[col] > 0:
                out[:, col] = gh[col] * scale * (x[:, col] - x[:, col].mean()) / ((n - 1) * sd[col])
        else:
            g = gh[col] * scale / 1.34
            for idx, w in _quantile_weights(order[:, col], 0.75):
                out[idx, col] += g * w
            for idx, w in _quantile_weights(order[:, col], 0.25):
                out[idx, col] -= g * w
    return out


def _bandwidths(x: np.ndarray, bandwidth) -> np.ndarray:
    if bandwidth is None or bandwidth == "auto":
        return _silverman(x)[0]
    h = float(bandwidth)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    return np.full(x.shape[1], h)


def kde_eval(samples, grid, bandwidth: Union[float, str, None] = "auto") -> np.ndarray:
    """Gaussian-kernel density of ``samples`` on ``grid``, floored at 1e-6.

    ``samples`` may be a 1-D array or a 2-D array of columns; in the latter
    case the result has one row of grid values per column.
    """
    x, squeeze = _as_columns(samples)
    grid = check_grid(grid)
    if x.shape[0] < 2:
        raise ValueError(f"kernel density needs at least 2 samples, got {x.shape[0]}")
    h = _bandwidths(x, bandwidth)
    z = (grid[None, :, None] - x.T[:, None, :]) / h[:, None, None]  # (m, P, n)
    q = np.exp(-0.5 * z ** 2).sum(-1) / (x.shape[0] * h[:, None] * _SQRT_2PI)
    q = np.maximum(q, KDE_FLOOR)
    return q[0] if squeeze else q


def kde_vjp(samples, grid, bandwidth, grad_q) -> np.ndarray:
    """Pull a gradient on the KDE values back onto the samples.

    Accounts for the floor (zero gradient where it binds) and, for the
    automatic bandwidth, for the bandwidth's own dependence on the samples.
    """
    x, squeeze = _as_columns(samples)
    grid = check_grid(grid)
    grad_q = np.asarray(grad_q, dtype=np.float64).reshape(x.shape[1], grid.size)
    n = x.shape[0]
    h = _bandwidths(x, bandwidth)
    z = (grid[None, :, None] - x.T[:, None, :]) / h[:, None, None]
    kern = np.exp(-0.5 * z ** 2) / _SQRT_2PI
    norm = 1.0 / (n * h[:, None])
    q_raw = kern.sum(-1) * norm
    g = np.where(q_raw > KDE_FLOOR, grad_q, 0.0)  # (m, P)
    # d q_p / d x_s at fixed h
    gx = np.einsum("mp,mps->sm", g * norm, kern * z) / h[None, :]
    if bandwidth is None or bandwidth == "auto":
        dq_dh = (kern * (z ** 2 - 1.0)).sum(-1) * norm / h[:, None]
        gh = (g * dq_dh).sum(-1)
        gx = gx + _silverman_vjp(x, gh)
    return gx[:, 0] if squeeze else gx


def kl_beta_vs_kde(grid, beta: BetaParams, q) -> float:
    """Unnormalised discrete KL: sum_p beta(p) * ln(beta(p) / q(p))."""
    grid = check_grid(grid)
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != grid.size:
        raise ValueError(f"q has {q.shape[-1]} values for a {grid.size}-point grid")
    if np.any(q <= 0):
        raise ValueError("q must be strictly positive on the grid")
    b = beta_pdf(grid, beta)
    kl = (b * (np.log(b) - np.log(q))).sum(-1)
    return float(kl) if np.ndim(kl) == 0 else kl


# category-attribute solver ----------------------------------------------------

@dataclass
class SolverConfig:
    restarts: int = 8
    iterations: int = 2000
    step: float = 0.05
    prior_weight: float = 0.01
    beta: BetaParams = BetaParams()
    grid_points: int = 32
    max_backtracks: int = 30
    seed: int = 0


@dataclass
class SolverResult:
    A: np.ndarray
    objective: float
    stress: float
    prior: float
    restart: int
    history: list  # accepted objective values of the winning restart


def _pair_terms(A: np.ndarray, D: np.ndarray):
    k, m = A.shape
    diff = A[:, None, :] - A[None, :, :]
    norm = np.sqrt((diff ** 2).sum(-1))
    r = norm / math.sqrt(m)
    resid = np.triu(r - D, 1)
    stress = float((resid ** 2).sum())
    coef = np.zeros_like(norm)
    nz = norm > 0
    full = resid + resid.T
    coef[nz] = 2.0 * full[nz] / (norm[nz] * math.sqrt(m))
    grad = (coef[:, :, None] * diff).sum(1)
    return stress, grad


def _prior_terms(A: np.ndarray, cfg: SolverConfig, grid: np.ndarray, b: np.ndarray):
    q = kde_eval(A, grid)
    per_col = (b * (np.log(b) - np.log(q))).sum(-1)
    grad = kde_vjp(A, grid, "auto", -b[None, :] / q)
    return float(per_col.sum()), grad


def attribute_objective(A, D, cfg: SolverConfig = SolverConfig()) -> tuple[float, float, float]:
    """Return (objective, distance stress, prior KL sum) for a candidate matrix."""
    A = np.asarray(A, dtype=np.float64)
    grid = default_grid(cfg.grid_points)
    b = beta_pdf(grid, cfg.beta)
    stress, _ = _pair_terms(A, D)
    prior = _prior_terms(A, cfg, grid, b)[0] if cfg.prior_weight and A.shape[0] >= 2 else 0.0
    return stress + cfg.prior_weight * prior, stress, prior


def classical_mds_start(D, n_attributes: int) -> np.ndarray:
    """Torgerson embedding of ``D * sqrt(M)`` shifted into the unit cube.

    Exact for distance matrices that embed in M dimensions with a spread of
    at most one per axis, which the random restarts often miss when M is 1.
    """
    D = np.asarray(D, dtype=np.float64) * math.sqrt(n_attributes)
    k = D.shape[0]
    J = np.eye(k) - 1.0 / k
    B = -0.5 * J @ (D ** 2) @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:n_attributes]
    X = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    if X.shape[1] < n_attributes:
        X = np.hstack([X, np.zeros((k, n_attributes - X.shape[1]))])
    return np.clip(X - X.min(axis=0), 0.0, 1.0)


def solve_category_attribute_matrix(D, n_attributes: int, cfg: SolverConfig = SolverConfig()) -> SolverResult:
    """Best-of-restarts projected gradient descent on the embedding objective.

    Restart 0 starts from the classical MDS solution, the rest from uniform
    random matrices. Each iteration tries the configured step, halving it
    until the objective does not increase; a restart stops early once no
    step helps.
    """
    D = check_distance_matrix(D)
    if n_attributes < 1:
        raise ValueError(f"need at least one attribute, got {n_attributes}")
    k = D.shape[0]
    grid = default_grid(cfg.grid_points)
    b = beta_pdf(grid, cfg.beta)
    use_prior = cfg.prior_weight > 0 and k >= 2

    def evaluate(A):
        stress, g = _pair_terms(A, D)
        if use_prior:
            prior, gp = _prior_terms(A, cfg, grid, b)
            return stress + cfg.prior_weight * prior, stress, prior, g + cfg.prior_weight * gp
        return stress, stress, 0.0, g

    best: Optional[SolverResult] = None
    for restart in range(cfg.restarts):
        if restart == 0:
            A = classical_mds_start(D, n_attributes)
        else:
            A = np.random.default_rng([cfg.seed, restart]).uniform(0.0, 1.0, size=(k, n_attributes))
        obj, stress, prior, grad = evaluate(A)
        history = [obj]
        for _ in range(cfg.iterations):
            step = cfg.step
            for _ in range(cfg.max_backtracks):
                cand = np.clip(A - step * grad, 0.0, 1.0)
                c_obj, c_stress, c_prior, c_grad = evaluate(cand)
                if c_obj <= obj:
                    break
                step *= 0.5
            else:
                break
            stalled = obj - c_obj <= 1e-15 * max(1.0, abs(obj))
            A, obj, stress, prior, grad = cand, c_obj, c_stress, c_prior, c_grad
            history.append(obj)
            if stalled:
                break
        if best is None or obj < best.objective:
            best = SolverResult(A, obj, stress, prior, restart, history)
    return best


def distance_rmse(A, D) -> float:
    """RMSE between embedding distances and target distances over pairs k < l."""
    D = np.asarray(D, dtype=np.float64)
    iu = np.triu_indices(D.shape[0], 1)
    return float(np.sqrt(np.mean((embedding_distances(A)[iu] - D[iu]) ** 2)))


# CSV io -----------------------------------------------------------------------

def save_matrix_csv(path, matrix, header: Optional[str] = None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    k, m = matrix.shape
    lines = [header or f"# K={k} M={m}"]
    lines += [",".join(repr(float(v)) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing '# K=<k> M=<m>' header line")
    fields = dict(tok.split("=", 1) for tok in text[0][1:].split() if "=" in tok)
    try:
        k, m = int(fields["K"]), int(fields["M"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header {text[0]!r}") from exc
    rows = [[float(v) for v in line.split(",")] for line in text[1:] if line.strip()]
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), -1) if rows else np.zeros((0, m))
    if matrix.shape != (k, m):
        raise ValueError(f"{path}: header says {k}x{m} but body is {matrix.shape[0]}x{matrix.shape[1]}")
    return matrix


def remove_category(D, index: int) -> np.ndarray:
    keep = [i for i in range(D.shape[0]) if i != index]
    return np.asarray(D)[np.ix_(keep, keep)]
