"""PARAFAC (CP) model fitting by alternating least squares.

Also provides reconstruction and residuals, the Tucker congruence
coefficient, factor alignment and split-half rank validation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor3, khatri_rao, pinv, unfold

log = logging.getLogger(__name__)


@dataclass
class CpModel:
    """Rank-``R`` factors ``A`` (I x R), ``B`` (J x R), ``C`` (K x R).

    ``weights`` scale the components: entry ``(i, j, k)`` of the model is
    ``sum_r weights[r] * A[i, r] * B[j, r] * C[k, r]``. Fitted models are
    returned with unit-norm columns and the norms held in ``weights``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    weights: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float, ndmin=2)
        self.B = np.array(self.B, dtype=float, ndmin=2)
        self.C = np.array(self.C, dtype=float, ndmin=2)
        ranks = {self.A.shape[1], self.B.shape[1], self.C.shape[1]}
        if len(ranks) != 1:
            raise ShapeError(f"factor column counts differ: {sorted(ranks)}")
        if self.weights is None:
            self.weights = np.ones(self.A.shape[1])
        self.weights = np.array(self.weights, dtype=float).reshape(-1)
        if self.weights.shape[0] != self.rank:
            raise ShapeError("weights length must equal rank")
        for name in ("A", "B", "C", "weights"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"factor {name} contains non-finite values")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.A.shape[0], self.B.shape[0], self.C.shape[0])

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Factors with the weights folded into ``A``."""
        return self.A * self.weights, self.B, self.C

    def factor(self, mode: int) -> np.ndarray:
        return (self.A, self.B, self.C)[mode - 1]

    def normalized(self) -> "CpModel":
        a, b, c = self.factors
        norms = [np.linalg.norm(f, axis=0) for f in (a, b, c)]
        w = norms[0] * norms[1] * norms[2]
        unit = [f / np.where(n > 0, n, 1.0) for f, n in zip((a, b, c), norms)]
        return CpModel(*unit, weights=w, meta=dict(self.meta))

    def full(self) -> np.ndarray:
        a, b, c = self.factors
        return np.einsum("ir,jr,kr->ijk", a, b, c)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "dims": list(self.dims),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "column_norms": self.weights.tolist(),
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CpModel":
        m = cls(d["A"], d["B"], d["C"], d.get("column_norms"), dict(d.get("meta", {})))
        if m.rank != d["rank"] or list(m.dims) != list(d["dims"]):
            raise ValueError("model document rank/dims disagree with factor shapes")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class AlsConfig:
    """ALS stopping rule and initialization.

    Iteration stops when the relative change of the observed-entry fit
    drops below ``rel_change_tol``, when the relative error falls below
    ``exact_fit_tol`` or after ``max_iters`` sweeps. ``init`` is
    ``"random-uniform"`` or a :class:`CpModel` used as a warm start.
    With random initialization, ``n_init > 1`` runs that many independent
    starts and keeps the one with the lowest final fit.
    """

    max_iters: int = 200
    rel_change_tol: float = 1e-6
    init: object = "random-uniform"
    seed: int = 0
    missing_policy: str = "em-impute"
    exact_fit_tol: float = 1e-13
    n_init: int = 1

    def __post_init__(self):
        if self.max_iters < 1 or self.n_init < 1:
            raise ValueError("max_iters and n_init must be >= 1")
        if not self.rel_change_tol > 0:
            raise ValueError("rel_change_tol must be > 0")
        if self.missing_policy != "em-impute":
            raise ValueError(f"unsupported missing_policy {self.missing_policy!r}")
        if not (isinstance(self.init, CpModel) or self.init == "random-uniform"):
            raise ValueError("init must be 'random-uniform' or a CpModel")

    def replace(self, **kw) -> "AlsConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return AlsConfig(**d)


def _rebalance(a, b, c):
    norms = [np.linalg.norm(f, axis=0) for f in (a, b, c)]
    total = norms[0] * norms[1] * norms[2]
    target = np.cbrt(total)
    out = []
    for f, n in zip((a, b, c), norms):
        scale = np.where(n > 0, target / np.where(n > 0, n, 1.0), 0.0)
        out.append(f * scale)
    return out


def _degenerate(a, b, c, cutoff=0.999) -> bool:
    r = a.shape[1]
    if r < 2:
        return False
    prod = np.ones((r, r))
    for f in (a, b, c):
        n = np.linalg.norm(f, axis=0)
        n = np.where(n > 0, n, 1.0)
        u = f / n
        prod *= u.T @ u
    np.fill_diagonal(prod, 0.0)
    return bool(np.max(np.abs(prod)) > cutoff)


def als_sweep(x: np.ndarray, a, b, c):
    """One full ALS sweep, each factor the exact least-squares solution.

    Uses ``pinv((C kr B)^T) = (C kr B) pinv(C^T C * B^T B)`` so that only an
    ``R x R`` matrix is decomposed.
    """
    a = unfold(x, 1) @ khatri_rao(c, b) @ pinv((c.T @ c) * (b.T @ b))
    b = unfold(x, 2) @ khatri_rao(c, a) @ pinv((c.T @ c) * (a.T @ a))
    c = unfold(x, 3) @ khatri_rao(b, a) @ pinv((b.T @ b) * (a.T @ a))
    return a, b, c


def als_fit(x, rank: int, cfg: Optional[AlsConfig] = None) -> CpModel:
    """Fit a rank-``rank`` PARAFAC model to ``x`` by alternating least squares.

    Missing entries (``x.mask``) are handled by EM imputation: they start at
    the mean of observed entries and are replaced by the model estimate
    after every sweep. ``meta["history"]`` holds the observed-entry fit
    ``||X - M||_F`` after each sweep.
    """
    cfg = cfg or AlsConfig()
    if not isinstance(x, Tensor3):
        x = Tensor3(x)
    if cfg.n_init > 1 and not isinstance(cfg.init, CpModel):
        seeds = np.random.default_rng(cfg.seed).integers(0, 2**31, size=cfg.n_init)
        fits = [als_fit(x, rank, cfg.replace(seed=int(s), n_init=1)) for s in seeds]
        best = min(fits, key=lambda m: m.meta["fit"])
        best.meta["seed"] = cfg.seed
        best.meta["n_init"] = cfg.n_init
        return best
    if rank < 1:
        raise ValueError("rank must be >= 1")
    I, J, K = x.dims
    obs = x.observed
    masked = x.has_mask
    if masked:
        for mode, axes in ((1, (1, 2)), (2, (0, 2)), (3, (0, 1))):
            if not obs.any(axis=axes).all():
                raise ValueError(f"a mode-{mode} slice has no observed entries")

    data = x.values
    work = data.copy()
    if masked:
        work[~obs] = data[obs].mean()
    norm_x = float(np.linalg.norm(data))

    if isinstance(cfg.init, CpModel):
        if cfg.init.rank != rank or cfg.init.dims != (I, J, K):
            raise ShapeError("warm-start model does not match data dims or rank")
        a, b, c = (f.copy() for f in cfg.init.factors)
    else:
        rng = np.random.default_rng(cfg.seed)
        a = rng.random((I, rank))
        b = rng.random((J, rank))
        c = rng.random((K, rank))

    history = []
    fit_prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        a, b, c = als_sweep(work, a, b, c)
        a, b, c = _rebalance(a, b, c)
        est = (a @ khatri_rao(c, b).T).reshape((I, J, K), order="F")
        fit = float(np.linalg.norm((data - est)[obs])) if masked else float(np.linalg.norm(data - est))
        if masked:
            work = np.where(obs, data, est)
        history.append(fit)
        if norm_x == 0 or fit <= cfg.exact_fit_tol * norm_x:
            converged = True
            break
        if fit_prev is not None and abs(fit_prev - fit) <= cfg.rel_change_tol * fit_prev:
            converged = True
            break
        fit_prev = fit

    model = CpModel(a, b, c).normalized()
    model.meta = {
        "iterations": it,
        "fit": history[-1] if history else None,
        "rel_error": (history[-1] / norm_x) if norm_x else 0.0,
        "converged": converged,
        "seed": cfg.seed,
        "degenerate": _degenerate(a, b, c),
        "history": history,
    }
    if model.meta["degenerate"]:
        log.info("rank-%d fit flagged degenerate (collinear components)", rank)
    return model


def reconstruct(m: CpModel) -> Tensor3:
    return Tensor3(m.full())


def residual(x, m: CpModel) -> Tensor3:
    """``X - M`` at observed positions; unobserved entries stay masked."""
    if not isinstance(x, Tensor3):
        x = Tensor3(x)
    if x.dims != m.dims:
        raise ShapeError(f"data dims {x.dims} != model dims {m.dims}")
    return Tensor3(x.values - m.full(), x.mask)


def tcc(u, v) -> float:
    """Tucker congruence coefficient ``<u, v> / (|u| |v|)``."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape or u.size == 0:
        raise ValueError("tcc needs two non-empty vectors of equal length")
    mu, mv = np.abs(u).max(), np.abs(v).max()
    if mu == 0 or mv == 0:
        raise ValueError("tcc is undefined for a zero vector")
    # power-of-two rescaling is exact and keeps the products in range;
    # sqrt(uu * vv) then reproduces uv exactly when u and v are parallel
    u = np.ldexp(u, -np.frexp(mu)[1])
    v = np.ldexp(v, -np.frexp(mv)[1])
    uv, uu, vv = float(u @ v), float(u @ u), float(v @ v)
    return float(np.clip(uv / np.sqrt(uu * vv), -1.0, 1.0))


def congruence_matrix(p, q) -> np.ndarray:
    """Pairwise congruence between the columns of ``p`` and ``q``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    np_ = np.linalg.norm(p, axis=0)
    nq = np.linalg.norm(q, axis=0)
    np_ = np.where(np_ > 0, np_, np.inf)
    nq = np.where(nq > 0, nq, np.inf)
    return np.clip((p / np_).T @ (q / nq), -1.0, 1.0)


@dataclass
class Alignment:
    """``other`` column ``perm[r]`` matches ``ref`` column ``r``.

    ``signs[n][r]`` is the sign applied to that column in compared mode
    ``modes[n]``; ``congruence[n][r]`` the resulting (non-negative) TCC.
    """

    perm: np.ndarray
    signs: np.ndarray
    congruence: np.ndarray
    modes: tuple

    @property
    def mean_tcc(self) -> float:
        return float(self.congruence.mean())

    def mode_tcc(self, mode: int) -> float:
        return float(self.congruence[self.modes.index(mode)].mean())


def align_factors(ref: CpModel, other: CpModel, modes: Sequence[int] = (1, 2, 3)) -> Alignment:
    """Greedy maximum-congruence column matching of ``other`` onto ``ref``."""
    if ref.rank != other.rank:
        raise ValueError(f"rank mismatch: {ref.rank} vs {other.rank}")
    modes = tuple(modes)
    for n in modes:
        if ref.factor(n).shape[0] != other.factor(n).shape[0]:
            raise ShapeError(f"mode-{n} sizes differ; cannot compare")
    cms = np.stack([congruence_matrix(ref.factor(n), other.factor(n)) for n in modes])
    score = np.abs(cms).mean(axis=0)
    r = ref.rank
    perm = np.full(r, -1)
    work = score.copy()
    for _ in range(r):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        perm[i] = j
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    matched = cms[:, np.arange(r), perm]
    signs = np.where(matched < 0, -1.0, 1.0)
    return Alignment(perm, signs, np.abs(matched), modes)


@dataclass
class RankRecord:
    rank: int
    tcc_B: float
    tcc_C: float
    accepted: bool
    degenerate: bool = False


@dataclass
class RankValidationReport:
    records: list
    chosen_R: Optional[int]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "chosen_R": self.chosen_R,
            "records": [vars(r) for r in self.records],
        }


def split_half_validate(
    x,
    ranks: Sequence[int],
    cfg: Optional[AlsConfig] = None,
    threshold: float = 0.85,
    repetitions: int = 1,
    seed: int = 0,
) -> RankValidationReport:
    """Choose the rank by split-half validation over mode-1 slices.

    For each repetition the mode-1 slices are randomly split into two
    halves; each half is fitted independently for every candidate rank and
    the B and C factors are compared after alignment. A rank is accepted if
    the smaller of the mean aligned congruences in modes B and C (averaged
    over repetitions) reaches ``threshold``.
    """
    cfg = cfg or AlsConfig()
    if not isinstance(x, Tensor3):
        x = Tensor3(x)
    I = x.dims[0]
    if I < 4:
        raise ValueError("split-half validation needs at least 4 mode-1 slices")
    if not ranks:
        raise ValueError("no candidate ranks")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(repetitions):
        order = rng.permutation(I)
        splits.append((np.sort(order[: I // 2]), np.sort(order[I // 2:])))

    records = []
    for R in sorted(set(int(r) for r in ranks)):
        tb, tc, degen = [], [], False
        for rep, (h1, h2) in enumerate(splits):
            m1 = als_fit(x.subtensor(h1), R, cfg.replace(seed=cfg.seed + 2 * rep))
            m2 = als_fit(x.subtensor(h2), R, cfg.replace(seed=cfg.seed + 2 * rep + 1))
            al = align_factors(m1, m2, modes=(2, 3))
            tb.append(al.mode_tcc(2))
            tc.append(al.mode_tcc(3))
            degen |= m1.meta["degenerate"] or m2.meta["degenerate"]
        rec = RankRecord(R, float(np.mean(tb)), float(np.mean(tc)), False, degen)
        rec.accepted = min(rec.tcc_B, rec.tcc_C) >= threshold
        log.debug("split-half R=%d tcc_B=%.4f tcc_C=%.4f", R, rec.tcc_B, rec.tcc_C)
        records.append(rec)
    accepted = [r.rank for r in records if r.accepted]
    return RankValidationReport(records, max(accepted) if accepted else None, threshold)
