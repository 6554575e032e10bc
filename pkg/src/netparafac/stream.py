"""Residual extraction for data outside the training tensor.

Offline, a new mode-1 slice is projected onto the trained ``B`` and ``C``
factors. Online, a :class:`TensorWindow` keeps the last ``W`` time slices and
updates the model every minute either by a full warm-started refit (FWO) or
by the partial scheme (PWO) that keeps the older time loadings fixed and
re-estimates only ``A``, ``B`` and the newest loading.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .cp import AlsConfig, CpModel, als_fit
from .tensor import ShapeError, Tensor3, fold, khatri_rao, masked_lsq_rows, pinv, unfold


@dataclass
class SliceProjection:
    a_new: np.ndarray
    residual_slice: Tensor3
    fit: float


def _design(model: CpModel) -> np.ndarray:
    # R x JK, weights folded in so that a_new is on the scale of model rows
    return (khatri_rao(model.C, model.B) * model.weights).T


def project_slice(x_new, model: CpModel) -> SliceProjection:
    """Least-squares loading of one new mode-1 slice against fixed ``B``, ``C``.

    ``x_new`` is a ``1 x J x K`` :class:`Tensor3` (or a ``J x K`` array).
    Unobserved entries are left out of the solve and stay masked in the
    residual.
    """
    if not isinstance(x_new, Tensor3):
        arr = np.asarray(x_new, dtype=float)
        x_new = Tensor3(arr[None] if arr.ndim == 2 else arr)
    if x_new.dims[0] != 1:
        raise ShapeError("project_slice expects a single mode-1 slice")
    a, res = project_slices(x_new, model)
    return SliceProjection(a[0], res, res.frob_norm())


def project_slices(x, model: CpModel) -> tuple[np.ndarray, Tensor3]:
    """Batch form of :func:`project_slice`: one loading row per slice of ``x``."""
    if not isinstance(x, Tensor3):
        x = Tensor3(x)
    if x.dims[1:] != model.dims[1:]:
        raise ShapeError(f"slice dims {x.dims[1:]} != model dims {model.dims[1:]}")
    design = _design(model)
    x1 = unfold(x, 1)
    if x.has_mask:
        a_new = masked_lsq_rows(x1, design, unfold(x.mask.astype(float), 1) > 0)
    else:
        a_new = x1 @ pinv(design)
    est = a_new @ design
    return a_new, Tensor3(fold(x1 - est, 1, x.dims).values, x.mask)


@dataclass
class StepResult:
    """Outcome of one online step at absolute minute ``t``."""

    t: int
    model: CpModel
    residual_slice: np.ndarray
    iterations: int
    wall_time: float


class TensorWindow:
    """Sliding window over the time mode for online PARAFAC.

    The first ``W`` slices only fill the buffer; once it is full the
    initial model is fitted offline and every later slice goes through
    :meth:`fwo_step` or :meth:`pwo_step`. Factors are kept unnormalized
    (weights folded into ``A``).
    """

    def __init__(self, W: int, rank: int, cfg: Optional[AlsConfig] = None,
                 pwo_tol: float = 1e-4, pwo_max_iters: int = 20):
        if W < 2:
            raise ValueError("window length W must be >= 2")
        self.W = W
        self.rank = rank
        self.cfg = cfg or AlsConfig()
        self.pwo_tol = pwo_tol
        self.pwo_max_iters = pwo_max_iters
        self.buffer: Optional[np.ndarray] = None
        self.n_filled = 0
        self.t = -1
        self.A = self.B = self.C = None

    @property
    def warm(self) -> bool:
        return self.A is not None

    @property
    def dims(self):
        return None if self.buffer is None else self.buffer.shape

    def model(self) -> CpModel:
        return CpModel(self.A.copy(), self.B.copy(), self.C.copy())

    def _check_slice(self, new_slice) -> np.ndarray:
        s = np.asarray(new_slice, dtype=float)
        if s.ndim != 2:
            raise ShapeError("a time slice must be an I x J matrix")
        if self.buffer is not None and s.shape != self.buffer.shape[:2]:
            raise ShapeError(f"slice shape {s.shape} != window shape {self.buffer.shape[:2]}")
        if not np.all(np.isfinite(s)):
            raise ValueError("time slice contains non-finite values")
        return s

    def push_warmup(self, new_slice) -> bool:
        """Add a slice during warm-up. Returns ``True`` once the model exists."""
        s = self._check_slice(new_slice)
        if self.warm:
            raise RuntimeError("window already warmed up; use fwo_step/pwo_step")
        if self.buffer is None:
            self.buffer = np.zeros((*s.shape, self.W))
        self.buffer[:, :, self.n_filled] = s
        self.n_filled += 1
        self.t += 1
        if self.n_filled == self.W:
            m = als_fit(Tensor3(self.buffer), self.rank, self.cfg)
            self.A, self.B, self.C = (f.copy() for f in m.factors)
        return self.warm

    def _slide(self, s: np.ndarray) -> None:
        self.buffer[:, :, :-1] = self.buffer[:, :, 1:]
        self.buffer[:, :, -1] = s
        self.t += 1

    def _shifted_c(self) -> np.ndarray:
        # rows c(t-W+1..t-1) followed by the evicted c(t-W) as the seed for c(t)
        return np.vstack([self.C[1:], self.C[:1]])

    def _result(self, s, iterations, started) -> StepResult:
        m_t = (self.A * self.C[-1]) @ self.B.T
        return StepResult(self.t, self.model(), s - m_t, iterations,
                          time.perf_counter() - started)

    def fwo_step(self, new_slice, cfg: Optional[AlsConfig] = None) -> StepResult:
        """Full window optimization: warm-started ALS refit of all factors."""
        s = self._check_slice(new_slice)
        if not self.warm:
            raise RuntimeError("window is not warmed up")
        started = time.perf_counter()
        self._slide(s)
        init = CpModel(self.A, self.B, self._shifted_c())
        cfg = (cfg or self.cfg).replace(init=init, n_init=1)
        m = als_fit(Tensor3(self.buffer), self.rank, cfg)
        self.A, self.B, self.C = (f.copy() for f in m.factors)
        return self._result(s, m.meta["iterations"], started)

    def pwo_step(self, new_slice) -> StepResult:
        """Partial window optimization (the online algorithm).

        Rows ``1..W-1`` of ``C`` stay fixed; ``c(t)``, ``A`` and ``B`` are
        updated alternately until the relative change of the window fit is
        below ``pwo_tol`` or ``pwo_max_iters`` is reached.
        """
        s = self._check_slice(new_slice)
        if not self.warm:
            raise RuntimeError("window is not warmed up")
        started = time.perf_counter()
        self._slide(s)
        x = self.buffer
        x1, x2 = unfold(x, 1), unfold(x, 2)
        x3_t = s.reshape(1, -1, order="F")
        a, b = self.A, self.B
        c = self._shifted_c()
        fit_prev = None
        it = 0
        for it in range(1, self.pwo_max_iters + 1):
            c[-1] = (x3_t @ pinv(khatri_rao(b, a).T))[0]
            a = x1 @ pinv(khatri_rao(c, b).T)
            b = x2 @ pinv(khatri_rao(c, a).T)
            fit = float(np.linalg.norm(x - np.einsum("ir,jr,kr->ijk", a, b, c)))
            if fit_prev is not None and abs(fit_prev - fit) <= self.pwo_tol * fit_prev:
                break
            fit_prev = fit
        self.A, self.B, self.C = a, b, c
        return self._result(s, it, started)

    def step(self, new_slice, scheme: str = "pwo") -> Optional[StepResult]:
        """Warm up or advance, whichever applies. ``None`` while warming up."""
        if not self.warm:
            self.push_warmup(new_slice)
            return None
        if scheme == "pwo":
            return self.pwo_step(new_slice)
        if scheme == "fwo":
            return self.fwo_step(new_slice)
        raise ValueError(f"unknown scheme {scheme!r}")

    def add_entities(self, history, mask=None) -> None:
        """Append new mode-1 entities with their window history ``(n, J, W)``.

        New ``A`` rows are least-squares loadings against the current
        ``B`` and ``C`` restricted to observed minutes. Unobserved buffer
        cells are filled with the model estimate.
        """
        if not self.warm:
            raise RuntimeError("window is not warmed up")
        h = np.asarray(history, dtype=float)
        if h.ndim != 3 or h.shape[1:] != self.buffer.shape[1:]:
            raise ShapeError(f"history must be n x {self.buffer.shape[1]} x {self.W}")
        obs = np.isfinite(h) if mask is None else (np.asarray(mask, bool) & np.isfinite(h))
        design = khatri_rao(self.C, self.B).T
        a_new = masked_lsq_rows(unfold(np.where(obs, h, 0.0), 1), design,
                                unfold(obs.astype(float), 1) > 0)
        est = np.einsum("ir,jr,kr->ijk", a_new, self.B, self.C)
        self.buffer = np.concatenate([self.buffer, np.where(obs, h, est)], axis=0)
        self.A = np.vstack([self.A, a_new])


def run_stream(slices: Iterable, W: int, rank: int, scheme: str = "pwo",
               cfg: Optional[AlsConfig] = None, **window_kw):
    """Drive a window over a stream of ``I x J`` slices, yielding step results."""
    win = TensorWindow(W, rank, cfg, **window_kw)
    for s in slices:
        res = win.step(s, scheme)
        if res is not None:
            yield res


def write_residual_csv(path, results, entities, metrics, append=False) -> None:
    """Per-minute residuals as ``minute,entity_id,metric,residual`` rows."""
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["minute", "entity_id", "metric", "residual"])
        for r in results:
            for i, ent in enumerate(entities):
                for j, met in enumerate(metrics):
                    w.writerow([r.t, ent, met, repr(float(r.residual_slice[i, j]))])


def write_timing_csv(path, rows) -> None:
    """Rows of ``(minute, scheme, iterations, wall_time_seconds)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["minute", "scheme", "iterations", "wall_time_seconds"])
        for row in rows:
            w.writerow(row)
