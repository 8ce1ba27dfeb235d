"""Self-adaptive FCTN decomposition of hyperspectral patches.

The objective minimised for a patch ``X`` is::

    1/2 ||X - Xhat||^2
    + alpha/2 * sum_k ||D_k unfold(G_k, k) - U_k V_k||^2
    + sum_k (lambda1 ||U_k||^2 + lambda2 ||V_k||^2 + lambda3 ||G_k||^2)
    + beta * L_cls

where ``Xhat`` is the FCTN reconstruction of the factors ``G_k`` and ``D_k``
is the forward-difference operator along the rows of the mode-k unfolding.
``L_cls`` is the cross-entropy of a softmax classifier applied to the
spatially averaged reconstruction; it is only active when a label is given.

Internally every quantity carries a leading batch axis so that many patches
can be refined at once; the public single-patch functions use a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .hyperparams import Hyperparams
from .tensor_core import (
    BATCH_LABEL,
    FactorSet,
    contract_factors,
    diff_operator,
    factor_shape,
    fctn_labels,
    fctn_reconstruct,
    validate_rank_matrix,
)

LOG_CLAMP = 1e-12
# proximal weight of the alternating solver, relative to each block's mean curvature
ALS_PROX = 1e-6


class DivergenceError(FloatingPointError):
    """The objective became non-finite during optimisation."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value!r}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class GradLowRankPair:
    """Low-rank factorisation ``U @ V`` of the differenced mode-k unfolding."""

    mode: int
    U: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class RankPolicy:
    """Energy-threshold rank adaptation settings."""

    eps_trunc: float = 1e-4
    eps_grow: float = 5e-2
    rank_max: int = 8


@dataclass(frozen=True)
class SdtnState:
    factors: FactorSet
    glr: tuple[GradLowRankPair | None, ...]
    iter: int = 0
    loss_history: tuple[float, ...] = ()
    head: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.factors.shape

    @property
    def ranks(self) -> np.ndarray:
        return self.factors.ranks

    @property
    def glr_ranks(self) -> list[int]:
        return [0 if p is None else p.rank for p in self.glr]


# -- parameter packing -------------------------------------------------------


def _params_from_state(state: SdtnState) -> dict:
    p = {
        "G": [g[None] for g in state.factors.factors],
        "U": [None if q is None else q.U[None] for q in state.glr],
        "V": [None if q is None else q.V[None] for q in state.glr],
        "W": None,
        "b": None,
    }
    if state.head is not None:
        p["W"], p["b"] = state.head
    return p


def _state_from_params(p: dict, like: SdtnState, **changes) -> SdtnState:
    factors = FactorSet(like.factors.ranks, [g[0] for g in p["G"]])
    glr = tuple(
        None if u is None else GradLowRankPair(k, u[0], v[0])
        for k, (u, v) in enumerate(zip(p["U"], p["V"]))
    )
    head = None if p["W"] is None else (p["W"], p["b"])
    return replace(like, factors=factors, glr=glr, head=head, **changes)


def _unfold_b(g: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(g, k + 1, 1).reshape(g.shape[0], g.shape[k + 1], -1)


def _fold_b(m: np.ndarray, k: int, gshape: tuple[int, ...]) -> np.ndarray:
    moved = (gshape[0], gshape[k + 1]) + gshape[1:k + 1] + gshape[k + 2:]
    return np.ascontiguousarray(np.moveaxis(m.reshape(moved), 1, k + 1))


def _features(xhat: np.ndarray) -> np.ndarray:
    """Average over every mode but the last (spectral) one; ``xhat`` is batched."""
    if xhat.ndim == 2:
        return xhat
    return xhat.mean(axis=tuple(range(1, xhat.ndim - 1)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- objective and gradient -------------------------------------------------


def _evaluate(p: dict, X: np.ndarray, hp: Hyperparams, labels=None, grad=True):
    """Per-sample objective terms and (optionally) gradients for batched parameters.

    ``labels`` holds class ids 1..M per sample or is None. The per-sample
    ``total`` sums to the batch objective, with the cross-entropy averaged
    over the batch.
    """
    G, U, V = p["G"], p["U"], p["V"]
    n = len(G)
    nb = X.shape[0]
    xhat = contract_factors(G, batch=True)
    resid = X - xhat
    axes = tuple(range(1, X.ndim))
    recon = 0.5 * np.sum(resid * resid, axis=axes)

    lowrank = np.zeros(nb)
    reg = np.zeros(nb)
    gaps = []
    for k in range(n):
        reg = reg + hp.lambda3 * np.sum(G[k] ** 2, axis=tuple(range(1, G[k].ndim)))
        if U[k] is None:
            gaps.append(None)
            continue
        d = diff_operator(G[k].shape[k + 1])
        gap = np.matmul(d, _unfold_b(G[k], k)) - np.matmul(U[k], V[k])
        gaps.append(gap)
        lowrank = lowrank + 0.5 * hp.alpha * np.sum(gap * gap, axis=(1, 2))
        reg = reg + hp.lambda1 * np.sum(U[k] ** 2, axis=(1, 2))
        reg = reg + hp.lambda2 * np.sum(V[k] ** 2, axis=(1, 2))

    cls = np.zeros(nb)
    probs = None
    if labels is not None:
        if p["W"] is None:
            raise ValueError("labels given but the state carries no classifier head")
        labels = np.asarray(labels, dtype=np.int64)
        m = p["W"].shape[0]
        if labels.shape != (nb,) or np.any(labels < 1) or np.any(labels > m):
            raise ValueError(f"labels must be {nb} class ids in [1, {m}]")
        h = _features(xhat)
        probs = _softmax(h @ p["W"].T + p["b"])
        py = probs[np.arange(nb), labels - 1]
        cls = -np.log(np.maximum(py, LOG_CLAMP))

    terms = {
        "recon": recon,
        "lowrank": lowrank,
        "reg": reg,
        "cls": cls,
        "total": recon + lowrank + reg + hp.beta * cls / nb,
    }
    if not grad:
        return terms, None

    dxhat = -resid
    g = {"G": [], "U": [], "V": [], "W": None, "b": None}
    if labels is not None:
        onehot = np.zeros_like(probs)
        onehot[np.arange(nb), labels - 1] = 1.0
        dz = (probs - onehot) * (hp.beta / nb)
        dz[py < LOG_CLAMP] = 0.0
        h = _features(xhat)
        g["W"] = dz.T @ h
        g["b"] = dz.sum(axis=0)
        dh = dz @ p["W"]
        if xhat.ndim == 2:
            dxhat = dxhat + dh
        else:
            spatial = int(np.prod(xhat.shape[1:-1]))
            shape = (nb,) + (1,) * (xhat.ndim - 2) + (xhat.shape[-1],)
            dxhat = dxhat + dh.reshape(shape) / spatial

    flabels, out = fctn_labels(n)
    lead = [BATCH_LABEL]
    for k in range(n):
        ops = [dxhat, lead + out]
        for j in range(n):
            if j != k:
                ops += [G[j], lead + flabels[j]]
        gk = np.einsum(*ops, lead + flabels[k], optimize="greedy")
        gk = gk + 2.0 * hp.lambda3 * G[k]
        if gaps[k] is not None:
            d = diff_operator(G[k].shape[k + 1])
            gk = gk + hp.alpha * _fold_b(np.matmul(d.T, gaps[k]), k, G[k].shape)
            g["U"].append(-hp.alpha * np.matmul(gaps[k], np.swapaxes(V[k], 1, 2))
                          + 2.0 * hp.lambda1 * U[k])
            g["V"].append(-hp.alpha * np.matmul(np.swapaxes(U[k], 1, 2), gaps[k])
                          + 2.0 * hp.lambda2 * V[k])
        else:
            g["U"].append(None)
            g["V"].append(None)
        g["G"].append(gk)
    return terms, g


def _check_x(state: SdtnState, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != state.shape:
        raise ValueError(f"tensor shape {X.shape} does not match factor shape {state.shape}")
    return X


def _batch_label(label):
    if label is None:
        return None
    return np.array([int(label)])


def sdtn_loss_terms(state: SdtnState, X, label: int | None = None,
                    hp: Hyperparams = Hyperparams()) -> dict[str, float]:
    """Individual objective terms (unweighted cross-entropy under ``cls``)."""
    X = _check_x(state, X)
    terms, _ = _evaluate(_params_from_state(state), X[None], hp, _batch_label(label), grad=False)
    return {k: float(v[0]) for k, v in terms.items()}


def sdtn_loss(state: SdtnState, X, label: int | None = None,
              hp: Hyperparams = Hyperparams()) -> float:
    return sdtn_loss_terms(state, X, label, hp)["total"]


def sdtn_grad(state: SdtnState, X, label: int | None = None,
              hp: Hyperparams = Hyperparams()) -> dict:
    """Analytic gradient of :func:`sdtn_loss`.

    Returns a dict with lists ``G``, ``U``, ``V`` (``None`` for modes without
    a low-rank pair) and the head gradients ``W``, ``b`` (``None`` without head).
    """
    X = _check_x(state, X)
    _, g = _evaluate(_params_from_state(state), X[None], hp, _batch_label(label))
    return {
        "G": [a[0] for a in g["G"]],
        "U": [None if a is None else a[0] for a in g["U"]],
        "V": [None if a is None else a[0] for a in g["V"]],
        "W": g["W"],
        "b": g["b"],
    }


def classification_loss(probs, labels: Sequence[int]) -> float:
    """Mean cross-entropy of probability rows against class ids 1..M."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty (batch, M) matrix")
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"expected {probs.shape[0]} labels, got {labels.shape}")
    m = probs.shape[1]
    if np.any(labels < 1) or np.any(labels > m):
        raise ValueError(f"labels must lie in [1, {m}]")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("every probability row must sum to 1")
    py = probs[np.arange(len(labels)), labels - 1]
    return float(np.mean(-np.log(np.maximum(py, LOG_CLAMP))))


# -- initialisation ----------------------------------------------------------


def _glr_cols(shape, ranks, k) -> int:
    fs = factor_shape(shape, ranks, k)
    return int(np.prod(fs)) // fs[k]


def _check_glr_ranks(shape, ranks, glr_ranks) -> list[int]:
    glr_ranks = [int(r) for r in glr_ranks]
    if len(glr_ranks) != len(shape):
        raise ValueError(f"need {len(shape)} low-rank ranks, got {len(glr_ranks)}")
    for k, r in enumerate(glr_ranks):
        if r == 0:
            continue
        cap = min(shape[k] - 1, _glr_cols(shape, ranks, k))
        if not 1 <= r <= cap:
            raise ValueError(f"low-rank rank for mode {k} must lie in [1, {cap}], got {r}")
    return glr_ranks


def clip_glr_ranks(shape: Sequence[int], ranks, r: int) -> list[int]:
    """Use rank ``r`` for every mode's low-rank pair, clipped to what the mode allows."""
    ranks = np.asarray(ranks, dtype=np.int64)
    out = []
    for k in range(len(shape)):
        cap = min(int(shape[k]) - 1, _glr_cols(shape, ranks, k))
        out.append(min(int(r), cap) if cap >= 1 else 0)
    return out


def init_state(shape: Sequence[int], ranks, glr_ranks: Sequence[int], seed: int = 0,
               n_classes: int | None = None) -> SdtnState:
    """Random starting point for :func:`fit`.

    Factor entries are uniform on ``[-s, s]`` with ``s = prod(ranks touching k) ** -0.5``;
    ``U_k = 0`` and ``V_k ~ N(0, 1/sqrt(r_k))``. A zero-initialised classifier
    head is attached when ``n_classes`` is given. A glr rank of 0 disables the
    gradient-domain pair for that mode.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or min(shape) < 1:
        raise ValueError(f"invalid shape {shape}")
    ranks = np.asarray(ranks, dtype=np.int64)
    validate_rank_matrix(ranks, len(shape))
    glr_ranks = _check_glr_ranks(shape, ranks, glr_ranks)
    rng = np.random.default_rng(seed)
    factors = []
    for k in range(len(shape)):
        fs = factor_shape(shape, ranks, k)
        touching = int(np.prod([ranks[m, k] for m in range(len(shape)) if m != k]))
        s = touching ** -0.5
        factors.append(rng.uniform(-s, s, size=fs))
    glr = []
    for k, r in enumerate(glr_ranks):
        if r == 0:
            glr.append(None)
            continue
        v = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, _glr_cols(shape, ranks, k)))
        glr.append(GradLowRankPair(k, np.zeros((shape[k] - 1, r)), v))
    head = None
    if n_classes is not None:
        if n_classes < 2:
            raise ValueError("a classifier head needs at least 2 classes")
        head = (np.zeros((n_classes, shape[-1])), np.zeros(n_classes))
    return SdtnState(FactorSet(ranks, factors), tuple(glr), head=head)


# -- optimisation ------------------------------------------------------------


def _axpy(p: dict, g: dict, step: np.ndarray) -> dict:
    """``p - step * g`` with a per-sample ``step`` vector."""

    def upd(a, da):
        if a is None:
            return None
        return a - step.reshape((-1,) + (1,) * (a.ndim - 1)) * da

    out = {key: [upd(a, da) for a, da in zip(p[key], g[key])] for key in ("G", "U", "V")}
    out["W"] = None if p["W"] is None else p["W"] - step[0] * g["W"]
    out["b"] = None if p["b"] is None else p["b"] - step[0] * g["b"]
    return out


def _descend(p: dict, X: np.ndarray, hp: Hyperparams, labels, start_iter: int,
             history: list[float]) -> tuple[dict, int]:
    """Run up to ``hp.max_iters`` descent steps on batched parameters.

    ``history`` receives the batch objective after every accepted step and
    must already hold the starting value.
    """
    nb = X.shape[0]
    if hp.step_mode == "als" and labels is not None:
        raise ValueError("alternating least squares handles the unsupervised objective only")
    if p["W"] is not None and hp.step_mode == "backtracking" and nb != 1:
        raise ValueError("a shared classifier head needs batch size 1 under backtracking")
    terms, g = _evaluate(p, X, hp, labels)
    loss = terms["total"]
    step = np.full(nb, hp.lr0)
    it = start_iter
    for _ in range(hp.max_iters):
        if hp.step_mode == "als":
            p = _als_sweep(p, X, hp, ALS_PROX)
            terms, g = _evaluate(p, X, hp, labels, grad=False)
            loss = terms["total"]
        elif hp.step_mode == "schedule":
            p = _axpy(p, g, np.full(nb, hp.lr(it)))
            terms, g = _evaluate(p, X, hp, labels)
            loss = terms["total"]
        else:
            trial = 2.0 * step
            active = np.ones(nb, dtype=bool)
            cand, cand_loss = p, loss.copy()
            for _halving in range(80):
                q = _axpy(p, g, np.where(active, trial, 0.0))
                t, _ = _evaluate(q, X, hp, labels, grad=False)
                ok = active & (t["total"] < loss)
                if np.any(ok):
                    cand = _merge(cand, q, ok)
                    cand_loss = np.where(ok, t["total"], cand_loss)
                    step = np.where(ok, trial, step)
                active &= ~ok
                if not np.any(active):
                    break
                trial = np.where(active, trial / 2.0, trial)
            if np.array_equal(cand_loss, loss):
                break
            p = cand
            terms, g = _evaluate(p, X, hp, labels)
            loss = terms["total"]
        it += 1
        total = float(np.sum(loss))
        if not math.isfinite(total):
            raise DivergenceError(it, total)
        history.append(total)
        if total == 0.0:
            break
        if len(history) > 50:
            ref = history[-51]
            if abs(ref - total) <= hp.tol * max(abs(ref), 1e-300):
                break
    return p, it


def _merge(a: dict, b: dict, take_b: np.ndarray) -> dict:
    def sel(x, y):
        if x is None:
            return None
        return np.where(take_b.reshape((-1,) + (1,) * (x.ndim - 1)), y, x)

    out = {key: [sel(x, y) for x, y in zip(a[key], b[key])] for key in ("G", "U", "V")}
    out["W"] = b["W"] if (a["W"] is not None and take_b[0]) else a["W"]
    out["b"] = b["b"] if (a["b"] is not None and take_b[0]) else a["b"]
    return out


def _environment(G: list, k: int) -> np.ndarray:
    """Batched matrix ``M_k`` with ``unfold(Xhat, k) = unfold(G_k, k) @ M_k``."""
    n = len(G)
    flabels, _ = fctn_labels(n)
    lead = [BATCH_LABEL]
    ops = []
    for j in range(n):
        if j != k:
            ops += [G[j], lead + flabels[j]]
    bonds = [flabels[k][m] for m in range(n) if m != k]
    data = [m for m in range(n) if m != k]
    env = np.einsum(*ops, lead + bonds + data, optimize="greedy")
    nb = env.shape[0]
    n_bonds = int(np.prod(env.shape[1:1 + len(bonds)]))
    return env.reshape(nb, n_bonds, -1)


def _sylvester_sym(L: np.ndarray, S: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve ``L A + A S = C`` for symmetric PSD ``L`` and symmetric PD ``S`` (batched)."""
    lam, P = np.linalg.eigh(L)
    sig, Q = np.linalg.eigh(S)
    Ct = np.swapaxes(P, -1, -2) @ C @ Q
    At = Ct / (lam[..., :, None] + sig[..., None, :])
    return P @ At @ np.swapaxes(Q, -1, -2)


def _als_sweep(p: dict, X: np.ndarray, hp: Hyperparams, prox: float) -> dict:
    """One proximal block-coordinate sweep over every factor and low-rank pair.

    Each block minimises the objective plus ``prox/2 * ||block - old||^2``
    (``prox`` scaled to the block's curvature), so the objective never increases.
    """
    G = list(p["G"])
    U = list(p["U"])
    V = list(p["V"])
    n = len(G)
    nb = X.shape[0]
    for k in range(n):
        gshape = G[k].shape
        A_old = _unfold_b(G[k], k)
        M = _environment(G, k)
        Xk = np.moveaxis(X, k + 1, 1).reshape(nb, X.shape[k + 1], -1)
        S = M @ np.swapaxes(M, 1, 2)
        c = S.shape[-1]
        rho = prox * (np.trace(S, axis1=1, axis2=2) / c + 1e-300)
        eye_c = np.eye(c)
        S = S + (2.0 * hp.lambda3 + rho)[:, None, None] * eye_c
        C = Xk @ np.swapaxes(M, 1, 2) + rho[:, None, None] * A_old
        ik = gshape[k + 1]
        if U[k] is not None and hp.alpha > 0:
            d = diff_operator(ik)
            L = np.broadcast_to(hp.alpha * d.T @ d, (nb, ik, ik))
            C = C + hp.alpha * d.T @ (U[k] @ V[k])
        else:
            L = np.zeros((nb, ik, ik))
        A = _sylvester_sym(L, S, C)
        G[k] = _fold_b(A, k, gshape)
        if U[k] is not None:
            P = diff_operator(ik) @ A
            r = U[k].shape[-1]
            eye_r = np.eye(r)
            # U block
            VVt = V[k] @ np.swapaxes(V[k], 1, 2)
            rho_u = prox * (hp.alpha * np.trace(VVt, axis1=1, axis2=2) / r + 1e-300)
            lhs = hp.alpha * VVt + (2.0 * hp.lambda1 + rho_u)[:, None, None] * eye_r
            rhs = hp.alpha * P @ np.swapaxes(V[k], 1, 2) + rho_u[:, None, None] * U[k]
            U[k] = np.swapaxes(np.linalg.solve(lhs, np.swapaxes(rhs, 1, 2)), 1, 2)
            # V block
            UtU = np.swapaxes(U[k], 1, 2) @ U[k]
            rho_v = prox * (hp.alpha * np.trace(UtU, axis1=1, axis2=2) / r + 1e-300)
            lhs = hp.alpha * UtU + (2.0 * hp.lambda2 + rho_v)[:, None, None] * eye_r
            rhs = hp.alpha * np.swapaxes(U[k], 1, 2) @ P + rho_v[:, None, None] * V[k]
            V[k] = np.linalg.solve(lhs, rhs)
    return {"G": G, "U": U, "V": V, "W": p["W"], "b": p["b"]}


def fit(X, ranks, glr_ranks: Sequence[int], hp: Hyperparams = Hyperparams(),
        label: int | None = None, n_classes: int | None = None,
        init: SdtnState | None = None, n_starts: int = 1,
        probe_iters: int = 100) -> SdtnState:
    """Fit FCTN factors and gradient-domain pairs to ``X``.

    Stops after ``hp.max_iters`` iterations or once the objective changes by
    less than ``hp.tol`` (relative) over 50 iterations. ``init`` warm-starts
    from an existing state, in which case ``ranks``/``glr_ranks`` must match it.

    With ``n_starts > 1`` (and no ``init``) each of the seeds
    ``hp.seed, hp.seed + 1, ...`` is run for ``probe_iters`` iterations and
    the lowest-objective start continues for the full budget. Loop-shaped
    networks (order >= 3) have genuine local minima, so this matters there.
    """
    X = np.asarray(X, dtype=np.float64)
    if init is None:
        if n_starts > 1:
            probe = hp.replace(max_iters=min(probe_iters, hp.max_iters))
            best = None
            for s in range(n_starts):
                st = init_state(X.shape, ranks, glr_ranks, (hp.seed + s) % 2**64, n_classes)
                st = _run(st, X, probe, label)
                if best is None or st.loss_history[-1] < best.loss_history[-1]:
                    best = st
            remaining = hp.max_iters - best.iter
            return _run(best, X, hp.replace(max_iters=max(remaining, 0)), label)
        state = init_state(X.shape, ranks, glr_ranks, hp.seed, n_classes)
    else:
        state = init
        if (not np.array_equal(state.ranks, np.asarray(ranks))
                or list(state.glr_ranks) != [int(r) for r in glr_ranks]):
            raise ValueError("warm-start state does not match the requested ranks")
    return _run(state, X, hp, label)


def _run(state: SdtnState, X: np.ndarray, hp: Hyperparams, label) -> SdtnState:
    _check_x(state, X)
    if label is not None and state.head is None:
        raise ValueError("a label needs a classifier head (pass n_classes)")
    p = _params_from_state(state)
    labels = _batch_label(label)
    if state.loss_history:
        history = list(state.loss_history)
    else:
        terms, _ = _evaluate(p, X[None], hp, labels, grad=False)
        start = float(terms["total"][0])
        if not math.isfinite(start):
            raise DivergenceError(state.iter, start)
        history = [start]
    p, it = _descend(p, X[None], hp, labels, state.iter, history)
    return _state_from_params(p, state, iter=it, loss_history=tuple(history))


def refine_batch(G: Sequence[np.ndarray], U: Sequence[np.ndarray | None],
                 V: Sequence[np.ndarray | None], X: np.ndarray, hp: Hyperparams,
                 iters: int, step_mode: str = "als") -> tuple[list, list, list]:
    """Unsupervised refinement of a batch of independent patches.

    Arrays carry a leading batch axis. Under ``als`` and ``backtracking`` every
    patch is updated independently of the others in the batch.
    """
    p = {"G": list(G), "U": list(U), "V": list(V), "W": None, "b": None}
    hp = hp.replace(max_iters=int(iters), step_mode=step_mode, beta=0.0, tol=1e-300)
    terms, _ = _evaluate(p, X, hp, grad=False)
    p, _ = _descend(p, X, hp, None, 0, [float(np.sum(terms["total"]))])
    return p["G"], p["U"], p["V"]


def relative_error(state: SdtnState, X) -> float:
    X = _check_x(state, X)
    nx = np.linalg.norm(X)
    err = np.linalg.norm(X - fctn_reconstruct(state.factors))
    return float(err / nx) if nx > 0 else float(err)


def extract_features(state: SdtnState) -> np.ndarray:
    """Feature tensor obtained by contracting the fitted factors."""
    return fctn_reconstruct(state.factors)


# -- rank adaptation ---------------------------------------------------------


def _bond_svd(gj: np.ndarray, gk: np.ndarray, j: int, k: int):
    """Gauge the bond between factors ``j`` and ``k`` into singular-value form.

    Only the product over the shared index enters the reconstruction, so the
    bond singular values are those of ``A^T B`` where ``A`` is ``G_k`` unfolded
    along axis ``j`` and ``B`` is ``G_j`` unfolded along axis ``k``.
    """
    a = np.moveaxis(gk, j, 0).reshape(gk.shape[j], -1)
    b = np.moveaxis(gj, k, 0).reshape(gj.shape[k], -1)
    qa, ra = np.linalg.qr(a.T)
    qb, rb = np.linalg.qr(b.T)
    pu, s, pvt = np.linalg.svd(ra @ rb.T)
    return qa, qb, pu, s, pvt


def _truncate_bond(gj, gk, j, k, eps):
    qa, qb, pu, s, pvt = _bond_svd(gj, gk, j, k)
    energy = s * s
    total = energy.sum()
    keep = len(s)
    while keep > 1 and energy[keep - 1:].sum() < eps * total:
        keep -= 1
    if keep == gk.shape[j]:
        return gj, gk, keep
    root = np.sqrt(s[:keep])
    new_a = (qa @ (pu[:, :keep] * root)).T  # keep x rest_k
    new_b = ((root[:, None] * pvt[:keep]) @ qb.T)  # keep x rest_j
    shape_k = list(np.moveaxis(gk, j, 0).shape)
    shape_j = list(np.moveaxis(gj, k, 0).shape)
    shape_k[0] = keep
    shape_j[0] = keep
    gk_new = np.moveaxis(new_a.reshape(shape_k), 0, j)
    gj_new = np.moveaxis(new_b.reshape(shape_j), 0, k)
    return np.ascontiguousarray(gj_new), np.ascontiguousarray(gk_new), keep


def _grow_axis(g: np.ndarray, axis: int, new: int, rng, scale: float) -> np.ndarray:
    extra = list(g.shape)
    extra[axis] = new - g.shape[axis]
    if extra[axis] <= 0:
        return g
    pad = rng.uniform(-scale, scale, size=extra)
    return np.concatenate([g, pad], axis=axis)


def _seed_glr(g: np.ndarray, k: int, r: int) -> GradLowRankPair | None:
    if r == 0:
        return None
    dg = diff_operator(g.shape[k]) @ np.moveaxis(g, k, 0).reshape(g.shape[k], -1)
    u, s, vt = np.linalg.svd(dg, full_matrices=False)
    root = np.sqrt(s[:r])
    U = np.zeros((dg.shape[0], r))
    V = np.zeros((r, dg.shape[1]))
    U[:, :len(root)] = u[:, :r] * root
    V[:len(root)] = root[:, None] * vt[:r]
    return GradLowRankPair(k, U, V)


def adapt_ranks(state: SdtnState, X, policy: RankPolicy = RankPolicy(), seed: int = 0):
    """One round of energy-threshold rank adaptation.

    Every FCTN bond is brought to singular-value form; trailing singular
    values carrying less than ``policy.eps_trunc`` of the bond energy are cut.
    If the relative reconstruction error of ``state`` exceeds
    ``policy.eps_grow`` all pair ranks grow by one (capped at
    ``policy.rank_max``); new slices are small uniform noise. Low-rank pairs
    are re-seeded from a truncated SVD of the differenced unfolding.

    Returns ``(ranks, glr_ranks, new_state)``; ``new_state`` has ``iter = 0``
    and an empty loss history.
    """
    X = _check_x(state, X)
    n = state.factors.order
    ranks = state.ranks.copy()
    G = [g.copy() for g in state.factors.factors]
    err = relative_error(state, X)

    if policy.eps_trunc > 0:
        for j in range(n):
            for k in range(j + 1, n):
                G[j], G[k], r = _truncate_bond(G[j], G[k], j, k, policy.eps_trunc)
                ranks[j, k] = ranks[k, j] = r

    if err > policy.eps_grow:
        rng = np.random.default_rng(seed)
        grown = np.minimum(ranks + 1, policy.rank_max)
        np.fill_diagonal(grown, 0)
        grown = np.maximum(grown, ranks)
        if not np.array_equal(grown, ranks):
            for k in range(n):
                scale = 1e-2 * (np.sqrt(np.mean(G[k] ** 2)) or 1.0)
                for m in range(n):
                    if m != k:
                        G[k] = _grow_axis(G[k], m, int(grown[m, k]), rng, scale)
            ranks = grown

    shape = state.shape
    glr_ranks = []
    for k, r in enumerate(state.glr_ranks):
        if r == 0:
            glr_ranks.append(0)
        else:
            glr_ranks.append(max(1, min(r, shape[k] - 1, _glr_cols(shape, ranks, k))))
    glr = tuple(_seed_glr(G[k], k, r) for k, r in enumerate(glr_ranks))
    new_state = SdtnState(FactorSet(ranks, G), glr, head=state.head)
    return ranks, glr_ranks, new_state


def fit_adaptive(X, ranks, glr_ranks, hp: Hyperparams = Hyperparams(),
                 policy: RankPolicy = RankPolicy(), max_rounds: int = 10):
    """Alternate :func:`fit` and :func:`adapt_ranks` until the ranks settle.

    Returns the final state and the list of ``(rank matrix, relative error)``
    visited, one entry per fit.
    """
    X = np.asarray(X, dtype=np.float64)
    state = fit(X, ranks, glr_ranks, hp)
    trail = [(state.ranks.copy(), relative_error(state, X))]
    for round_ in range(max_rounds):
        new_ranks, new_glr, warm = adapt_ranks(state, X, policy, seed=hp.seed + round_ + 1)
        if np.array_equal(new_ranks, state.ranks):
            break
        state = fit(X, new_ranks, new_glr, hp, init=warm)
        trail.append((state.ranks.copy(), relative_error(state, X)))
    return state, trail
