"""Central finite-difference verification of every analytic and autodiff gradient.

Each suite draws random instances, computes the gradient under test and
compares it against ``(f(x + h e_i) - f(x - h e_i)) / 2h`` on a random sample
of coordinates of every parameter. The error of one instance is

    ||g_sampled - fd_sampled|| / max(||g_sampled||, ||fd_sampled||, 1e-8)

and a suite passes when the worst instance stays below the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn
from .hyperparams import Hyperparams
from .nn import Var

STEP = 1e-5
TOL = 1e-4


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_rel_error: float
    instances: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / den)


def sample_coords(shape, rng: np.random.Generator, n: int) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in np.sort(flat)]


def compare(f: Callable[[], float], arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
            rng: np.random.Generator, n_coords: int = 6, h: float = STEP) -> float:
    """Check ``grads`` against central differences of ``f``.

    ``f`` reads the arrays in ``arrays`` (mutated in place while probing).
    """
    ana, num = [], []
    for name in sorted(arrays):
        a = arrays[name]
        for idx in sample_coords(a.shape, rng, n_coords):
            keep = a[idx]
            a[idx] = keep + h
            fp = f()
            a[idx] = keep - h
            fm = f()
            a[idx] = keep
            num.append((fp - fm) / (2 * h))
            ana.append(grads[name][idx])
    return rel_error(np.array(ana), np.array(num))


def check_graph(build: Callable[[], Var], params: dict[str, Var], rng: np.random.Generator,
                n_coords: int = 6, corrupt: bool = False) -> float:
    """Compare reverse-mode gradients of the scalar ``build()`` with finite differences."""
    out = build()
    out.backward()
    grads = {k: v.grad.copy() for k, v in params.items()}
    if corrupt:
        _corrupt(grads)
    arrays = {k: v.value for k, v in params.items()}
    return compare(lambda: float(build().value), arrays, grads, rng, n_coords)


def _corrupt(grads: dict[str, np.ndarray]) -> None:
    for g in grads.values():
        if g is not None:
            g *= 1.05
            g += 1e-3


def _probe(out: Var, rng: np.random.Generator) -> Var:
    # random linear functional turning a tensor output into a scalar
    return nn.total(nn.mul(out, rng.standard_normal(out.shape)))


# -- layer suites -------------------------------------------------------------------


def _layer_conv3d(rng, corrupt):
    spec = nn.ConvSpec((3, 2, 3), 2, 3)
    x = Var(rng.standard_normal((2, 2, 4, 3, 4)))
    layer = nn.Conv(spec, rng)
    layer.b.value = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 4, 3, 4))
    params = {"x": x, **layer.params()}
    return check_graph(lambda: nn.total(nn.mul(layer(x), r)), params, rng, corrupt=corrupt)


def _layer_conv2d(rng, corrupt):
    stride = int(rng.integers(1, 3))
    padding = ("same", "valid")[int(rng.integers(2))]
    spec = nn.ConvSpec((3, 3), 3, 2, stride=stride, padding=padding)
    x = Var(rng.standard_normal((2, 3, 5, 5)))
    layer = nn.Conv(spec, rng)
    layer.b.value = rng.standard_normal(2)
    r = rng.standard_normal((2, 2) + spec.output_shape((5, 5)))
    params = {"x": x, **layer.params()}
    return check_graph(lambda: nn.total(nn.mul(layer(x), r)), params, rng, corrupt=corrupt)


def _layer_dws(rng, corrupt):
    layer = nn.DepthwiseSeparable(3, 4, 3, rng)
    x = Var(rng.standard_normal((2, 3, 5, 5)))
    r = rng.standard_normal((2, 4, 5, 5))
    params = {"x": x, **layer.params()}
    return check_graph(lambda: nn.total(nn.mul(layer(x), r)), params, rng, corrupt=corrupt)


def _layer_attention(rng, corrupt):
    layer = nn.ChannelAttention(6, 2, rng)
    layer.b1.value = rng.standard_normal(layer.b1.shape)
    layer.b2.value = rng.standard_normal(layer.b2.shape)
    x = Var(rng.standard_normal((2, 6, 3, 3)))
    r = rng.standard_normal((2, 6, 3, 3))
    params = {"x": x, **layer.params()}
    return check_graph(lambda: nn.total(nn.mul(layer(x), r)), params, rng, corrupt=corrupt)


def _layer_fusion(rng, corrupt):
    # concatenation followed by flatten and affine, as in the classifier tail
    a = Var(rng.standard_normal((2, 2, 3, 3)))
    b = Var(rng.standard_normal((2, 3, 3, 3)))
    head = nn.Affine(45, 3, rng)
    params = {"a": a, "b": b, **head.params()}
    r = rng.standard_normal((2, 3))
    build = lambda: nn.total(nn.mul(head(nn.flatten(nn.concat_channels(a, b))), r))
    return check_graph(build, params, rng, corrupt=corrupt)


def _classification_loss(rng, corrupt):
    m = int(rng.integers(2, 6))
    logits = Var(3 * rng.standard_normal((4, m)))
    labels = rng.integers(1, m + 1, size=4)
    return check_graph(lambda: nn.softmax_xent(logits, labels), {"logits": logits}, rng,
                       corrupt=corrupt)


# -- decomposition objective suites ---------------------------------------------------


def _sdtn_instance(rng):
    from .sdtn import init_state
    from .tensor_core import rank_matrix

    shape = (3, 4, 3)
    ranks = rank_matrix(3, [[0, 2, 1], [2, 0, 2], [1, 2, 0]])
    state = init_state(shape, ranks, [1, 2, 1], seed=int(rng.integers(2**32)), n_classes=3)
    # replace zero parts of the start so every gradient is exercised
    glr = tuple(None if q is None else type(q)(q.mode, rng.standard_normal(q.U.shape), q.V)
                for q in state.glr)
    head = (0.5 * rng.standard_normal(state.head[0].shape), rng.standard_normal(3))
    from dataclasses import replace
    state = replace(state, glr=glr, head=head)
    X = rng.standard_normal(shape)
    label = int(rng.integers(1, 4))
    return state, X, label


def _state_arrays(state) -> dict[str, np.ndarray]:
    out = {f"G{k}": g.copy() for k, g in enumerate(state.factors.factors)}
    for k, q in enumerate(state.glr):
        if q is not None:
            out[f"U{k}"], out[f"V{k}"] = q.U.copy(), q.V.copy()
    out["W"], out["b"] = state.head[0].copy(), state.head[1].copy()
    return out


def _state_from(arrays, like):
    from dataclasses import replace
    from .sdtn import GradLowRankPair
    from .tensor_core import FactorSet

    n = like.factors.order
    factors = FactorSet(like.ranks, [arrays[f"G{k}"] for k in range(n)])
    glr = tuple(None if q is None else GradLowRankPair(k, arrays[f"U{k}"], arrays[f"V{k}"])
                for k, q in enumerate(like.glr))
    return replace(like, factors=factors, glr=glr, head=(arrays["W"], arrays["b"]))


def _grad_arrays(g: dict) -> dict[str, np.ndarray]:
    out = {f"G{k}": a for k, a in enumerate(g["G"])}
    for k, (u, v) in enumerate(zip(g["U"], g["V"])):
        if u is not None:
            out[f"U{k}"], out[f"V{k}"] = u, v
    out["W"], out["b"] = g["W"], g["b"]
    return out


_NONE = dict(alpha=0.0, lambda1=0.0, lambda2=0.0, lambda3=0.0, beta=0.0)
_TERM_HP = {
    "recon": dict(_NONE),
    "lowrank": dict(_NONE, alpha=0.7),
    "reg": dict(_NONE, lambda1=0.3, lambda2=0.2, lambda3=0.4),
    "cls": dict(_NONE, beta=1.3),
}


def _sdtn_term(term: str):
    def run(rng, corrupt):
        from .sdtn import sdtn_grad, sdtn_loss_terms

        state, X, label = _sdtn_instance(rng)
        base = Hyperparams(**_NONE)
        if term == "total":
            hp = Hyperparams(alpha=0.7, lambda1=0.3, lambda2=0.2, lambda3=0.4, beta=1.3)
            grads = _grad_arrays(sdtn_grad(state, X, label, hp))
            value = lambda s: sdtn_loss_terms(s, X, label, hp)["total"]
        else:
            hp = Hyperparams(**_TERM_HP[term])
            g1 = _grad_arrays(sdtn_grad(state, X, label, hp))
            if term == "recon":
                grads = g1
            else:
                g0 = _grad_arrays(sdtn_grad(state, X, label, base))
                grads = {k: g1[k] - g0[k] for k in g1}
            weight = {"recon": 1.0, "lowrank": 1.0, "reg": 1.0, "cls": hp.beta}[term]
            value = lambda s: weight * sdtn_loss_terms(s, X, label, hp)[term]
        if corrupt:
            _corrupt(grads)
        arrays = _state_arrays(state)
        return compare(lambda: value(_state_from(arrays, state)), arrays, grads, rng)

    return run


# -- joint objective suite ---------------------------------------------------------


def tiny_trn_config(mode: str = "TRN", seed: int = 0):
    from .trn import TrnConfig

    hp = Hyperparams(alpha=0.3, lambda1=0.05, lambda2=0.05, lambda3=0.05, beta=1.0,
                     gamma=0.2, seed=seed)
    return TrnConfig(patch_size=5, bands=4, n_classes=2, mode=mode, conv3d_kernel=(3, 3, 3),
                     conv3d_filters=2, conv2d_filters=3, pointwise_out=4, reduction=2,
                     fctn_rank=2, glr_rank=1, prefit_iters=0, infer_iters=0, hp=hp)


def _joint(rng, corrupt):
    from .trn import TrnModel, init_tensors, joint_objective

    cfg = tiny_trn_config(seed=int(rng.integers(2**32)))
    model = TrnModel(cfg, rng)
    # a non-zero classifier so every upstream layer receives gradient
    model.classifier.W.value = 0.3 * rng.standard_normal(model.classifier.W.shape)
    X = rng.uniform(0, 1, size=(2,) + cfg.patch_shape)
    labels = np.array([1, 2])
    tensors = init_tensors(cfg, X, cfg.hp.seed)
    tvars = {k: Var(v) for k, v in tensors.named().items()}
    for k in tvars:
        if k.startswith("sdtn.U"):
            tvars[k].value = 0.3 * rng.standard_normal(tvars[k].shape)
    params = {**model.params(), **tvars}
    build = lambda: joint_objective(model, tvars, X, labels, cfg.effective_hp)[0]
    return check_graph(build, params, rng, n_coords=4, corrupt=corrupt)


SUITES: dict[str, Callable] = {
    "nn.conv3d": _layer_conv3d,
    "nn.conv2d": _layer_conv2d,
    "nn.depthwise_separable": _layer_dws,
    "nn.channel_attention": _layer_attention,
    "nn.fusion_affine": _layer_fusion,
    "loss.classification": _classification_loss,
    "sdtn.recon": _sdtn_term("recon"),
    "sdtn.lowrank": _sdtn_term("lowrank"),
    "sdtn.reg": _sdtn_term("reg"),
    "sdtn.cls": _sdtn_term("cls"),
    "sdtn.total": _sdtn_term("total"),
    "trn.joint": _joint,
}


def run_suites(names: Iterable[str] | None = None, instances: int = 20, seed: int = 0,
               corrupt: Iterable[str] = ()) -> list[SuiteResult]:
    """Run the named suites (all by default); ``corrupt`` names suites to fault-inject."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in list(names) + list(corrupt) if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown gradient suites: {unknown}")
    corrupt = set(corrupt)
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(instances):
            err = SUITES[name](rng, name in corrupt)
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        results.append(SuiteResult(name, worst, instances))
    return results
