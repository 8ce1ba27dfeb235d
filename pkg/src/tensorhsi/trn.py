"""Dual-pathway classifier over FCTN features, trained jointly with the decomposition.

Pipeline for a batch of feature tensors ``H`` of shape ``[N, P, P, B]``:

* 3D pathway: ``H`` as a one-channel volume ``[N, 1, B, P, P]`` (spectral
  depth first), one 3D convolution, then the depth axis is folded into
  channels giving ``[N, F3 * B, P, P]``.
* 2D pathway: bands become channels, ``[N, B, P, P]``, one 2D convolution.
* Channel concatenation, depthwise-separable convolution, channel attention,
  flatten, affine map to class logits.

Three modes share this code. ``TRN`` trains everything on the full joint
objective. ``SDTN-only`` replaces the convolutional network with the small
pooled-affine head of the decomposition objective. ``CNN-baseline`` feeds raw
patches to the network and switches every tensor term off.
"""
from __future__ import annotations

import math
import string
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .hyperparams import Hyperparams
from .nn import Var
from .sdtn import DivergenceError, clip_glr_ranks, init_state, refine_batch
from .tensor_core import BATCH_LABEL, contract_factors, diff_operator, fctn_labels, rank_matrix

MODES = ("TRN", "SDTN-only", "CNN-baseline")
TERMS = ("recon", "lowrank", "reg", "cls", "cons")


@dataclass(frozen=True)
class TrnConfig:
    patch_size: int = 9
    bands: int = 103
    n_classes: int = 9
    mode: str = "TRN"
    conv3d_kernel: tuple[int, int, int] = (7, 3, 3)
    conv3d_filters: int = 8
    conv2d_kernel: int = 3
    conv2d_filters: int = 16
    dw_kernel: int = 3
    pointwise_out: int = 32
    reduction: int = 4
    fctn_rank: int = 3
    glr_rank: int = 2
    prefit_iters: int = 30
    infer_iters: int = 30
    hp: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        object.__setattr__(self, "conv3d_kernel", tuple(int(k) for k in self.conv3d_kernel))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.bands < 1:
            raise ValueError("need at least 1 band")
        if len(self.conv3d_kernel) != 3:
            raise ValueError("conv3d_kernel needs 3 extents (spectral, row, column)")
        for name in ("conv3d_filters", "conv2d_kernel", "conv2d_filters", "dw_kernel",
                     "pointwise_out", "reduction", "fctn_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.glr_rank < 0 or self.prefit_iters < 0 or self.infer_iters < 0:
            raise ValueError("glr_rank, prefit_iters and infer_iters must be >= 0")

    @property
    def uses_tensors(self) -> bool:
        return self.mode != "CNN-baseline"

    @property
    def effective_hp(self) -> Hyperparams:
        """Loss weights actually used: the baseline zeroes every tensor term."""
        if self.mode == "CNN-baseline":
            return self.hp.replace(alpha=0.0, lambda1=0.0, lambda2=0.0, lambda3=0.0, gamma=0.0)
        if self.mode == "SDTN-only":
            return self.hp.replace(gamma=0.0)
        return self.hp

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return (self.patch_size, self.patch_size, self.bands)

    @property
    def ranks(self) -> np.ndarray:
        return rank_matrix(3, self.fctn_rank)

    @property
    def glr_ranks(self) -> list[int]:
        return clip_glr_ranks(self.patch_shape, self.ranks, self.glr_rank)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv3d_kernel"] = list(self.conv3d_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrnConfig":
        d = dict(d)
        d["hp"] = Hyperparams.from_dict(d.get("hp", {}))
        return cls(**d)


@dataclass(frozen=True)
class TrnBatch:
    """Labelled training patches ``[N, P, P, B]`` with class ids 1..M."""

    patches: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "patches", np.asarray(self.patches, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.patches.ndim != 4:
            raise ValueError(f"patches must be [N, P, P, B], got {self.patches.shape}")
        if self.labels.shape != (self.patches.shape[0],):
            raise ValueError("patch and label counts differ")
        if np.any(self.labels < 1):
            raise ValueError("labels must be class ids >= 1")


class TrnModel:
    """Network parameters for one configuration; ``params()`` has a stable order."""

    def __init__(self, cfg: TrnConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.hp.seed)
        p, b, m = cfg.patch_size, cfg.bands, cfg.n_classes
        self.layers: list[tuple[str, nn.Layer]] = []
        if cfg.mode == "SDTN-only":
            self.head = nn.Affine(b, m, None, zero=True)
            self.layers.append(("head", self.head))
            return
        self.spec3 = nn.ConvSpec(cfg.conv3d_kernel, 1, cfg.conv3d_filters)
        self.spec2 = nn.ConvSpec((cfg.conv2d_kernel,) * 2, b, cfg.conv2d_filters)
        self.conv3d = nn.Conv(self.spec3, rng)
        self.conv2d = nn.Conv(self.spec2, rng)
        self.fused = cfg.conv3d_filters * b + cfg.conv2d_filters
        self.dws = nn.DepthwiseSeparable(self.fused, cfg.pointwise_out, cfg.dw_kernel, rng)
        self.attention = nn.ChannelAttention(cfg.pointwise_out, cfg.reduction, rng)
        self.classifier = nn.Affine(cfg.pointwise_out * p * p, m, None, zero=True)
        self.layers += [("conv3d", self.conv3d), ("conv2d", self.conv2d), ("dws", self.dws),
                        ("attention", self.attention), ("classifier", self.classifier)]
        if cfg.mode == "TRN":
            self.proj_spec = nn.ConvSpec((1, 1), self.fused, b)
            self.proj = nn.Conv(self.proj_spec, rng)
            self.layers.append(("proj", self.proj))

    def params(self) -> dict[str, Var]:
        return nn.iter_params(self.layers)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params().items()}

    def load(self, arrays: dict[str, np.ndarray]) -> "TrnModel":
        params = self.params()
        if set(arrays) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(arrays) ^ set(params))}")
        for k, v in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != v.shape:
                raise ValueError(f"parameter {k!r} has shape {a.shape}, expected {v.shape}")
            v.value = a.copy()
            v.grad = np.zeros_like(v.value)
        return self

    def fusion(self, H: Var) -> Var:
        """Concatenated pathway outputs ``[N, F3 * B + F2, P, P]``."""
        n, p, _, b = H.shape
        vol = nn.reshape(nn.transpose(H, (0, 3, 1, 2)), (n, 1, b, p, p))
        f3 = self.conv3d(vol)
        f3 = nn.reshape(f3, (n, -1, p, p))
        f2 = self.conv2d(nn.transpose(H, (0, 3, 1, 2)))
        return nn.concat_channels(f3, f2)

    def logits(self, H: Var) -> tuple[Var, Var | None]:
        """Class logits for features ``H`` ``[N, P, P, B]`` and the fusion map (None for SDTN-only)."""
        if H.value.ndim != 4 or H.shape[1:] != self.cfg.patch_shape:
            raise ValueError(f"features must be [N, {self.cfg.patch_shape}], got {H.shape}")
        if self.cfg.mode == "SDTN-only":
            pooled = nn.reshape(nn.transpose(H, (0, 3, 1, 2)), (H.shape[0], H.shape[3], -1))
            pooled = nn.scale(nn.einsum("nbs->nb", pooled), 1.0 / (H.shape[1] * H.shape[2]))
            return self.head(pooled), None
        fused = self.fusion(H)
        refined = self.attention(self.dws(fused))
        return self.classifier(nn.flatten(refined)), fused

    def forward(self, H) -> np.ndarray:
        """Class probabilities for one ``[P, P, B]`` feature tensor or a batch of them."""
        H = np.asarray(H, dtype=np.float64)
        single = H.ndim == 3
        logits, _ = self.logits(Var(H[None] if single else H))
        probs = nn.softmax(logits.value)
        return probs[0] if single else probs


# -- tensor parameters -----------------------------------------------------------


def _letters(labels: Sequence[int]) -> str:
    return "".join(string.ascii_letters[l] for l in labels)


def fctn_var(G: Sequence[Var]) -> Var:
    """Batched FCTN reconstruction as a differentiable node."""
    flabels, out = fctn_labels(len(G))
    lead = [BATCH_LABEL]
    spec = ",".join(_letters(lead + f) for f in flabels) + "->" + _letters(lead + out)
    return nn.einsum(spec, *G)


def _unfold_var(g: Var, k: int) -> Var:
    nd = g.value.ndim
    axes = (0, k + 1) + tuple(a for a in range(1, nd) if a != k + 1)
    return nn.reshape(nn.transpose(g, axes), (g.shape[0], g.shape[k + 1], -1))


@dataclass
class TensorBatch:
    """Per-patch FCTN factors and low-rank pairs stacked along a leading batch axis."""

    G: list[np.ndarray]
    U: list[np.ndarray | None]
    V: list[np.ndarray | None]

    def take(self, idx) -> "TensorBatch":
        pick = lambda a: None if a is None else a[idx].copy()
        return TensorBatch([pick(a) for a in self.G], [pick(a) for a in self.U],
                           [pick(a) for a in self.V])

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for k, g in enumerate(self.G):
            out[f"sdtn.G{k}"] = g
        for k, (u, v) in enumerate(zip(self.U, self.V)):
            if u is not None:
                out[f"sdtn.U{k}"] = u
                out[f"sdtn.V{k}"] = v
        return out

    @classmethod
    def from_named(cls, d: dict[str, np.ndarray], order: int = 3) -> "TensorBatch":
        G = [d[f"sdtn.G{k}"] for k in range(order)]
        U = [d.get(f"sdtn.U{k}") for k in range(order)]
        V = [d.get(f"sdtn.V{k}") for k in range(order)]
        return cls(G, U, V)

    def features(self) -> np.ndarray:
        return contract_factors(self.G, batch=True)


def init_tensors(cfg: TrnConfig, patches: np.ndarray, seed: int) -> TensorBatch:
    """Per-patch random starts refined by ``cfg.prefit_iters`` alternating sweeps."""
    n = patches.shape[0]
    states = [init_state(cfg.patch_shape, cfg.ranks, cfg.glr_ranks, (seed + i) % 2**64)
              for i in range(n)]
    G = [np.stack([s.factors.factors[k] for s in states]) for k in range(3)]
    U = [None if states[0].glr[k] is None else np.stack([s.glr[k].U for s in states])
         for k in range(3)]
    V = [None if states[0].glr[k] is None else np.stack([s.glr[k].V for s in states])
         for k in range(3)]
    if cfg.prefit_iters:
        G, U, V = refine_batch(G, U, V, patches, cfg.effective_hp, cfg.prefit_iters)
    return TensorBatch(list(G), list(U), list(V))


# -- joint objective -------------------------------------------------------------


def joint_objective(model: TrnModel, tensors: dict[str, Var] | None, X: np.ndarray,
                    labels, hp: Hyperparams) -> tuple[Var, dict[str, float], Var]:
    """Build the joint objective graph.

    Returns ``(total, terms, logits)``; ``terms`` holds the weighted value of
    every term (``recon``, ``lowrank``, ``reg``, ``cls``, ``cons``). Tensor
    terms are exactly 0 when ``tensors`` is None or the mode is ``CNN-baseline``
    (raw patches feed the network and tensor gradients stay zero).
    """
    cfg = model.cfg
    if not cfg.uses_tensors:
        tensors = None
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1:] != cfg.patch_shape:
        raise ValueError(f"patches must be [N, {cfg.patch_shape}], got {X.shape}")
    parts: dict[str, Var | None] = dict.fromkeys(TERMS)
    if tensors is None:
        H = Var(X)
    else:
        G = [tensors[f"sdtn.G{k}"] for k in range(3)]
        H = fctn_var(G)
        parts["recon"] = nn.scale(nn.sum_squares(nn.sub(X, H)), 0.5)
        low, reg = [], []
        for k in range(3):
            reg.append(nn.scale(nn.sum_squares(G[k]), hp.lambda3))
            u, v = tensors.get(f"sdtn.U{k}"), tensors.get(f"sdtn.V{k}")
            if u is None:
                continue
            d = diff_operator(G[k].shape[k + 1])
            gap = nn.sub(nn.einsum("ij,njc->nic", d, _unfold_var(G[k], k)),
                         nn.einsum("nir,nrc->nic", u, v))
            low.append(nn.scale(nn.sum_squares(gap), 0.5 * hp.alpha))
            reg.append(nn.scale(nn.sum_squares(u), hp.lambda1))
            reg.append(nn.scale(nn.sum_squares(v), hp.lambda2))
        parts["lowrank"] = _sum(low)
        parts["reg"] = _sum(reg)
    logits, fused = model.logits(H)
    parts["cls"] = nn.scale(nn.softmax_xent(logits, labels), hp.beta)
    if fused is not None and tensors is not None and cfg.mode == "TRN":
        proj = nn.transpose(model.proj(fused), (0, 2, 3, 1))
        parts["cons"] = nn.scale(nn.sum_squares(nn.sub(H, proj)), hp.gamma)
    used = [v for v in parts.values() if v is not None]
    total = _sum(used)
    terms = {k: (0.0 if v is None else float(v.value)) for k, v in parts.items()}
    return total, terms, logits


def _sum(vs: list[Var]) -> Var | None:
    if not vs:
        return None
    out = vs[0]
    for v in vs[1:]:
        out = nn.add(out, v)
    return out


def trn_loss(model: TrnModel, tensors: TensorBatch | None, batch: TrnBatch,
             hp: Hyperparams | None = None) -> float:
    hp = model.cfg.effective_hp if hp is None else hp
    tvars = None if tensors is None else {k: Var(v) for k, v in tensors.named().items()}
    total, _, _ = joint_objective(model, tvars, batch.patches, batch.labels, hp)
    return float(total.value)


# -- training and inference ----------------------------------------------------------


@dataclass
class TrainedTrn:
    config: TrnConfig
    params: dict[str, np.ndarray]
    train_patches: np.ndarray
    train_labels: np.ndarray
    tensors: TensorBatch | None
    iteration: int

    def model(self) -> TrnModel:
        return TrnModel(self.config).load(self.params)


def train(batch: TrnBatch, cfg: TrnConfig) -> tuple[TrainedTrn, list[dict]]:
    """Full-batch joint gradient descent on every parameter.

    ``hp.step_mode="schedule"`` takes the step ``hp.lr(iter)``;
    ``"backtracking"`` doubles the previously accepted step and halves it until
    the objective does not increase. The log holds one record per iteration
    (objective terms at the current parameters and the step taken from them)
    followed by a final record with the training accuracy.
    """
    if batch.patches.shape[1:] != cfg.patch_shape:
        raise ValueError(f"patches {batch.patches.shape[1:]} do not match config {cfg.patch_shape}")
    if np.any(batch.labels > cfg.n_classes):
        raise ValueError(f"labels exceed n_classes={cfg.n_classes}")
    hp = cfg.effective_hp
    if hp.step_mode == "als":
        raise ValueError("train supports step_mode 'schedule' or 'backtracking'")
    rng = np.random.default_rng(hp.seed)
    model = TrnModel(cfg, rng)
    tensors = init_tensors(cfg, batch.patches, hp.seed + 1) if cfg.uses_tensors else None
    tvars = None if tensors is None else {k: Var(v, name=k) for k, v in tensors.named().items()}
    params = dict(model.params())
    if tvars:
        params.update(tvars)

    def evaluate():
        return joint_objective(model, tvars, batch.patches, batch.labels, hp)

    log: list[dict] = []
    history: list[float] = []
    total, terms, logits = evaluate()
    step = hp.lr0 / 2.0
    it = 0
    for it in range(hp.max_iters + 1):
        value = float(total.value)
        if not math.isfinite(value):
            raise DivergenceError(it, value)
        history.append(value)
        done = it == hp.max_iters or (
            len(history) > 50
            and abs(history[-51] - value) <= hp.tol * max(abs(history[-51]), 1e-300))
        if done:
            log.append({"iter": it, "lr": 0.0, **terms, "total": value})
            break
        total.backward()
        base = {k: v.value for k, v in params.items()}
        grads = {k: v.grad for k, v in params.items()}
        if hp.step_mode == "schedule":
            step = hp.lr(it)
            _apply(params, base, grads, step)
            nxt = evaluate()
        else:
            step = 2.0 * step
            while True:
                _apply(params, base, grads, step)
                nxt = evaluate()
                if float(nxt[0].value) <= value or step < 1e-30:
                    break
                step *= 0.5
        log.append({"iter": it, "lr": step, **terms, "total": value})
        total, terms, logits = nxt
    acc = float(np.mean(np.argmax(logits.value, axis=1) + 1 == batch.labels))
    log.append({"final": True, "iter": it, "train_accuracy": acc, "total": history[-1]})
    final_tensors = None
    if tvars is not None:
        final_tensors = TensorBatch.from_named({k: v.value.copy() for k, v in tvars.items()})
    trained = TrainedTrn(cfg, model.state_dict(), batch.patches.copy(), batch.labels.copy(),
                         final_tensors, it)
    return trained, log


def _apply(params: dict[str, Var], base: dict, grads: dict, step: float) -> None:
    for k, v in params.items():
        v.value = base[k] - step * grads[k]


def nearest_patch(train_patches: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Index of the closest training patch (squared L2; ties go to the lowest index)."""
    a = train_patches.reshape(train_patches.shape[0], -1)
    b = patches.reshape(patches.shape[0], -1)
    d = (b * b).sum(1)[:, None] - 2.0 * b @ a.T + (a * a).sum(1)[None, :]
    return np.argmin(d, axis=1)


def features_for(trained: TrainedTrn, patches: np.ndarray) -> np.ndarray:
    """Feature tensors for new patches: the raw patch for the baseline, else a warm-started refit."""
    cfg = trained.config
    patches = np.asarray(patches, dtype=np.float64)
    if not cfg.uses_tensors:
        return patches
    warm = trained.tensors.take(nearest_patch(trained.train_patches, patches))
    G, U, V = refine_batch(warm.G, warm.U, warm.V, patches, cfg.effective_hp, cfg.infer_iters)
    return contract_factors(G, batch=True)


def predict_patches(trained: TrainedTrn, patches: np.ndarray, model: TrnModel | None = None
                    ) -> np.ndarray:
    """Class probabilities ``[N, M]`` for a batch of raw patches."""
    model = trained.model() if model is None else model
    H = features_for(trained, patches)
    return model.forward(H)


def predict_map(trained: TrainedTrn, cube: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per-pixel class ids 1..M for every pixel of ``cube`` ``[H, W, B]``."""
    from .hsi_data import extract_patches

    cube = np.asarray(cube, dtype=np.float64)
    cfg = trained.config
    if cube.ndim != 3 or cube.shape[2] != cfg.bands:
        raise ValueError(f"cube must be [H, W, {cfg.bands}], got {cube.shape}")
    h, w, _ = cube.shape
    model = trained.model()
    coords = [(r, c) for r in range(h) for c in range(w)]
    out = np.zeros(h * w, dtype=np.int64)
    for start in range(0, len(coords), chunk):
        part = coords[start:start + chunk]
        patches = extract_patches(cube, part, cfg.patch_size)
        probs = predict_patches(trained, patches, model)
        out[start:start + len(part)] = np.argmax(probs, axis=1) + 1
    return out.reshape(h, w)
