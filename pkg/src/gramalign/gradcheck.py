"""Central finite-difference verification of every analytic gradient.

Each component reports the worst vector-level relative error
max|a - f| / max(max|a|, max|f|, tiny) over the requested number of random
seeds, using step h = 1e-5 in float64 with dropout disabled. Thresholds:
1e-6 for the tuple-volume gradient, 1e-5 everywhere else.

Setting GRAMALIGN_GRADCHECK_SABOTAGE=1 corrupts one analytic gradient on
purpose; the suite must then fail. This is the negative control proving the
harness can detect a wrong gradient.
"""

import os
from dataclasses import dataclass

import numpy as np

from .data import class_weights
from .errors import SingularGram
from .heads import (
    DtiHead,
    Ic50Head,
    LayerSpec,
    ProjectionHead,
    backward,
    dti_forward,
    ic50_forward,
    init_params,
    mlp_grad_items,
    mlp_tensor_items,
    project,
)
from .losses import Batch, clip_bimodal, ic50_loss, volume_contrastive
from .modality import MODALITY_ORDER, Modality
from .numerics import gram_volume_grad, volume_unclamped
from .seeding import substream

FD_STEP = 1e-5
TOL_VOLUME = 1e-6
TOL_DEFAULT = 1e-5

_SABOTAGE_ENV = "GRAMALIGN_GRADCHECK_SABOTAGE"


@dataclass
class ComponentResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rel_err(analytic, fd) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(fd), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - fd), initial=0.0) / scale)


def _fd_on_array(fn, arr, h=FD_STEP):
    """Central differences of scalar fn() with respect to every entry of arr."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = fn()
        arr[idx] = old - h
        down = fn()
        arr[idx] = old
        g[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return g


def _sabotage(g):
    if os.environ.get(_SABOTAGE_ENV):
        g = np.array(g, dtype=np.float64, copy=True)
        g.flat[0] += 1.0
    return g


def check_gram_volume_grad(seed: int) -> float:
    rng = substream(seed, "gc-volume")
    n = int(rng.integers(2, 5))
    d = int(rng.integers(4, 9))
    f = rng.standard_normal((n, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    try:
        vg = gram_volume_grad(list(f))
    except SingularGram:
        return 0.0
    analytic = _sabotage(np.stack(vg.per_vector))
    fd = _fd_on_array(lambda: volume_unclamped(f), f)
    return _rel_err(analytic, fd)


def _probe_params(params, forward, probe):
    """Worst error over every parameter tensor and the input, eval mode."""
    _, tape = forward()
    grads, gin = backward(tape, probe)
    grad_named = dict(mlp_grad_items("t", params, grads))
    worst = 0.0
    for name, arr in mlp_tensor_items("t", params):
        fd = _fd_on_array(lambda: float(np.sum(forward()[0] * probe)), arr)
        worst = max(worst, _rel_err(grad_named[name], fd))
    return worst, gin


def check_projector(seed: int) -> float:
    rng = substream(seed, "gc-proj")
    in_dim, hidden, out = 10, 12, 8
    specs = (
        LayerSpec(in_dim, hidden, "gelu", True, 0.1),
        LayerSpec(hidden, out, "gelu", True, 0.1),
        LayerSpec(out, out),
    )
    head = ProjectionHead(Modality.SMILES, init_params(specs, seed))
    x = rng.standard_normal((2, in_dim))
    probe = rng.standard_normal((2, out))

    worst, gin = _probe_params(
        head.params, lambda: project(head, x, "eval"), probe
    )
    gin = _sabotage(gin)
    fd_in = _fd_on_array(lambda: float(np.sum(project(head, x, "eval")[0] * probe)), x)
    return max(worst, _rel_err(gin, fd_in))


def check_ic50_head(seed: int) -> float:
    rng = substream(seed, "gc-ic50h")
    shared = 4
    specs = (LayerSpec(4 * shared, 8, "gelu", False, 0.3), LayerSpec(8, 3))
    head = Ic50Head(init_params(specs, seed))
    x = rng.standard_normal((2, 4 * shared))
    probe = rng.standard_normal((2, 3))
    worst, gin = _probe_params(head.params, lambda: ic50_forward(head, x, "eval"), probe)
    fd_in = _fd_on_array(lambda: float(np.sum(ic50_forward(head, x, "eval")[0] * probe)), x)
    return max(worst, _rel_err(_sabotage(gin), fd_in))


def check_dti_head(seed: int) -> float:
    rng = substream(seed, "gc-dtih")
    shared = 4
    specs = (
        LayerSpec(2 * shared, 8, "relu", False, 0.3),
        LayerSpec(8, 6, "relu", False, 0.3),
        LayerSpec(6, 2),
    )
    head = DtiHead(init_params(specs, seed))
    xs = rng.standard_normal((2, shared))
    xp = rng.standard_normal((2, shared))
    probe = rng.standard_normal((2, 2))
    worst, gin = _probe_params(
        head.params, lambda: dti_forward(head, xs, xp, "eval"), probe
    )
    fused_fd = []
    for arr in (xs, xp):
        fused_fd.append(
            _fd_on_array(lambda: float(np.sum(dti_forward(head, xs, xp, "eval")[0] * probe)), arr)
        )
    fd_in = np.concatenate(fused_fd, axis=1)
    return max(worst, _rel_err(_sabotage(gin), fd_in))


def _random_batch(rng, batch_size, dim, with_labels=False):
    emb = {}
    for m in MODALITY_ORDER:
        f = rng.standard_normal((batch_size, dim))
        emb[m] = f / np.linalg.norm(f, axis=1, keepdims=True)
    labels = mask = None
    if with_labels:
        labels = rng.integers(0, 3, size=batch_size)
        mask = rng.random(batch_size) < 0.7
    return Batch(embeddings=emb, ic50_labels=labels, ic50_mask=mask)


def check_volume_contrastive(seed: int) -> float:
    rng = substream(seed, "gc-vol-loss")
    batch_size = int(rng.integers(2, 5))
    dim = int(rng.integers(4, 9))
    batch = _random_batch(rng, batch_size, dim)
    anchor = MODALITY_ORDER[int(rng.integers(0, 4))]
    if rng.random() < 0.5:
        active = MODALITY_ORDER
    else:
        inactive = [m for m in MODALITY_ORDER if m is not anchor][int(rng.integers(0, 3))]
        active = tuple(m for m in MODALITY_ORDER if m is not inactive)
    out = volume_contrastive(batch, anchor, active, tau=0.5)
    worst = 0.0
    for m in active:
        fd = _fd_on_array(
            lambda: volume_contrastive(batch, anchor, active, tau=0.5).value,
            batch.embeddings[m],
        )
        worst = max(worst, _rel_err(_sabotage(out.grads[m]), fd))
    return worst


def check_clip_bimodal(seed: int) -> float:
    rng = substream(seed, "gc-clip")
    batch_size = int(rng.integers(2, 5))
    dim = int(rng.integers(4, 9))
    batch = _random_batch(rng, batch_size, dim)
    out = clip_bimodal(batch, tau=0.3)
    worst = 0.0
    for m in (Modality.SMILES, Modality.PROTEIN):
        fd = _fd_on_array(lambda: clip_bimodal(batch, tau=0.3).value, batch.embeddings[m])
        worst = max(worst, _rel_err(_sabotage(out.grads[m]), fd))
    return worst


def check_ic50_loss(seed: int) -> float:
    rng = substream(seed, "gc-ic50l")
    batch_size = int(rng.integers(2, 5))
    batch = _random_batch(rng, batch_size, 4, with_labels=True)
    if batch.ic50_mask is not None and not batch.ic50_mask.any():
        batch.ic50_mask[0] = True
    logits = rng.standard_normal((batch_size, 3))
    weights = class_weights([0, 1, 2, 0, 1, 2, 0])
    out = ic50_loss(batch, logits, weights, smoothing=0.1)
    fd = _fd_on_array(lambda: ic50_loss(batch, logits, weights, smoothing=0.1).value, logits)
    return _rel_err(_sabotage(out.logit_grad), fd)


COMPONENTS = (
    ("gram_volume_grad", check_gram_volume_grad, TOL_VOLUME),
    ("projector", check_projector, TOL_DEFAULT),
    ("ic50_head", check_ic50_head, TOL_DEFAULT),
    ("dti_head", check_dti_head, TOL_DEFAULT),
    ("volume_contrastive", check_volume_contrastive, TOL_DEFAULT),
    ("clip_bimodal", check_clip_bimodal, TOL_DEFAULT),
    ("ic50_loss", check_ic50_loss, TOL_DEFAULT),
)


def run_gradcheck(seed: int = 0, trials: int = 50):
    """Run every component over ``trials`` seeds; returns per-component results."""
    results = []
    for name, fn, tol in COMPONENTS:
        worst = 0.0
        for k in range(trials):
            worst = max(worst, fn(seed * 100003 + k))
        results.append(ComponentResult(name=name, max_rel_err=worst, tolerance=tol))
    return results
