"""Desk-scale benchmark problems with hand-coded gradients and exact Hvps.

Each problem binds a mini-batch by seed (a pure function), returning an
evaluator whose loss, gradient and optional Hessian-vector product all see the
same batch realization. That makes gradient differencing on one batch and
run-level determinism structural rather than a calling convention.

Parameters are described by a layout of named tensors; flat vectors use
column-major order per block, matching the matricization the Kronecker-style
preconditioners use.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError

__all__ = [
    "BoundEvaluator",
    "GroundTruth",
    "ParamBlock",
    "ParamLayout",
    "Problem",
    "make_addition_rnn",
    "make_quadratic",
    "make_rosenbrock",
    "make_xor_mlp",
]


@dataclass(frozen=True)
class ParamBlock:
    """One named tensor: a vector (n,) or matrix (m, n) slice of theta.

    ``augmented`` marks affine blocks whose input carries a trailing
    constant-1 feature.
    """

    name: str
    shape: tuple
    augmented: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Ordered decomposition of the flat parameter vector into named tensors."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        if not self.blocks:
            raise ContractViolationError("layout needs at least one block")
        self.slices = []
        start = 0
        for b in self.blocks:
            self.slices.append(slice(start, start + b.size))
            start += b.size
        self.size = start

    def flatten(self, tensors) -> np.ndarray:
        tensors = list(tensors)
        if len(tensors) != len(self.blocks):
            raise ContractViolationError("tensor count does not match layout")
        parts = []
        for b, t in zip(self.blocks, tensors):
            t = np.asarray(t, dtype=float)
            if t.shape != b.shape:
                raise ContractViolationError(
                    f"block {b.name!r} expects shape {b.shape}, got {t.shape}")
            parts.append(np.ravel(t, order="F"))
        return np.concatenate(parts)

    def unflatten(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ContractViolationError(
                f"flat vector of length {self.size} expected, got {theta.shape}")
        return [np.reshape(theta[s], b.shape, order="F")
                for b, s in zip(self.blocks, self.slices)]


@dataclass(frozen=True)
class BoundEvaluator:
    """Loss/gradient/Hvp closures bound to one mini-batch realization."""

    loss: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class GroundTruth:
    hessian: np.ndarray
    linear: np.ndarray


@dataclass(frozen=True)
class Problem:
    """A benchmark problem: layout, batch binding, and a default start point."""

    name: str
    layout: ParamLayout
    bind_batch: Callable[[int], BoundEvaluator]
    initial_theta: Callable[[int], np.ndarray]
    ground_truth: Optional[GroundTruth] = None

    @property
    def dim(self) -> int:
        return self.layout.size


def make_quadratic(h: np.ndarray, b: Optional[np.ndarray] = None,
                   noise_scale: float = 0.0, batch_size: int = 1) -> Problem:
    """Quadratic loss b^T theta + 0.5 theta^T H theta, optionally noisy.

    A batch draws ``batch_size`` independent symmetric perturbations of H and
    of b (i.i.d. standard normal entries scaled by ``noise_scale``) and
    averages them; noise_scale 0 gives the deterministic quadratic. The exact
    Hvp is v -> H_hat v.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractViolationError("Hessian must be square")
    if np.max(np.abs(h - h.T)) > 1e-12 * max(1.0, np.max(np.abs(h))):
        raise ContractViolationError("Hessian must be symmetric")
    dim = h.shape[0]
    b = np.zeros(dim) if b is None else np.asarray(b, dtype=float)
    if b.shape != (dim,):
        raise ContractViolationError("linear term has the wrong length")
    if noise_scale < 0.0:
        raise ContractViolationError("noise scale must be nonnegative")
    layout = ParamLayout([ParamBlock("theta", (dim,))])

    def bind(seed: int) -> BoundEvaluator:
        if noise_scale == 0.0:
            h_hat, b_hat = h, b
        else:
            rng = np.random.default_rng(seed)
            s_acc = np.zeros_like(h)
            n_acc = np.zeros_like(b)
            for _ in range(batch_size):
                raw = rng.standard_normal((dim, dim))
                s_acc += np.triu(raw) + np.triu(raw, 1).T
                n_acc += rng.standard_normal(dim)
            h_hat = h + noise_scale * s_acc / batch_size
            b_hat = b + noise_scale * n_acc / batch_size
        return BoundEvaluator(
            loss=lambda th: float(b_hat @ th + 0.5 * th @ (h_hat @ th)),
            grad=lambda th: h_hat @ th + b_hat,
            hvp=lambda th, v: h_hat @ v,
        )

    return Problem(
        name="quadratic",
        layout=layout,
        bind_batch=bind,
        initial_theta=lambda seed: np.random.default_rng(seed).standard_normal(dim),
        ground_truth=GroundTruth(hessian=h, linear=b),
    )


def make_rosenbrock() -> Problem:
    """The 2-D banana valley 100 (y - x^2)^2 + (1 - x)^2, minimum 0 at (1, 1)."""
    layout = ParamLayout([ParamBlock("theta", (2,))])

    def loss(th):
        x, y = th
        return float(100.0 * (y - x * x) ** 2 + (1.0 - x) ** 2)

    def grad(th):
        x, y = th
        return np.array([
            -400.0 * x * (y - x * x) - 2.0 * (1.0 - x),
            200.0 * (y - x * x),
        ])

    def hvp(th, v):
        x, y = th
        hxx = 1200.0 * x * x - 400.0 * y + 2.0
        hxy = -400.0 * x
        return np.array([hxx * v[0] + hxy * v[1], hxy * v[0] + 200.0 * v[1]])

    ev = BoundEvaluator(loss=loss, grad=grad, hvp=hvp)
    return Problem(
        name="rosenbrock",
        layout=layout,
        bind_batch=lambda seed: ev,
        initial_theta=lambda seed: np.array([-1.2, 1.0]),
    )


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    # overflow-free logistic
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def make_xor_mlp(hidden: int) -> Problem:
    """Two-layer tanh network on the four-point XOR set with logistic loss.

    Both affine blocks take inputs augmented with a constant 1. The batch is
    always the full set, the gradient is hand-coded backprop, and the exact
    Hvp comes from a forward-over-reverse pass.
    """
    if hidden < 2:
        raise ContractViolationError("need at least two hidden units")
    layout = ParamLayout([
        ParamBlock("w1", (hidden, 3), augmented=True),
        ParamBlock("w2", (1, hidden + 1), augmented=True),
    ])
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    targets = np.array([0.0, 1.0, 1.0, 0.0])
    xa = np.hstack([x, np.ones((4, 1))])
    nb = 4.0

    def forward(th):
        w1, w2 = layout.unflatten(th)
        a1 = xa @ w1.T
        z = np.tanh(a1)
        za = np.hstack([z, np.ones((4, 1))])
        s = za @ w2.ravel()
        return w1, w2, z, za, s

    def loss(th):
        _, _, _, _, s = forward(th)
        return float(np.mean(_softplus(s) - targets * s))

    def grad(th):
        w1, w2, z, za, s = forward(th)
        ds = (_sigmoid(s) - targets) / nb
        gw2 = (ds @ za)[None, :]
        dz = np.outer(ds, w2[0, :hidden])
        da1 = dz * (1.0 - z * z)
        gw1 = da1.T @ xa
        return layout.flatten([gw1, gw2])

    def hvp(th, v):
        w1, w2, z, za, s = forward(th)
        v1, v2 = layout.unflatten(v)
        p = _sigmoid(s)
        ds = (p - targets) / nb

        ra1 = xa @ v1.T
        rz = (1.0 - z * z) * ra1
        rza = np.hstack([rz, np.zeros((4, 1))])
        rs = za @ v2.ravel() + np.sum(rza * w2[0], axis=1)
        rds = p * (1.0 - p) * rs / nb

        rgw2 = (rds @ za + ds @ rza)[None, :]
        dz = np.outer(ds, w2[0, :hidden])
        rdz = np.outer(ds, v2[0, :hidden]) + np.outer(rds, w2[0, :hidden])
        rda1 = rdz * (1.0 - z * z) - 2.0 * dz * z * rz
        rgw1 = rda1.T @ xa
        return layout.flatten([rgw1, rgw2])

    ev = BoundEvaluator(loss=loss, grad=grad, hvp=hvp)
    return Problem(
        name="xor-mlp",
        layout=layout,
        bind_batch=lambda seed: ev,
        initial_theta=lambda seed: 0.5 * np.random.default_rng(seed).standard_normal(layout.size),
    )


def make_addition_rnn(seq_len: int, hidden: int, batch_size: int = 8) -> Problem:
    """Vanilla tanh RNN predicting the mean of two marked values in a sequence.

    Sequences hold uniform[0, 1] values with a {0, 1} marker channel flagging
    two distinct positions; the target is the mean of the two flagged values.
    Gradients come from hand-coded backprop through time; no exact Hvp is
    provided (use gradient differencing).
    """
    if seq_len < 4:
        raise ContractViolationError("sequence length must be at least 4")
    if hidden < 1 or batch_size < 1:
        raise ContractViolationError("hidden size and batch size must be positive")
    layout = ParamLayout([
        ParamBlock("w_rec", (hidden, hidden + 3), augmented=True),
        ParamBlock("w_out", (1, hidden + 1), augmented=True),
    ])

    def make_batch(seed):
        rng = np.random.default_rng(seed)
        values = rng.random((batch_size, seq_len))
        marks = np.zeros((batch_size, seq_len))
        pos = np.argsort(rng.random((batch_size, seq_len)), axis=1)[:, :2]
        rows = np.arange(batch_size)[:, None]
        marks[rows, pos] = 1.0
        targets = 0.5 * (values[rows[:, 0], pos[:, 0]] + values[rows[:, 0], pos[:, 1]])
        return values, marks, targets

    def bind(seed: int) -> BoundEvaluator:
        values, marks, targets = make_batch(seed)

        def forward(th):
            w, wo = layout.unflatten(th)
            wh, wx, bias = w[:, :hidden], w[:, hidden:hidden + 2], w[:, hidden + 2]
            states = [np.zeros((batch_size, hidden))]
            for t in range(seq_len):
                u = np.stack([values[:, t], marks[:, t]], axis=1)
                a = states[-1] @ wh.T + u @ wx.T + bias
                states.append(np.tanh(a))
            ha = np.hstack([states[-1], np.ones((batch_size, 1))])
            pred = ha @ wo.ravel()
            return w, wo, states, ha, pred

        def loss(th):
            _, _, _, _, pred = forward(th)
            return float(np.mean((pred - targets) ** 2))

        def grad(th):
            w, wo, states, ha, pred = forward(th)
            wh = w[:, :hidden]
            dpred = 2.0 * (pred - targets) / batch_size
            gwo = (dpred @ ha)[None, :]
            gw = np.zeros_like(w)
            dh = np.outer(dpred, wo[0, :hidden])
            for t in range(seq_len, 0, -1):
                ht = states[t]
                da = dh * (1.0 - ht * ht)
                u = np.stack([values[:, t - 1], marks[:, t - 1]], axis=1)
                gw[:, :hidden] += da.T @ states[t - 1]
                gw[:, hidden:hidden + 2] += da.T @ u
                gw[:, hidden + 2] += da.sum(axis=0)
                dh = da @ wh
            return layout.flatten([gw, gwo])

        return BoundEvaluator(loss=loss, grad=grad, hvp=None)

    return Problem(
        name="addition-rnn",
        layout=layout,
        bind_batch=bind,
        initial_theta=lambda seed: 0.2 * np.random.default_rng(seed).standard_normal(layout.size),
    )
