"""Task objectives as a uniform oracle bundle.

Each problem exposes values, gradients, and Hessian-vector products of the
per-task loss, evaluated on either split of a task:

  * split=TRAIN is the inner (lower-level) objective: data loss on the
    support set plus the regularizer on y.
  * split=VAL is the outer integrand: unregularized data loss on the query
    set. The meta objective averages this over a batch of tasks.

Three concrete problems are provided: an analytic quadratic (closed-form
minimizer and meta-gradient, used as a correctness oracle), a shared linear
feature map with a per-task softmax head, and a per-task MLP whose
initialization is the meta-parameter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import TaskBatch, TaskDataset
from .errors import LayoutMismatch, LengthMismatch, NonFiniteValue
from .numerics import Layout, ParamVector, fd_gradient, fd_hvp

__all__ = [
    "Split",
    "LossKind",
    "Paradigm",
    "Regularizer",
    "BilevelObjective",
    "QuadraticBilevel",
    "MetaFeatureSoftmax",
    "MetaInitMlp",
    "make_quadratic",
    "make_meta_feature_softmax",
    "make_meta_init_mlp",
    "eval_f",
    "eval_F_batch",
]


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"


class LossKind(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MEAN_SQUARED_ERROR = "mse"


class Paradigm(enum.Enum):
    """How the meta-parameter x enters the per-task problem.

    META_INIT: x carries an "init" segment used as the starting point of the
    per-task parameters; the loss itself never reads x.
    META_FEATURE: x parameterizes a shared map applied to features, y is the
    task-specific head trained in the inner loop.
    """

    META_INIT = "meta_init"
    META_FEATURE = "meta_feature"


@dataclass(frozen=True)
class Regularizer:
    """None, L1, or L2 penalty on the per-task parameters y.

    L1 uses the subgradient sign(y) with sign(0) = 0 and has zero curvature
    almost everywhere.
    """

    kind: str = "none"  # none | l1 | l2
    coef: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.coef < 0:
            raise ValueError("regularizer coefficient must be >= 0")

    @classmethod
    def none(cls) -> "Regularizer":
        return cls("none", 0.0)

    @classmethod
    def l1(cls, coef: float) -> "Regularizer":
        return cls("l1", coef)

    @classmethod
    def l2(cls, coef: float) -> "Regularizer":
        return cls("l2", coef)

    def value(self, y: np.ndarray) -> float:
        if self.kind == "l1":
            return self.coef * float(np.sum(np.abs(y)))
        if self.kind == "l2":
            return 0.5 * self.coef * float(y @ y)
        return 0.0

    def grad(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "l1":
            return self.coef * np.sign(y)
        if self.kind == "l2":
            return self.coef * y
        return np.zeros_like(y)

    def hvp(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "l2":
            return self.coef * v
        return np.zeros_like(v)


def _split_data(task: TaskDataset, split: Split) -> tuple[np.ndarray, np.ndarray]:
    if split is Split.TRAIN:
        return task.train_features, task.train_labels
    return task.val_features, task.val_labels


class BilevelObjective:
    """Oracle bundle: value, grad_y, grad_x, hvp_yy, and the transposed
    cross second-order product, all per task and split.

    grad_x / cross_hvp answer in the layout of the x argument (which may
    carry extra method-specific segments beyond the problem's own); segments
    the problem does not read are zero.
    """

    x_layout: Layout
    y_layout: Layout
    exact_hvp: bool = True
    is_classifier: bool = False

    def value(self, x: ParamVector, y: ParamVector, task, split: Split) -> float:
        raise NotImplementedError

    def grad_y(self, x: ParamVector, y: ParamVector, task, split: Split) -> ParamVector:
        raise NotImplementedError

    def grad_x(self, x: ParamVector, y: ParamVector, task, split: Split) -> ParamVector:
        return ParamVector.zeros(x.layout)

    def hvp_yy(
        self, x: ParamVector, y: ParamVector, task, split: Split, v: ParamVector
    ) -> ParamVector:
        raise NotImplementedError

    def cross_hvp(
        self, x: ParamVector, y: ParamVector, task, split: Split, v: ParamVector
    ) -> ParamVector:
        """Gradient with respect to x of <grad_y(x, y), v>."""
        return ParamVector.zeros(x.layout)

    def predict(self, x: ParamVector, y: ParamVector, features: np.ndarray):
        """Class scores for classifier problems; None otherwise."""
        return None

    def _check_xy(self, x: ParamVector, y: ParamVector):
        for seg in self.x_layout.segments:
            if not x.layout.has(seg.name) or x.layout.length_of(seg.name) != seg.length:
                raise LayoutMismatch(
                    f"x is missing segment {seg.name!r} of length {seg.length}"
                )
        if y.layout != self.y_layout:
            raise LayoutMismatch(f"y layout {y.layout} != expected {self.y_layout}")


def eval_f(problem: BilevelObjective, x: ParamVector, y: ParamVector, task) -> float:
    """Inner objective: regularized loss on the task's train split."""
    val = problem.value(x, y, task, Split.TRAIN)
    if not np.isfinite(val):
        raise NonFiniteValue("inner objective is not finite")
    return val


def eval_F_batch(
    problem: BilevelObjective, x: ParamVector, ys: list[ParamVector], batch: TaskBatch
) -> float:
    """Outer objective: mean unregularized validation loss across tasks."""
    if len(ys) != len(batch.tasks):
        raise LengthMismatch(f"{len(ys)} parameter vectors for {len(batch.tasks)} tasks")
    total = 0.0
    for y, task in zip(ys, batch.tasks):
        total += problem.value(x, y, task, Split.VAL)
    mean = total / len(batch.tasks)
    if not np.isfinite(mean):
        raise NonFiniteValue("outer objective is not finite")
    return mean


# ---------------------------------------------------------------------------
# analytic quadratic
# ---------------------------------------------------------------------------


class QuadraticBilevel(BilevelObjective):
    """Strongly convex quadratic with closed-form answers, for verification.

    Inner:  f(x, y) = 1/2 ||y - A x||^2 + lam/2 ||y||^2
    Outer:  F(y)    = 1/2 ||y - b||^2

    Dataset splits are ignored; the split argument only selects f vs F.
    Unique inner minimizer y*(x) = A x / (1 + lam) and meta-gradient
    dF/dx = A^T (A x / (1+lam) - b) / (1 + lam).
    """

    exact_hvp = True

    def __init__(self, a, lam: float, b):
        if lam <= 0:
            raise ValueError("lam must be > 0")
        a_arr = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b_arr = np.atleast_1d(np.asarray(b, dtype=np.float64))
        if a_arr.shape[0] != b_arr.shape[0]:
            raise ValueError(
                f"A has {a_arr.shape[0]} rows but b has {b_arr.shape[0]} entries"
            )
        self.a = a_arr
        self.lam = float(lam)
        self.b = b_arr
        self.x_layout = Layout([("theta", a_arr.shape[1])])
        self.y_layout = Layout([("y", a_arr.shape[0])])

    def _theta(self, x: ParamVector) -> np.ndarray:
        return x.segment("theta")

    def y_star(self, x: ParamVector) -> ParamVector:
        return ParamVector(self.y_layout, self.a @ self._theta(x) / (1.0 + self.lam))

    def hypergradient(self, x: ParamVector) -> ParamVector:
        ystar = self.a @ self._theta(x) / (1.0 + self.lam)
        g = self.a.T @ (ystar - self.b) / (1.0 + self.lam)
        out = ParamVector.zeros(x.layout)
        return out.with_segment("theta", g)

    def value(self, x, y, task, split):
        self._check_xy(x, y)
        yv = y.values
        if split is Split.TRAIN:
            r = yv - self.a @ self._theta(x)
            return 0.5 * float(r @ r) + 0.5 * self.lam * float(yv @ yv)
        r = yv - self.b
        return 0.5 * float(r @ r)

    def grad_y(self, x, y, task, split):
        self._check_xy(x, y)
        yv = y.values
        if split is Split.TRAIN:
            return y.like((yv - self.a @ self._theta(x)) + self.lam * yv)
        return y.like(yv - self.b)

    def grad_x(self, x, y, task, split):
        self._check_xy(x, y)
        out = ParamVector.zeros(x.layout)
        if split is Split.TRAIN:
            r = y.values - self.a @ self._theta(x)
            return out.with_segment("theta", -self.a.T @ r)
        return out

    def hvp_yy(self, x, y, task, split, v):
        self._check_xy(x, y)
        if split is Split.TRAIN:
            return (1.0 + self.lam) * v
        return v

    def cross_hvp(self, x, y, task, split, v):
        self._check_xy(x, y)
        out = ParamVector.zeros(x.layout)
        if split is Split.TRAIN:
            return out.with_segment("theta", -self.a.T @ v.values)
        return out


def make_quadratic(a, lam: float, b) -> QuadraticBilevel:
    return QuadraticBilevel(a, lam, b)


# ---------------------------------------------------------------------------
# shared feature map + per-task softmax head
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    stable = z - zmax
    return stable - np.log(np.exp(stable).sum(axis=1, keepdims=True))


class MetaFeatureSoftmax(BilevelObjective):
    """Cross-entropy of softmax(W (M phi) + c).

    x holds the shared map M ("feat", dim_feat x dim_in, row-major); y holds
    the head weights ("w", way x dim_feat) and bias ("b", way). Because the
    logits are linear in y, the Gauss-Newton product equals the exact
    Hessian-vector product. The cross second-order term is taken by central
    differences over x of <grad_y, v>, which keeps the implementation to the
    two first-order oracles.
    """

    exact_hvp = True
    is_classifier = True

    _CROSS_EPS = 1e-5

    def __init__(self, dim_in: int, dim_feat: int, way: int, reg: Regularizer | None = None):
        if min(dim_in, dim_feat, way) < 1:
            raise ValueError("dims must be >= 1")
        self.dim_in = dim_in
        self.dim_feat = dim_feat
        self.way = way
        self.reg = reg or Regularizer.none()
        self.x_layout = Layout([("feat", dim_feat * dim_in)])
        self.y_layout = Layout([("w", way * dim_feat), ("b", way)])

    def _unpack(self, x: ParamVector, y: ParamVector):
        m = x.segment("feat").reshape(self.dim_feat, self.dim_in)
        w = y.segment("w").reshape(self.way, self.dim_feat)
        c = y.segment("b")
        return m, w, c

    def _logits(self, m, w, c, phi: np.ndarray) -> np.ndarray:
        return (phi @ m.T) @ w.T + c

    def predict(self, x, y, features):
        m, w, c = self._unpack(x, y)
        return self._logits(m, w, c, np.atleast_2d(features))

    def value(self, x, y, task, split):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        m, w, c = self._unpack(x, y)
        logp = _log_softmax(self._logits(m, w, c, phi))
        loss = -float(logp[np.arange(len(labels)), labels].mean())
        if split is Split.TRAIN:
            loss += self.reg.value(y.values)
        return loss

    def grad_y(self, x, y, task, split):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        m, w, c = self._unpack(x, y)
        h = phi @ m.T
        p = np.exp(_log_softmax(h @ w.T + c))
        delta = p.copy()
        delta[np.arange(len(labels)), labels] -= 1.0
        delta /= len(labels)
        gw = delta.T @ h
        gb = delta.sum(axis=0)
        out = np.concatenate([gw.ravel(), gb])
        if split is Split.TRAIN:
            out += self.reg.grad(y.values)
        return y.like(out)

    def grad_x(self, x, y, task, split):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        m, w, c = self._unpack(x, y)
        h = phi @ m.T
        p = np.exp(_log_softmax(h @ w.T + c))
        delta = p.copy()
        delta[np.arange(len(labels)), labels] -= 1.0
        delta /= len(labels)
        gm = (delta @ w).T @ phi
        out = ParamVector.zeros(x.layout)
        return out.with_segment("feat", gm.ravel())

    def hvp_yy(self, x, y, task, split, v):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        m, w, c = self._unpack(x, y)
        h = phi @ m.T
        p = np.exp(_log_softmax(h @ w.T + c))
        vw = v.segment("w").reshape(self.way, self.dim_feat)
        vb = v.segment("b")
        dz = h @ vw.T + vb
        u = p * dz - p * (p * dz).sum(axis=1, keepdims=True)
        u /= len(labels)
        hw = u.T @ h
        hb = u.sum(axis=0)
        out = np.concatenate([hw.ravel(), hb])
        if split is Split.TRAIN:
            out += self.reg.hvp(v.values)
        return v.like(out)

    def cross_hvp(self, x, y, task, split, v):
        self._check_xy(x, y)

        def inner(xp: ParamVector) -> float:
            return self.grad_y(xp, y, task, split).dot(v)

        return fd_gradient(inner, x, eps=self._CROSS_EPS)


def make_meta_feature_softmax(
    dim_in: int, dim_feat: int, way: int, reg: Regularizer | None = None
) -> MetaFeatureSoftmax:
    return MetaFeatureSoftmax(dim_in, dim_feat, way, reg)


# ---------------------------------------------------------------------------
# per-task MLP whose initialization is meta-learned
# ---------------------------------------------------------------------------


class MetaInitMlp(BilevelObjective):
    """Small tanh MLP trained per task; x carries its initialization.

    y holds the network weights (one hidden layer of width `hidden`, or a
    bare linear map when hidden == 0); x holds segment "init" with the same
    total length. The loss never reads x, so grad_x and cross_hvp are zero.
    Forward and first-order backward passes are analytic; curvature products
    fall back to central differences of grad_y with a step small enough to
    keep the product symmetric to ~1e-9.
    """

    exact_hvp = False

    _HVP_EPS_SCALE = 1e-5

    def __init__(
        self,
        dim_in: int,
        hidden: int,
        dim_out: int,
        loss: LossKind = LossKind.CROSS_ENTROPY,
        reg: Regularizer | None = None,
    ):
        if dim_in < 1 or dim_out < 1 or hidden < 0:
            raise ValueError("dims must be >= 1 (hidden may be 0)")
        self.dim_in = dim_in
        self.hidden = hidden
        self.dim_out = dim_out
        self.loss = loss
        self.reg = reg or Regularizer.none()
        self.is_classifier = loss is LossKind.CROSS_ENTROPY
        if hidden > 0:
            segs = [
                ("w0", hidden * dim_in),
                ("b0", hidden),
                ("w1", dim_out * hidden),
                ("b1", dim_out),
            ]
        else:
            segs = [("w0", dim_out * dim_in), ("b0", dim_out)]
        self.y_layout = Layout(segs)
        self.x_layout = Layout([("init", self.y_layout.dim)])

    def _forward(self, y: ParamVector, phi: np.ndarray):
        if self.hidden > 0:
            w0 = y.segment("w0").reshape(self.hidden, self.dim_in)
            b0 = y.segment("b0")
            w1 = y.segment("w1").reshape(self.dim_out, self.hidden)
            b1 = y.segment("b1")
            a = np.tanh(phi @ w0.T + b0)
            return a @ w1.T + b1, a
        w0 = y.segment("w0").reshape(self.dim_out, self.dim_in)
        b0 = y.segment("b0")
        return phi @ w0.T + b0, None

    def _targets(self, labels: np.ndarray) -> np.ndarray:
        onehot = np.zeros((len(labels), self.dim_out))
        onehot[np.arange(len(labels)), labels] = 1.0
        return onehot

    def predict(self, x, y, features):
        out, _ = self._forward(y, np.atleast_2d(features))
        return out

    def value(self, x, y, task, split):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        out, _ = self._forward(y, phi)
        if self.loss is LossKind.CROSS_ENTROPY:
            logp = _log_softmax(out)
            loss = -float(logp[np.arange(len(labels)), labels].mean())
        else:
            r = out - self._targets(labels)
            loss = 0.5 * float((r * r).sum()) / len(labels)
        if not np.isfinite(loss):
            raise NonFiniteValue("MLP loss is not finite")
        if split is Split.TRAIN:
            loss += self.reg.value(y.values)
        return loss

    def grad_y(self, x, y, task, split):
        self._check_xy(x, y)
        phi, labels = _split_data(task, split)
        out, act = self._forward(y, phi)
        n = len(labels)
        if self.loss is LossKind.CROSS_ENTROPY:
            delta = np.exp(_log_softmax(out))
            delta[np.arange(n), labels] -= 1.0
            delta /= n
        else:
            delta = (out - self._targets(labels)) / n
        if self.hidden > 0:
            w1 = y.segment("w1").reshape(self.dim_out, self.hidden)
            gw1 = delta.T @ act
            gb1 = delta.sum(axis=0)
            back = (delta @ w1) * (1.0 - act * act)
            gw0 = back.T @ phi
            gb0 = back.sum(axis=0)
            out_vec = np.concatenate([gw0.ravel(), gb0, gw1.ravel(), gb1])
        else:
            gw0 = delta.T @ phi
            gb0 = delta.sum(axis=0)
            out_vec = np.concatenate([gw0.ravel(), gb0])
        if split is Split.TRAIN:
            out_vec += self.reg.grad(y.values)
        return y.like(out_vec)

    def hvp_yy(self, x, y, task, split, v):
        self._check_xy(x, y)

        def g(yp: ParamVector) -> ParamVector:
            return self.grad_y(x, yp, task, split)

        eps = self._HVP_EPS_SCALE * (1.0 + y.inf_norm()) / (1.0 + v.inf_norm())
        return fd_hvp(g, y, v, eps=eps)


def make_meta_init_mlp(
    dim_in: int,
    hidden: int,
    dim_out: int,
    loss: LossKind = LossKind.CROSS_ENTROPY,
    reg: Regularizer | None = None,
) -> MetaInitMlp:
    return MetaInitMlp(dim_in, hidden, dim_out, loss, reg)
