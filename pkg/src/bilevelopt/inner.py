"""Per-task inner dynamics.

An inner run is a short optimization of the task parameters y: an
initialization rule followed by T applications of a step rule. Five step
rules are supported; every one is an explicit map y_next = Phi(x, y_prev)
whose Jacobian-transpose products against a vector come from just two
problem oracles (hvp_yy and cross_hvp), which is what the reverse-mode
hypergradient needs.

Rules beyond plain gradient descent keep their meta-parameters inside extra
segments of x:

  meta_sgd       "rates"        per-coordinate step sizes through softplus
  mtnet_mask     "mask_logits"  one logit per y segment, sigmoid-gated step
  warp_grad_diag "warp_logdiag" elementwise log of a diagonal warp
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import MissingSegment, NonFiniteValue
from .numerics import Layout, ParamVector, RngStream
from .objectives import BilevelObjective, Paradigm, Split

__all__ = [
    "InnerRule",
    "InnerConfig",
    "InnerTrajectory",
    "init_task_params",
    "inner_step",
    "run_inner",
    "step_transposed_jvps",
    "required_x_segments",
    "softplus",
    "softplus_inverse",
    "sigmoid",
]

DEFAULT_INIT_SD = 0.01


class InnerRule(enum.Enum):
    GD = "gd"
    META_SGD = "meta_sgd"
    BDA = "bda"
    MTNET_MASK = "mtnet_mask"
    WARP_GRAD_DIAG = "warp_grad_diag"


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def softplus_inverse(s: float) -> float:
    """Solve softplus(r) = s for r; s must be positive."""
    if s <= 0:
        raise ValueError("softplus is positive; no preimage for s <= 0")
    return float(np.log(np.expm1(s)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class InnerConfig:
    steps: int
    step_size: float
    rule: InnerRule = InnerRule.GD
    bda_alpha: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0.0 <= self.bda_alpha <= 1.0:
            raise ValueError("bda_alpha must be in [0, 1]")


@dataclass(frozen=True)
class InnerTrajectory:
    """Iterates of one inner run.

    When recorded, iterates holds y_0..y_T; otherwise only (y_0, y_T) was
    kept and the reverse pass cannot revisit intermediate steps. Runs of at
    most one step are always effectively recorded.
    """

    iterates: tuple[ParamVector, ...]
    config: InnerConfig
    task: object
    x_snapshot: ParamVector
    recorded: bool = True

    @property
    def steps(self) -> int:
        return self.config.steps

    @property
    def y_final(self) -> ParamVector:
        return self.iterates[-1]

    def iterate(self, t: int) -> ParamVector:
        if not 0 <= t <= self.steps:
            raise IndexError(f"iterate {t} outside 0..{self.steps}")
        if self.recorded:
            return self.iterates[t]
        if t == 0:
            return self.iterates[0]
        if t == self.steps:
            return self.iterates[-1]
        raise IndexError(f"iterate {t} was not recorded")


def required_x_segments(rule: InnerRule, y_layout: Layout) -> tuple[tuple[str, int], ...]:
    """Extra x segments a rule needs, as (name, length) pairs."""
    if rule is InnerRule.META_SGD:
        return (("rates", y_layout.dim),)
    if rule is InnerRule.MTNET_MASK:
        return (("mask_logits", len(y_layout.segments)),)
    if rule is InnerRule.WARP_GRAD_DIAG:
        return (("warp_logdiag", y_layout.dim),)
    return ()


def init_task_params(
    paradigm: Paradigm,
    problem: BilevelObjective,
    x: ParamVector,
    rng: RngStream,
    init_sd: float = DEFAULT_INIT_SD,
) -> ParamVector:
    """y_0 for one task: a copy of x["init"], or a small Gaussian draw."""
    if paradigm is Paradigm.META_INIT:
        if not x.layout.has("init"):
            raise MissingSegment("meta-init paradigm needs x segment 'init'")
        return ParamVector(problem.y_layout, x.segment("init"))
    gen = rng.generator()
    values = init_sd * gen.standard_normal(problem.y_layout.dim)
    return ParamVector(problem.y_layout, values, copy=False)


def _require_segment(x: ParamVector, name: str, rule: InnerRule) -> np.ndarray:
    if not x.layout.has(name):
        raise MissingSegment(f"rule {rule.value} needs x segment {name!r}")
    return x.segment(name)


def _mask_per_coordinate(x: ParamVector, y_layout: Layout, rule: InnerRule) -> np.ndarray:
    logits = _require_segment(x, "mask_logits", rule)
    if logits.shape[0] != len(y_layout.segments):
        raise MissingSegment(
            f"mask_logits has {logits.shape[0]} entries for "
            f"{len(y_layout.segments)} y segments"
        )
    lengths = [seg.length for seg in y_layout.segments]
    return np.repeat(sigmoid(logits), lengths)


def inner_step(
    rule: InnerRule,
    config: InnerConfig,
    problem: BilevelObjective,
    x: ParamVector,
    y_prev: ParamVector,
    task,
) -> ParamVector:
    s = config.step_size
    g_f = problem.grad_y(x, y_prev, task, Split.TRAIN)

    if rule is InnerRule.GD:
        y_next = y_prev - s * g_f
    elif rule is InnerRule.META_SGD:
        rates = _require_segment(x, "rates", rule)
        y_next = y_prev.like(y_prev.values - softplus(rates) * g_f.values)
    elif rule is InnerRule.BDA:
        a = config.bda_alpha
        g_F = problem.grad_y(x, y_prev, task, Split.VAL)
        y_next = y_prev - s * (a * g_f + (1.0 - a) * g_F)
    elif rule is InnerRule.MTNET_MASK:
        m = _mask_per_coordinate(x, y_prev.layout, rule)
        y_next = y_prev.like(y_prev.values - s * m * g_f.values)
    elif rule is InnerRule.WARP_GRAD_DIAG:
        d = np.exp(_require_segment(x, "warp_logdiag", rule))
        y_next = y_prev.like(y_prev.values - s * d * g_f.values)
    else:
        raise ValueError(f"unhandled rule {rule!r}")

    if not y_next.is_finite():
        raise NonFiniteValue(f"inner step under rule {rule.value} produced non-finite y")
    return y_next


def run_inner(
    rule: InnerRule,
    config: InnerConfig,
    problem: BilevelObjective,
    x: ParamVector,
    y_0: ParamVector,
    task,
    record: bool = True,
) -> InnerTrajectory:
    y = y_0
    kept = [y_0]
    for _ in range(config.steps):
        y = inner_step(rule, config, problem, x, y, task)
        if record:
            kept.append(y)
    if not record and config.steps >= 1:
        kept.append(y)
    return InnerTrajectory(
        iterates=tuple(kept),
        config=config,
        task=task,
        x_snapshot=x,
        recorded=record or config.steps <= 1,
    )


def _segment_inner_products(values: np.ndarray, layout: Layout) -> np.ndarray:
    offsets = [seg.offset for seg in layout.segments]
    return np.add.reduceat(values, offsets)


def step_transposed_jvps(
    rule: InnerRule,
    config: InnerConfig,
    problem: BilevelObjective,
    x: ParamVector,
    y_prev: ParamVector,
    task,
    v: ParamVector,
) -> tuple[ParamVector, ParamVector]:
    """Transpose-Jacobian products of one step map Phi at (x, y_prev).

    Returns (aT_v, bT_v) where aT_v = (dPhi/dy_prev)^T v in y's layout and
    bT_v = (dPhi/dx)^T v in x's layout. These drive the reverse recurrence:
    the adjoint flows backward through aT_v while bT_v accumulates into the
    meta-gradient.
    """
    s = config.step_size

    def hvp(w: ParamVector, split=Split.TRAIN) -> ParamVector:
        return problem.hvp_yy(x, y_prev, task, split, w)

    def cross(w: ParamVector, split=Split.TRAIN) -> ParamVector:
        return problem.cross_hvp(x, y_prev, task, split, w)

    if rule is InnerRule.GD:
        aT = v - s * hvp(v)
        bT = -s * cross(v)
    elif rule is InnerRule.META_SGD:
        rates = _require_segment(x, "rates", rule)
        sig = softplus(rates)
        sv = v.like(sig * v.values)
        aT = v - hvp(sv)
        g_f = problem.grad_y(x, y_prev, task, Split.TRAIN)
        bT = -cross(sv)
        bT = bT.add_to_segment("rates", -sigmoid(rates) * g_f.values * v.values)
    elif rule is InnerRule.BDA:
        a = config.bda_alpha
        aT = v - s * (a * hvp(v) + (1.0 - a) * hvp(v, Split.VAL))
        bT = -s * (a * cross(v) + (1.0 - a) * cross(v, Split.VAL))
    elif rule is InnerRule.MTNET_MASK:
        m = _mask_per_coordinate(x, y_prev.layout, rule)
        mv = v.like(m * v.values)
        aT = v - s * hvp(mv)
        g_f = problem.grad_y(x, y_prev, task, Split.TRAIN)
        logits = x.segment("mask_logits")
        sig = sigmoid(logits)
        per_seg = _segment_inner_products(g_f.values * v.values, y_prev.layout)
        bT = -s * cross(mv)
        bT = bT.add_to_segment("mask_logits", -s * sig * (1.0 - sig) * per_seg)
    elif rule is InnerRule.WARP_GRAD_DIAG:
        d = np.exp(_require_segment(x, "warp_logdiag", rule))
        dv = v.like(d * v.values)
        aT = v - s * hvp(dv)
        g_f = problem.grad_y(x, y_prev, task, Split.TRAIN)
        bT = -s * cross(dv)
        bT = bT.add_to_segment("warp_logdiag", -s * d * g_f.values * v.values)
    else:
        raise ValueError(f"unhandled rule {rule!r}")

    if not (aT.is_finite() and bT.is_finite()):
        raise NonFiniteValue(f"transposed products under rule {rule.value} are non-finite")
    return aT, bT
