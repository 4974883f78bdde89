"""Experiment orchestration: configuration, the meta-training loop, and
held-out evaluation.

One meta-iteration samples a batch of tasks, adapts each task's parameters
with the configured inner dynamics from a shared immutable snapshot of x,
estimates the per-task meta-gradients, averages them in task-index order,
and applies one meta-optimizer step. Per-task work is embarrassingly
parallel; with threads > 1 it runs on a pool, and the fixed reduction order
keeps results independent of scheduling.

All randomness derives from the run seed through named counter-based
streams (task sampling, per-task inits, evaluation, parameter init), so a
config replays exactly and changing the evaluation cadence never perturbs
training-task sampling.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import (
    ClassDirectory,
    EpisodeSpec,
    SyntheticGaussian,
    sample_task_batch,
)
from .errors import ConfigError, NonFiniteValue, UnknownMethod
from .hypergrad import (
    Darts,
    FirstOrder,
    HyperGradMethod,
    Implicit,
    Reverse,
    TruncatedReverse,
    compose_named_method,
    compute_hypergradient,
    needs_full_trajectory,
)
from .inner import (
    InnerConfig,
    InnerRule,
    init_task_params,
    required_x_segments,
    run_inner,
    softplus_inverse,
)
from .meta_opt import Adam, MetaOptimizer, Momentum, Sgd, meta_step
from .numerics import ParamVector, RngStream
from .objectives import (
    BilevelObjective,
    LossKind,
    Paradigm,
    Regularizer,
    Split,
    make_meta_feature_softmax,
    make_meta_init_mlp,
    make_quadratic,
)

__all__ = [
    "DataSection",
    "ProblemSection",
    "InnerSection",
    "HypergradSection",
    "MetaOptSection",
    "RunSection",
    "ExperimentConfig",
    "Experiment",
    "TrainState",
    "MetricsRecord",
    "build_experiment",
    "meta_train",
    "meta_evaluate",
    "metrics_to_jsonl",
    "apply_overrides",
]

# stream ids carving up the run seed; values are arbitrary but frozen
_TASK_STREAM = 101
_INIT_STREAM = 102
_EVAL_TASK_STREAM = 103
_EVAL_INIT_STREAM = 104
_PARAM_STREAM = 105

_FEAT_INIT_SD_NUM = 1.0  # feat segment init sd = 1/sqrt(dim_in)
_INIT_SEGMENT_SD = 0.01


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    num_classes: int = 20
    dim: int = 8
    cluster_spread: float = 10.0
    noise_sd: float = 0.5
    root: str | None = None
    file_format: str = "csv"
    way: int = 5
    shot: int = 1
    query: int = 15
    batch_size: int = 4

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ValueError(f"source must be 'synthetic' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.root:
            raise ValueError("directory source needs a root path")
        for name in ("num_classes", "dim", "way", "shot", "query", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


@dataclass(frozen=True)
class ProblemSection:
    kind: str = "mlp"
    hidden: int = 0
    loss: str = "cross_entropy"
    reg: str = "none"
    reg_coef: float = 0.0
    dim_feat: int = 16
    quad_a: object = 2.0
    quad_lam: float = 1.0
    quad_b: object = 1.0

    def __post_init__(self):
        if self.kind not in ("mlp", "feature_softmax", "quadratic"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.hidden < 0:
            raise ValueError("hidden must be >= 0")
        if self.loss not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.reg not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularizer {self.reg!r}")
        if self.reg_coef < 0:
            raise ValueError("reg_coef must be >= 0")
        if self.dim_feat < 1:
            raise ValueError("dim_feat must be >= 1")
        if self.quad_lam <= 0:
            raise ValueError("quad_lam must be > 0")


@dataclass(frozen=True)
class InnerSection:
    steps: int = 5
    step_size: float = 0.1
    bda_alpha: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0.0 <= self.bda_alpha <= 1.0:
            raise ValueError("bda_alpha must be in [0, 1]")


@dataclass(frozen=True)
class HypergradSection:
    truncation_k: int | None = None
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    prox_lambda: float | None = None
    darts_delta: float = 1e-2

    def __post_init__(self):
        if self.truncation_k is not None and self.truncation_k < 1:
            raise ValueError("truncation_k must be >= 1")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be > 0")
        if self.cg_max_iter is not None and self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be >= 1")
        if self.prox_lambda is not None and self.prox_lambda < 0:
            raise ValueError("prox_lambda must be >= 0")
        if self.darts_delta <= 0:
            raise ValueError("darts_delta must be > 0")


@dataclass(frozen=True)
class MetaOptSection:
    kind: str = "momentum"
    lr: float = 1e-2
    mu: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown meta optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must be in [0, 1)")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must be in [0, 1)")
        if self.eps_hat <= 0:
            raise ValueError("eps_hat must be > 0")


_RULE_NAMES = {r.value: r for r in InnerRule}
_METHOD_KINDS = ("reverse", "truncated", "implicit", "first_order", "darts")


@dataclass(frozen=True)
class RunSection:
    method: str = "MAML"
    paradigm: str | None = None
    inner_rule: str | None = None
    hypergrad_method: str | None = None
    meta_iterations: int = 100
    eval_every: int = 100
    eval_tasks: int = 50
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("meta_iterations", "eval_every", "eval_tasks", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.paradigm is not None and self.paradigm not in ("meta_init", "meta_feature"):
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.inner_rule is not None and self.inner_rule not in _RULE_NAMES:
            raise ValueError(f"unknown inner rule {self.inner_rule!r}")
        if self.hypergrad_method is not None and self.hypergrad_method not in _METHOD_KINDS:
            raise ValueError(f"unknown hypergrad method {self.hypergrad_method!r}")


_SECTIONS = {
    "data": DataSection,
    "problem": ProblemSection,
    "inner": InnerSection,
    "hypergrad": HypergradSection,
    "meta_opt": MetaOptSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    problem: ProblemSection = ProblemSection()
    inner: InnerSection = InnerSection()
    hypergrad: HypergradSection = HypergradSection()
    meta_opt: MetaOptSection = MetaOptSection()
    run: RunSection = RunSection()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
        parts = {}
        for key, section_cls in _SECTIONS.items():
            body = raw.get(key, {})
            if not isinstance(body, dict):
                raise ConfigError(f"{key}: section must be an object")
            names = {f.name for f in fields(section_cls)}
            for field_name in body:
                if field_name not in names:
                    raise ConfigError(f"{key}.{field_name}: unknown field")
            try:
                parts[key] = section_cls(**body)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{key}: {e}") from e
        return cls(**parts)

    def to_dict(self) -> dict:
        return {key: asdict(getattr(self, key)) for key in _SECTIONS}


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply "section.field=json_value" strings to a raw config dict."""
    out = json.loads(json.dumps(raw))  # deep copy, JSON types only
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        if len(keys) != 2 or not all(keys):
            raise ConfigError(f"override path {path!r} must be section.field")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out.setdefault(keys[0], {})[keys[1]] = value
    return out


@dataclass(frozen=True)
class Experiment:
    cfg: ExperimentConfig
    source: object  # DatasetSource or None for the quadratic problem
    problem: BilevelObjective
    paradigm: Paradigm
    inner_config: InnerConfig
    method: HyperGradMethod
    episode_spec: EpisodeSpec | None


@dataclass(frozen=True)
class TrainState:
    x: ParamVector
    opt: MetaOptimizer
    iteration: int = 0


@dataclass(frozen=True)
class MetricsRecord:
    meta_iter: int
    ul_loss: float
    mean_inner_final_loss: float
    eval_post_adapt_loss: float | None
    eval_post_adapt_accuracy: float | None
    wall_ms: float

    def to_json_dict(self) -> dict:
        # wall_ms stays out of the serialized form so identical runs
        # produce identical files
        return {
            "meta_iter": self.meta_iter,
            "ul_loss": self.ul_loss,
            "mean_inner_final_loss": self.mean_inner_final_loss,
            "eval_post_adapt_loss": self.eval_post_adapt_loss,
            "eval_post_adapt_accuracy": self.eval_post_adapt_accuracy,
        }


def metrics_to_jsonl(records: list[MetricsRecord]) -> str:
    return "".join(json.dumps(r.to_json_dict()) + "\n" for r in records)


def _make_regularizer(cfg: ProblemSection) -> Regularizer:
    if cfg.reg == "none":
        return Regularizer.none()
    return Regularizer(cfg.reg, cfg.reg_coef)


def _resolve_method(cfg: ExperimentConfig) -> tuple[Paradigm, InnerRule, HyperGradMethod]:
    run, hgc = cfg.run, cfg.hypergrad
    if run.method.strip().lower() == "custom":
        missing = [
            name
            for name in ("paradigm", "inner_rule", "hypergrad_method")
            if getattr(run, name) is None
        ]
        if missing:
            raise ConfigError(f"run.{missing[0]}: required when run.method is 'custom'")
        paradigm = Paradigm.META_INIT if run.paradigm == "meta_init" else Paradigm.META_FEATURE
        rule = _RULE_NAMES[run.inner_rule]
        kind = run.hypergrad_method
    else:
        try:
            composed = compose_named_method(run.method)
        except UnknownMethod as e:
            raise ConfigError(f"run.method: {e}") from e
        paradigm, rule = composed.paradigm, composed.inner_rule
        kind = {
            Reverse: "reverse",
            TruncatedReverse: "truncated",
            Implicit: "implicit",
            FirstOrder: "first_order",
            Darts: "darts",
        }[type(composed.hypergrad_method)]

    if kind == "reverse":
        method: HyperGradMethod = Reverse()
    elif kind == "truncated":
        method = TruncatedReverse(hgc.truncation_k)
    elif kind == "implicit":
        method = Implicit(hgc.cg_tol, hgc.cg_max_iter, hgc.prox_lambda)
    elif kind == "first_order":
        method = FirstOrder()
    else:
        method = Darts(hgc.darts_delta)
    return paradigm, rule, method


def _initial_segment_values(
    name: str, length: int, gen: np.random.Generator, dim_in: int, step_size: float
) -> np.ndarray:
    if name == "init":
        return _INIT_SEGMENT_SD * gen.standard_normal(length)
    if name == "feat":
        return (_FEAT_INIT_SD_NUM / np.sqrt(dim_in)) * gen.standard_normal(length)
    if name == "rates":
        return np.full(length, softplus_inverse(step_size))
    # theta, mask_logits, warp_logdiag all start at zero
    return np.zeros(length)


def build_experiment(cfg: ExperimentConfig) -> tuple[Experiment, TrainState]:
    paradigm, rule, method = _resolve_method(cfg)
    data, prob = cfg.data, cfg.problem

    if prob.kind == "quadratic":
        source = None
        episode = None
        problem: BilevelObjective = make_quadratic(prob.quad_a, prob.quad_lam, prob.quad_b)
    else:
        if data.source == "synthetic":
            source = SyntheticGaussian(
                data.num_classes, data.dim, data.cluster_spread, data.noise_sd,
                seed=cfg.run.seed,
            )
        else:
            source = ClassDirectory.from_path(data.root, data.file_format)
        if data.way > len(source.class_names()):
            raise ConfigError(
                f"data.way: {data.way} classes requested but the source has "
                f"{len(source.class_names())}"
            )
        episode = EpisodeSpec(data.way, data.shot, data.query, data.batch_size)
        dim_in = source.feature_dim()
        reg = _make_regularizer(prob)
        if prob.kind == "mlp":
            loss = (
                LossKind.CROSS_ENTROPY
                if prob.loss == "cross_entropy"
                else LossKind.MEAN_SQUARED_ERROR
            )
            problem = make_meta_init_mlp(dim_in, prob.hidden, data.way, loss, reg)
        else:
            problem = make_meta_feature_softmax(dim_in, prob.dim_feat, data.way, reg)

    if paradigm is Paradigm.META_INIT and not problem.x_layout.has("init"):
        raise ConfigError(
            f"problem.kind: {prob.kind!r} has no initialization segment; "
            "meta-init methods need kind 'mlp'"
        )
    if paradigm is Paradigm.META_FEATURE and problem.x_layout.has("init"):
        raise ConfigError(
            f"problem.kind: {prob.kind!r} is a meta-init problem; "
            "meta-feature methods need kind 'feature_softmax' or 'quadratic'"
        )

    inner_cfg = InnerConfig(
        cfg.inner.steps, cfg.inner.step_size, rule=rule, bda_alpha=cfg.inner.bda_alpha
    )

    layout = problem.x_layout
    for name, length in required_x_segments(rule, problem.y_layout):
        layout = layout.extended(name, length)
    gen = RngStream(cfg.run.seed, _PARAM_STREAM).generator()
    dim_in_for_feat = source.feature_dim() if source is not None else 1
    pieces = [
        _initial_segment_values(
            seg.name, seg.length, gen, dim_in_for_feat, cfg.inner.step_size
        )
        for seg in layout.segments
    ]
    x = ParamVector(layout, np.concatenate(pieces))

    mo = cfg.meta_opt
    if mo.kind == "sgd":
        opt: MetaOptimizer = Sgd(mo.lr)
    elif mo.kind == "momentum":
        opt = Momentum(mo.lr, mo.mu)
    else:
        opt = Adam(mo.lr, mo.beta1, mo.beta2, mo.eps_hat)

    exp = Experiment(cfg, source, problem, paradigm, inner_cfg, method, episode)
    return exp, TrainState(x=x, opt=opt, iteration=0)


def _training_tasks(exp: Experiment, iteration: int) -> tuple:
    if exp.source is None:
        return (None,) * exp.cfg.data.batch_size
    rng = RngStream(exp.cfg.run.seed, _TASK_STREAM).child(iteration)
    return sample_task_batch(exp.source, exp.episode_spec, rng).tasks


def _adapt_and_grade(exp: Experiment, x: ParamVector, task, init_rng: RngStream):
    """Inner run plus hypergradient for one task against a fixed x."""
    y0 = init_task_params(exp.paradigm, exp.problem, x, init_rng)
    record = needs_full_trajectory(exp.method)
    traj = run_inner(
        exp.inner_config.rule, exp.inner_config, exp.problem, x, y0, task, record=record
    )
    res = compute_hypergradient(exp.method, exp.problem, exp.paradigm, traj, x, task)
    inner_final = exp.problem.value(x, traj.y_final, task, Split.TRAIN)
    return res.grad_x, res.ul_value, inner_final


def meta_train(
    exp: Experiment, state: TrainState
) -> tuple[TrainState, list[MetricsRecord]]:
    """Run cfg.run.meta_iterations rounds from the given state.

    Returns the advanced state and one MetricsRecord per round. Non-finite
    values abort with the failing round in the message.
    """
    cfg = exp.cfg
    records: list[MetricsRecord] = []
    n_batch = cfg.data.batch_size
    pool = ThreadPoolExecutor(cfg.run.threads) if cfg.run.threads > 1 else None
    try:
        for _ in range(cfg.run.meta_iterations):
            start = time.perf_counter()
            it = state.iteration
            try:
                tasks = _training_tasks(exp, it)
                init_root = RngStream(cfg.run.seed, _INIT_STREAM).child(it)
                x_snap = state.x

                def work(j: int):
                    return _adapt_and_grade(exp, x_snap, tasks[j], init_root.child(j))

                if pool is None:
                    results = [work(j) for j in range(n_batch)]
                else:
                    results = list(pool.map(work, range(n_batch)))

                g_total = results[0][0]
                for grad, _, _ in results[1:]:
                    g_total = g_total + grad
                g_mean = g_total * (1.0 / n_batch)
                ul_loss = sum(r[1] for r in results) / n_batch
                inner_loss = sum(r[2] for r in results) / n_batch

                x_next, opt_next = meta_step(state.opt, state.x, g_mean)
                state = TrainState(x=x_next, opt=opt_next, iteration=it + 1)
            except NonFiniteValue as e:
                raise NonFiniteValue(f"run aborted at meta-iteration {it}: {e}") from e

            eval_loss = None
            eval_acc = None
            if (it + 1) % cfg.run.eval_every == 0:
                eval_loss, eval_acc = meta_evaluate(
                    exp, state, cfg.run.eval_tasks, round_index=it + 1
                )
            records.append(
                MetricsRecord(
                    meta_iter=it,
                    ul_loss=ul_loss,
                    mean_inner_final_loss=inner_loss,
                    eval_post_adapt_loss=eval_loss,
                    eval_post_adapt_accuracy=eval_acc,
                    wall_ms=(time.perf_counter() - start) * 1e3,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return state, records


def meta_evaluate(
    exp: Experiment, state: TrainState, n_tasks: int, round_index: int | None = None
) -> tuple[float, float | None]:
    """Post-adaptation validation loss (and accuracy, for classifiers) on
    fresh tasks. Reads state.x but never changes it; task draws depend only
    on the seed and round_index, not on training progress."""
    r = state.iteration if round_index is None else round_index
    if exp.source is None:
        tasks: tuple = (None,) * n_tasks
    else:
        spec = replace(exp.episode_spec, batch_size=n_tasks)
        rng = RngStream(exp.cfg.run.seed, _EVAL_TASK_STREAM).child(r)
        tasks = sample_task_batch(exp.source, spec, rng).tasks
    init_root = RngStream(exp.cfg.run.seed, _EVAL_INIT_STREAM).child(r)

    losses = []
    accuracies = []
    for j, task in enumerate(tasks):
        y0 = init_task_params(exp.paradigm, exp.problem, state.x, init_root.child(j))
        traj = run_inner(
            exp.inner_config.rule, exp.inner_config, exp.problem, state.x, y0, task,
            record=False,
        )
        losses.append(exp.problem.value(state.x, traj.y_final, task, Split.VAL))
        if exp.problem.is_classifier and task is not None:
            scores = exp.problem.predict(state.x, traj.y_final, task.val_features)
            accuracies.append(float(np.mean(np.argmax(scores, axis=1) == task.val_labels)))
    mean_loss = float(np.mean(losses))
    mean_acc = float(np.mean(accuracies)) if accuracies else None
    return mean_loss, mean_acc
