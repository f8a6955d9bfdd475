"""Few-shot training: one coordination round per full-batch AdamW step."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .agents import (
    AgentTeam,
    Batch,
    Description,
    GlobalCoordinator,
    LinguisticContextUnit,
    NominalEmbeddingUnit,
    StepOutputs,
    VisualPerceptionUnit,
    clip_grad,
    gc_coordinate,
)
from .datagen import Benchmark, DatasetSplit
from .encoders import PromptTemplate, backbone_hash
from .messaging import AgentId, Message, MessageBus
from .objectives import LossBundle, NumericError, contrastive_loss, normalize_rows, total_loss
from . import kernels
from .params import Ablation, AdapterConfig, AdapterParams, init_adapter, parse_flags

log = logging.getLogger(__name__)

LR_RANGE = (1e-5, 1e-3)


class FrozenBackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    K: int = 16
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    lr_schedule: str = "COSINE"
    grid: tuple[float, ...] | None = None
    ablation_flags: frozenset[Ablation] = frozenset()
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    protocol: str = "few_shot"  # or "zero_shot": exchange-only descriptions

    def __post_init__(self):
        object.__setattr__(self, "ablation_flags", parse_flags(self.ablation_flags))
        if self.lr_schedule.upper() != "COSINE":
            raise ValueError("only the COSINE schedule is supported")
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(x) for x in self.grid))
            for lr in self.grid:
                if not LR_RANGE[0] <= lr <= LR_RANGE[1]:
                    raise ValueError(f"grid lr {lr} outside [{LR_RANGE[0]}, {LR_RANGE[1]}]")
        if self.protocol not in ("few_shot", "zero_shot"):
            raise ValueError(f"unknown protocol {self.protocol!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation_flags"] = sorted(f.value for f in self.ablation_flags)
        d["grid"] = None if self.grid is None else list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adapter" in d and isinstance(d["adapter"], dict):
            d["adapter"] = AdapterConfig(**d["adapter"])
        if d.get("grid") is not None:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass
class Task:
    """Everything an agent team needs to know about the benchmark."""

    benchmark: Benchmark
    concepts: list[str]
    class_index: list[int]  # benchmark class index of each concept
    own_templates: list[str]

    @classmethod
    def from_benchmark(cls, benchmark: Benchmark) -> "Task":
        ood = benchmark.ood_indices
        return cls(benchmark, [benchmark.classes[i].name for i in ood], list(ood),
                   [benchmark.classes[i].template for i in ood])

    @property
    def templates(self) -> list[PromptTemplate]:
        return [PromptTemplate(t, c) for c, t in zip(self.concepts, self.own_templates)]

    def batch(self, sample_ids) -> Batch:
        ids = np.asarray(sample_ids, dtype=np.int64)
        b = self.benchmark
        lookup = {c: k for k, c in enumerate(self.class_index)}
        concepts = np.array([lookup[int(b.labels[s])] for s in ids])
        return Batch(b.samples[ids], concepts)

    def team(self, params: AdapterParams, zero_shot: bool = False) -> AgentTeam:
        b = self.benchmark
        defaults = [Description(i, t, 0) for i, t in enumerate(self.own_templates)]
        return AgentTeam(
            VisualPerceptionUnit(params, b.visual),
            LinguisticContextUnit(params, b.text, b.vocab, self.concepts, self.own_templates),
            NominalEmbeddingUnit(params, self.own_templates, zero_shot=zero_shot),
            GlobalCoordinator(params, defaults),
        )

    def init_params(self, config: TrainConfig) -> AdapterParams:
        b = self.benchmark
        return init_adapter(self.concepts, self.templates, b.vocab.unk, b.d_embed, config.adapter,
                            config.seed, config.ablation_flags)


def new_bus() -> MessageBus:
    return MessageBus(list(AgentId))


def loss_and_grads(out: StepOutputs, params: AdapterParams, team: AgentTeam, labels: np.ndarray,
                   step: int | None = None) -> tuple[LossBundle, dict[str, np.ndarray]]:
    flags = params.flags
    v_hat = normalize_rows(out.phi)
    t_norm = np.linalg.norm(out.text, axis=1, keepdims=True)
    t_hat = out.text / t_norm

    total_blocks = sum(len(img) for img, _ in out.blocks)
    j_con = 0.0
    dk = 0.0
    d_that = np.zeros_like(t_hat)
    for img, txt in out.blocks:
        if img.shape[1] < 2:
            continue  # single-concept block: softmax is 1, loss and grads vanish
        s = np.einsum("bnd,bmd->bnm", v_hat[img], t_hat[txt])
        loss, ds, dkb = contrastive_loss(s, out.kappa)
        share = len(img) / total_blocks
        j_con += share * loss
        dk += share * dkb
        contrib = np.einsum("bnm,bnd->bmd", ds * share, v_hat[img])
        np.add.at(d_that, txt.reshape(-1), contrib.reshape(-1, contrib.shape[-1]))
    d_text = (d_that - t_hat * np.sum(t_hat * d_that, axis=1, keepdims=True)) / t_norm

    logits = out.phi @ params.theta_cls.T
    j_cls, dlogits = kernels.cross_entropy(logits, labels)
    d_theta_cls = dlogits.T @ out.phi

    bundle = total_loss(j_con, j_cls, out.w_con, out.w_cls, out.kappa, step)
    w_con, w_cls = out.w_con, out.w_cls

    grads = {name: np.zeros_like(a) for name, a in params.trainable()}
    lg = team.linguistic.backward(out.text_cache, w_con * d_text)
    for k, v in lg.items():
        if k in grads:
            grads[k] = v
    if Ablation.NO_NOM not in flags:
        n_c = params.names.n_c
        grads["neu.names"] = np.repeat(lg["name_embeddings"][:, None, :] / n_c, n_c, axis=1)

    coord = params.coordinator
    if Ablation.NO_COORD not in flags:
        kp = float(coord.kappa_param[0])
        grads["coord.kappa_param"] = np.array([w_con * dk * clip_grad(kp, 0.5, 2.0)])
        if Ablation.NO_DYNBAL not in flags:
            p1, p2 = float(coord.w_con_param[0]), float(coord.w_cls_param[0])
            s = p1 + p2
            grads["coord.w_con_param"] = np.array([(clip_grad(p1, 0.5, 2.0) * j_con - bundle.j_total) / s])
            grads["coord.w_cls_param"] = np.array([(clip_grad(p2, 0.1, 1.0) * j_cls - bundle.j_total) / s])
    grads["head.theta_cls"] = w_cls * d_theta_cls
    return bundle, grads


def objective(params: AdapterParams, task: Task, batch: Batch, zero_shot: bool = False) -> float:
    team = task.team(params, zero_shot)
    out = gc_coordinate(new_bus(), team, batch, team.initial_states())
    j_con = 0.0
    v_hat = normalize_rows(out.phi)
    t_hat = normalize_rows(out.text)
    total_blocks = sum(len(img) for img, _ in out.blocks)
    for img, txt in out.blocks:
        if img.shape[1] < 2:
            continue
        s = np.einsum("bnd,bmd->bnm", v_hat[img], t_hat[txt])
        j_con += len(img) / total_blocks * contrastive_loss(s, out.kappa)[0]
    j_cls = kernels.cross_entropy(out.phi @ params.theta_cls.T, batch.concepts)[0]
    return out.w_con * j_con + out.w_cls * j_cls


@dataclass
class TrainResult:
    params: AdapterParams
    log: list[dict]
    trace: list[Message]
    backbone_hash: str
    initial: LossBundle
    final: LossBundle
    strategy: str | None
    config: TrainConfig


def _make_optimizer(params: AdapterParams, config: TrainConfig, lr: float):
    tensors = [torch.from_numpy(a) for _, a in params.trainable()]
    opt = torch.optim.AdamW(tensors, lr=lr, weight_decay=config.weight_decay, foreach=False)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    return tensors, opt, sched


def train_few_shot(benchmark: Benchmark, split: DatasetSplit, config: TrainConfig,
                   trace_rounds: str = "last", on_step: Callable[[int, LossBundle], None] | None = None) -> TrainResult:
    if split.K != config.K:
        raise ValueError(f"split has K={split.K} but config asks for K={config.K}")
    if config.grid:
        return grid_search(benchmark, split, config, trace_rounds)
    return _train(benchmark, split, config, config.lr, trace_rounds, on_step)


def _train(benchmark, split, config, lr, trace_rounds, on_step=None) -> TrainResult:
    torch.manual_seed(config.seed)
    task = Task.from_benchmark(benchmark)
    before = backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab)
    params = task.init_params(config)
    zero_shot = config.protocol == "zero_shot"
    team = task.team(params, zero_shot)
    batch = task.batch(split.train_ids)
    tensors, opt, sched = _make_optimizer(params, config, lr)
    names = [n for n, _ in params.trainable()]

    bus = new_bus()
    states = team.initial_states()
    rows: list[dict] = []
    first = last = None
    out = None
    for step in range(config.epochs):
        mark = len(bus.trace)
        out = gc_coordinate(bus, team, batch, states, step_index=step)
        states = out.states
        bundle, grads = loss_and_grads(out, params, team, batch.concepts, step)
        if trace_rounds == "last" and step < config.epochs - 1:
            del bus.trace[mark:]
        elif trace_rounds == "none":
            bus.trace.clear()
        if abs(bundle.w_con + bundle.w_cls - 1.0) > 1e-12:
            log.debug("step %d: w_con + w_cls = %.6f", step, bundle.w_con + bundle.w_cls)
        rows.append(bundle.row(step))
        first = first or bundle
        last = bundle
        if on_step:
            on_step(step, bundle)
        for t, n in zip(tensors, names):
            g = grads[n]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"gradient of {n}", float("nan"), step)
            t.grad = torch.from_numpy(g)
        opt.step()
        sched.step()

    params.context = None if out is None else out.context
    params.round_to_f32()
    after = backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab)
    if after != before:
        raise FrozenBackboneError("backbone weights changed during training")
    return TrainResult(params, rows, list(bus.trace), after, first, last,
                       None if out is None else out.strategy, config)


def grid_search(benchmark, split, config: TrainConfig, trace_rounds="last") -> TrainResult:
    """Pick the lr with the lowest final training objective (no held-out data is visible)."""
    best = None
    for lr in config.grid:
        r = _train(benchmark, split, config, lr, trace_rounds)
        log.info("grid lr=%g final j_total=%.6f", lr, r.final.j_total)
        if best is None or r.final.j_total < best[1].final.j_total:
            best = (lr, r)
    lr, result = best
    from dataclasses import replace
    result.config = replace(config, lr=lr, grid=config.grid)
    return result


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    groups: dict[str, float]
    detach_error: float
    residual_gradient: float
    tolerance: float

    @property
    def max_error(self) -> float:
        return max([*self.groups.values(), self.detach_error])

    @property
    def failing(self) -> list[str]:
        bad = [g for g, e in self.groups.items() if not e < self.tolerance]
        if not self.detach_error < self.tolerance:
            bad.append("vpu.detach")
        return bad

    @property
    def passed(self) -> bool:
        return not self.failing


class GradCheckError(AssertionError):
    pass


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return float(err / scale)


def grad_check(params: AdapterParams, task: Task, batch: Batch, tolerance: float = 1e-4, h: float = 1e-5,
               zero_shot: bool = False) -> GradCheckReport:
    """Central finite differences of the total objective for every trainable scalar.

    Relative error per group is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
    Also checks that the detached residual of the robust visual encoding
    carries no gradient.
    """
    if len(batch.raw) > 8:
        raise ValueError("grad check batch must hold at most 8 samples")
    c = params.coordinator
    for name, x, kinks in (("kappa_param", c.kappa_param[0], (0.5, 2.0)),
                           ("w_con_param", c.w_con_param[0], (0.5, 2.0)),
                           ("w_cls_param", c.w_cls_param[0], (0.1, 1.0))):
        if any(abs(x - k) <= 2 * h for k in kinks):
            raise ValueError(f"{name}={x} sits on a clip kink; finite differences are undefined there")

    team = task.team(params, zero_shot)
    out = gc_coordinate(new_bus(), team, batch, team.initial_states())
    _, grads = loss_and_grads(out, params, team, batch.concepts)

    groups: dict[str, float] = {}
    for name, arr in params.trainable():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective(params, task, batch, zero_shot)
            flat[i] = orig - h
            fm = objective(params, task, batch, zero_shot)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        groups[name] = _rel_error(grads[name], numeric)

    # detach: analytic Jacobian of the robust encoding vs finite differences
    # of the normalization path alone, and of the full forward
    e = out.features
    detach_err = 0.0
    residual = 0.0
    from .agents import robust_features, robust_jacobian
    beta = params.visual.beta
    for row in e:
        ja = robust_jacobian(row)
        jn = np.zeros_like(ja)
        jfull = np.zeros_like(ja)
        for k in range(len(row)):
            d = np.zeros_like(row)
            d[k] = h
            jn[:, k] = ((row + d) / np.linalg.norm(row + d) - (row - d) / np.linalg.norm(row - d)) / (2 * h)
            jfull[:, k] = (robust_features((row + d)[None], beta)[0] - robust_features((row - d)[None], beta)[0]) / (2 * h)
        detach_err = max(detach_err, _rel_error(ja, jn))
        # what the residual would contribute if it were not detached
        residual = max(residual, float(np.abs(jfull - jn - beta * np.eye(len(row))).max()))
    return GradCheckReport(groups, detach_err, residual, tolerance)
