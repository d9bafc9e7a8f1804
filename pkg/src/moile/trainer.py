"""Sequential training over a task stream.

Per task: repartition every expert at the boundary (from the second task
on), then for each batch update the cluster centers, look up task
embeddings, run the mixture forward pass, add the singular-value and
orthogonality penalties and take an Adam step on the trainable factors and
routers. After each task the model is scored on every task seen so far.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numcore as nc
from .bench import Task, TaskStream, warmup_episodes
from .ctc import ClusterState, init_centers, observe_batch, task_embeddings
from .incremental import (
    PartitionedAdapter,
    choose_p,
    factored_svd,
    orthogonal_loss,
    partition_adapter,
    singular_value_losses,
    total_loss,
)
from .metrics import AccuracyMatrix
from .model import ModelConfig, MoileModel, accuracy, episode_task_embeddings, prediction_loss, run_backbone

log = logging.getLogger(__name__)

MODES = ("full", "seq_lora", "moe_lora_plain")
ABLATIONS = ("disable_incremental", "disable_task_router", "disable_Ls", "disable_Lo")
VARIANT_LABELS = {
    "disable_incremental": "Ours - w/oIL",
    "disable_task_router": "Ours - w/oTR",
    "disable_Ls": "Ours - w/oLS",
    "disable_Lo": "Ours - w/oLO",
}
# Table 4 row order, full method last
VARIANT_ORDER = ("Ours - w/oIL", "Ours - w/oTR", "Ours - w/oLS", "Ours - w/oLO", "Ours")


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, record: "RunRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    K: int = 2
    N1: int = 6
    N2: int = 2
    M: int = 4
    r: int = 8
    p_policy: str = "half"
    alpha: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    steps_per_task: int = 600
    warmup_steps: int = 800
    mode: str = "full"
    disable_incremental: bool = False
    disable_task_router: bool = False
    disable_Ls: bool = False
    disable_Lo: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "full" and any(getattr(self, a) for a in ABLATIONS):
            raise ValueError("ablation flags are only valid in full mode")

    @property
    def variant(self) -> str:
        if self.mode == "seq_lora":
            return "SeqLoRA"
        if self.mode == "moe_lora_plain":
            return "MoELoRA"
        on = [VARIANT_LABELS[a] for a in ABLATIONS if getattr(self, a)]
        if not on:
            return "Ours"
        return on[0] if len(on) == 1 else "Ours - " + "/".join(o.split(" - ")[1] for o in on)

    @property
    def incremental(self) -> bool:
        return self.mode == "full" and not self.disable_incremental

    @property
    def lambda1_eff(self) -> float:
        return 0.0 if self.disable_Ls or not self.incremental else self.lambda1

    @property
    def lambda2_eff(self) -> float:
        return 0.0 if self.disable_Lo or not self.incremental else self.lambda2

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        if self.mode == "seq_lora":
            # one adapter as wide as the K token experts active per token
            return replace(base, rank=self.K * self.r, n_token_experts=1, n_task_experts=0, top_k=1)
        return replace(base, rank=self.r, n_token_experts=self.N1, n_task_experts=self.N2, top_k=self.K)


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Adam with bias correction; state is keyed by parameter object."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[nc.Tensor, list] = {}

    def reset(self) -> None:
        self.state.clear()

    def step(self, grads: dict) -> None:
        for param, g in grads.items():
            if not param.requires_grad:
                continue
            st = self.state.get(param)
            if st is None:
                st = self.state[param] = [0, np.zeros_like(param.data), np.zeros_like(param.data)]
            st[0] += 1
            t, m, v = st
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            param.data = param.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def optimizer_step(optimizer: Adam, grads: dict) -> None:
    optimizer.step(grads)


# -- backbone -----------------------------------------------------------------

@lru_cache(maxsize=8)
def _pretrained(cfg: ModelConfig, seed: int, steps: int) -> tuple:
    rng = np.random.default_rng([seed, 7])
    from .model import init_backbone

    arrays = init_backbone(cfg, rng)
    if steps > 0:
        params = {k: nc.parameter(v, name=k) for k, v in arrays.items()}
        data = warmup_episodes(seed, 2048)
        opt = Adam(lr=3e-3)
        from .model import sequences

        def ffn(b, a):
            return a @ nc.transpose(params[f"b{b}.W_up"])

        for step in range(steps):
            idx = rng.choice(len(data), size=32, replace=False)
            batch = [data[i] for i in idx]
            tokens, feats, targets, C = sequences(batch)
            with nc.Tape() as tape:
                logits = run_backbone(params, cfg, tokens, feats, ffn)
                picked = nc.take(logits, np.arange(C - 1, C - 1 + targets.shape[1]), axis=1)
                loss = prediction_loss(picked, targets)
            opt.step(nc.backward(tape, loss))
        arrays = {k: p.data for k, p in params.items()}
    return tuple(sorted(arrays.items()))


def pretrained_backbone(cfg: ModelConfig, seed: int, steps: int) -> dict[str, np.ndarray]:
    """Backbone weights after a generic warm-up, cached per (cfg, seed)."""
    return {k: v.copy() for k, v in _pretrained(cfg, seed, steps)}


def build_model(config: TrainConfig, base: ModelConfig | None = None) -> MoileModel:
    cfg = config.model_config(base)
    backbone = pretrained_backbone(replace(cfg, rank=8, n_token_experts=6, n_task_experts=2, top_k=2),
                                   config.seed, config.warmup_steps)
    model = MoileModel.build(cfg, backbone, np.random.default_rng([config.seed, 11]))
    model.set_task_router(not config.disable_task_router)
    return model


# -- record ---------------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    variant: str
    stream: dict
    accuracy: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    gate_audit: dict = field(default_factory=dict)
    router_preference: list = field(default_factory=list)
    frozen_audit: list = field(default_factory=list)
    sv_grad_skips: int = 0
    status: str = "ok"
    wall_clock: float = field(default=0.0, compare=False)

    def matrix(self) -> AccuracyMatrix:
        return AccuracyMatrix(self.accuracy)

    def to_json(self) -> dict:
        out = asdict(self)
        # timing varies run to run; kept out of the canonical record
        out.pop("wall_clock")
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        path.with_suffix(".timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}))
        return path

    @classmethod
    def read(cls, path) -> "RunRecord":
        obj = json.loads(Path(path).read_text())
        return cls(**obj)

    def trajectory_rows(self):
        for i, row in enumerate(self.accuracy):
            for t, a in enumerate(row):
                yield i + 1, t + 1, a


def write_trajectory_csv(record: RunRecord, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task", "eval_task", "accuracy"])
        for row in record.trajectory_rows():
            w.writerow(row)
    return path


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
        h.update(b"|")
    return h.hexdigest()


def frozen_arrays(model: MoileModel) -> list[np.ndarray]:
    out = [model.backbone[k].data for k in sorted(model.backbone)]
    for layer in model.layers:
        for ad in layer.experts():
            if ad.partitioned:
                out.extend(ad.frozen())
    return out


# -- boundary -------------------------------------------------------------------

def _np(x) -> np.ndarray:
    return x.data if isinstance(x, nc.Tensor) else x


def task_boundary(model: MoileModel, t: int, config: TrainConfig) -> bool:
    """(Re)partition every expert before task ``t`` (1-based).

    No-op for the first task or when incremental training is off. Returns
    whether a partition happened.
    """
    if t < 2 or not config.incremental:
        return False
    for layer in model.layers:
        for experts in (layer.token_experts, layer.task_experts):
            for i, ad in enumerate(experts):
                S = factored_svd(_np(ad.B), _np(ad.A))[1]
                experts[i] = partition_adapter(ad, choose_p(S, ad.rank, config.p_policy))
    return True


# -- training -------------------------------------------------------------------

def _gate_counts(model: MoileModel, audit: dict) -> None:
    for trace in model.traces():
        if trace is None:
            continue
        tok = np.count_nonzero(trace.token_gates > 0, axis=1)
        for c, n in zip(*np.unique(tok, return_counts=True)):
            key = f"token:{int(c)}"
            audit[key] = audit.get(key, 0) + int(n)
        if trace.task_gates is not None:
            tsk = np.count_nonzero(trace.task_gates > 0, axis=1)
            for c, n in zip(*np.unique(tsk, return_counts=True)):
                key = f"task:{int(c)}"
                audit[key] = audit.get(key, 0) + int(n)
        audit["tokens"] = audit.get("tokens", 0) + len(tok)


def _batches(task: Task, steps: int, batch_size: int, rng: np.random.Generator):
    n = len(task.train)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        yield [task.train[i] for i in idx]


def evaluate_row(model: MoileModel, stream: TaskStream, upto: int, ctc_state) -> list[float]:
    state = ctc_state if ctc_state is not None and ctc_state.initialized else None
    if state is None:
        # nothing observed yet, so there is no task embedding; task experts
        # are still at their zero init and contribute nothing either way
        enabled = [layer.use_task_router for layer in model.layers]
        model.set_task_router(False)
        try:
            return [accuracy(model, stream.tasks[t].eval, None) for t in range(upto)]
        finally:
            for layer, on in zip(model.layers, enabled):
                layer.use_task_router = on
    return [accuracy(model, stream.tasks[t].eval, state) for t in range(upto)]


def router_preference(model: MoileModel, stream: TaskStream, ctc_state) -> list:
    """Mean gate weight per expert, per layer, on each task's eval set."""
    out = []
    state = ctc_state if ctc_state is not None and ctc_state.initialized else None
    if state is None:
        return out
    for task in stream.tasks:
        e = episode_task_embeddings(task.eval, state)
        model.target_logits(task.eval, e)
        layers = []
        for trace in model.traces():
            row = {"token": trace.token_gates.mean(axis=0).tolist()}
            if trace.task_gates is not None:
                row["task"] = trace.task_gates.mean(axis=0).tolist()
            layers.append(row)
        out.append({"task": task.spec.name, "layers": layers})
    return out


def train_continual(model: MoileModel, ctc_state: ClusterState, stream: TaskStream,
                    config: TrainConfig) -> RunRecord:
    started = time.perf_counter()
    record = RunRecord(
        config=asdict(config),
        variant=config.variant,
        stream={"setup": stream.setup, "order": stream.order, "seed": stream.seed,
                "tasks": stream.names, "digest": stream.digest()},
    )
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng([config.seed, 13])
    model.set_task_router(not config.disable_task_router)
    for t, task in enumerate(stream.tasks, start=1):
        if task_boundary(model, t, config):
            opt.reset()
        frozen_before = _digest(frozen_arrays(model))
        for step, batch in enumerate(_batches(task, config.steps_per_task, config.batch_size, rng)):
            emb = np.stack([ep.embedding for ep in batch])
            if not ctc_state.initialized:
                seeded = init_centers(emb, ctc_state.n_clusters, config.seed, ctc_state.alpha)
                ctc_state.centers = seeded.centers
            observe_batch(ctc_state, emb)
            e, _ = task_embeddings(ctc_state, emb)
            with nc.Tape() as tape:
                logits, targets = model.target_logits(batch, e)
                L = prediction_loss(logits, targets)
                ls_terms, lo_terms = [], []
                parts = [ad for layer in model.layers for ad in layer.experts()
                         if isinstance(ad, PartitionedAdapter)]
                if parts and config.lambda1_eff:
                    ls_terms = singular_value_losses(parts)
                    record.sv_grad_skips += sum(
                        int(ad.p > 0 and bool(ad.params()) and not ls.requires_grad)
                        for ad, ls in zip(parts, ls_terms)
                    )
                if parts and config.lambda2_eff:
                    lo_terms = [orthogonal_loss(ad) for ad in parts]
                total, bundle = total_loss(L, ls_terms, lo_terms, config.lambda1_eff, config.lambda2_eff)
            _gate_counts(model, record.gate_audit)
            record.losses.append([t, step, bundle.L, bundle.Ls, bundle.Lo, bundle.total])
            if not math.isfinite(bundle.total):
                record.status = f"nan at task {t} step {step}"
                record.wall_clock = time.perf_counter() - started
                raise NumericalAbort(record.status, record)
            opt.step(nc.backward(tape, total))
        frozen_after = _digest(frozen_arrays(model))
        record.frozen_audit.append({"task": t, "before": frozen_before, "after": frozen_after})
        row = evaluate_row(model, stream, t, ctc_state)
        record.accuracy.append(row)
        log.info("%s task %d/%d (%s): %s", config.variant, t, len(stream.tasks), task.spec.name,
                 " ".join(f"{a:.3f}" for a in row))
    record.router_preference = router_preference(model, stream, ctc_state)
    record.wall_clock = time.perf_counter() - started
    return record


def run(stream: TaskStream, config: TrainConfig, base: ModelConfig | None = None):
    """Build a fresh model and clustering state and train over ``stream``.

    Returns ``(record, model, ctc_state)``.
    """
    model = build_model(config, base)
    state = ClusterState(config.M, config.alpha)
    record = train_continual(model, state, stream, config)
    return record, model, state


def train_single_task(task: Task, config: TrainConfig, base: ModelConfig | None = None) -> float:
    stream = TaskStream(task.spec.setup, 1, task.spec.seed, [task])
    record, _, _ = run(stream, config, base)
    return record.accuracy[0][0]


def write_router_trace(model: MoileModel, stream: TaskStream, ctc_state, path) -> Path:
    """Per-token routing decisions on every eval episode, one CSV row per
    (task, episode, layer, position)."""
    path = Path(path)
    state = ctc_state if ctc_state is not None and ctc_state.initialized else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "task_name", "episode", "layer", "position", "token_experts",
                    "token_gates", "task_expert", "task_gate"])
        for t, task in enumerate(stream.tasks):
            eps = task.eval
            e = episode_task_embeddings(eps, state)
            model.target_logits(eps, e)
            S = len(eps[0].context) + len(eps[0].target) - 1
            for li, trace in enumerate(model.traces()):
                for row in range(trace.token_selected.shape[0]):
                    ep_i, pos = divmod(row, S)
                    sel = trace.token_selected[row]
                    gates = trace.token_gates[row][sel]
                    if trace.task_selected is not None:
                        te = int(trace.task_selected[row])
                        tg = f"{trace.task_gates[row][te]:.6g}"
                    else:
                        te, tg = "", ""
                    w.writerow([t + 1, task.spec.name, ep_i, li, pos,
                                " ".join(str(int(i)) for i in sel),
                                " ".join(f"{g:.6g}" for g in gates), te, tg])
    return path


def save_checkpoint(path, model: MoileModel, ctc_state: ClusterState | None, config: TrainConfig) -> Path:
    from .model import SCHEMA

    path = Path(path)
    doc = {
        "schema": SCHEMA,
        "train_config": asdict(config),
        "model": model.to_json(),
        "ctc": None if ctc_state is None else ctc_state.to_json(),
    }
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path):
    from .model import SCHEMA

    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {doc.get('schema')!r}")
    model = MoileModel.from_json(doc["model"])
    ctc = None if doc["ctc"] is None else ClusterState.from_json(doc["ctc"])
    return model, ctc, TrainConfig(**doc["train_config"])
