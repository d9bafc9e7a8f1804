"""Synthetic hierarchical embodied continual-learning task streams.

Five setups: HB/HE (high-level instructions over behaviors/environments),
LB/LE (low-level actions over the same), and HH, which chains the four
setups as four tasks.

Every episode is a pure function of ``(seed, setup, category, split,
index)``. A task maps its inputs to targets through a lookup table that is
shared by all categories of a setup except for a category-specific swap
of two entries, so neighbouring tasks are similar but not identical.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Episode
from .numcore import ContractError

BEHAVIORS = ("EXAMINE", "PICK&PLACE", "HEAT", "COOL", "CLEAN", "PICK2&PLACE", "MOVABLE")
ENVIRONMENTS = ("KITCHENS", "LIVINGROOMS", "BEDROOMS", "BATHROOMS")
SETUPS = ("HB", "HE", "LB", "LE", "HH")
SETUP_NAMES = {
    "HB": "High-level Instruction Behavior",
    "HE": "High-level Instruction Environment",
    "LB": "Low-level Action Behavior",
    "LE": "Low-level Action Environment",
}

_BEHAVIOR_ORDERS = {
    1: ("EXAMINE", "HEAT", "PICK2&PLACE", "COOL", "PICK&PLACE", "CLEAN", "MOVABLE"),
    2: ("PICK2&PLACE", "CLEAN", "MOVABLE", "PICK&PLACE", "HEAT", "EXAMINE", "COOL"),
    3: ("MOVABLE", "COOL", "PICK&PLACE", "HEAT", "CLEAN", "EXAMINE", "PICK2&PLACE"),
}
_ENVIRONMENT_ORDERS = {
    1: ("BEDROOMS", "BATHROOMS", "LIVINGROOMS", "KITCHENS"),
    2: ("KITCHENS", "BEDROOMS", "LIVINGROOMS", "BATHROOMS"),
    3: ("BATHROOMS", "LIVINGROOMS", "KITCHENS", "BEDROOMS"),
}
ORDERS = {
    "HB": _BEHAVIOR_ORDERS,
    "LB": _BEHAVIOR_ORDERS,
    "HE": _ENVIRONMENT_ORDERS,
    "LE": _ENVIRONMENT_ORDERS,
    "HH": {
        1: ("LB", "HB", "LE", "HE"),
        2: ("HB", "LB", "HE", "LE"),
        3: ("LB", "LE", "HB", "HE"),
    },
}

# vocabulary ---------------------------------------------------------------
FEAT, SEP = 0, 1
OBJECTS = ("Apple", "Book", "Mug", "Knife", "Lamp", "Plate", "Towel", "Pan")
INSTRUCTIONS = (
    "GotoLocation", "PickupObject", "PutObject", "HeatObject",
    "CoolObject", "CleanObject", "SliceObject", "ToggleObject",
)
ACTIONS = (
    "MoveAhead", "TurnLeft", "TurnRight", "LookUp",
    "LookDown", "OpenObject", "CloseObject", "ToggleOn",
)
OBJ0 = 2
INS0 = OBJ0 + len(OBJECTS)
ACT0 = INS0 + len(INSTRUCTIONS)
VOCAB = ["<feat>", "<sep>", *OBJECTS, *(f"hl:{w}" for w in INSTRUCTIONS), *(f"ll:{w}" for w in ACTIONS)]
VOCAB += [f"<unused{i}>" for i in range(32 - len(VOCAB))]

N_SCENES = 16
FEAT_DIM = 16
TEXT_DIM = 16
VISUAL_DIM = 16
CONTEXT_LEN = 6
TARGET_LEN = 4
FEATURE_NOISE = 0.2

# each setup reads its own keys and scene classes, so the four HH phases are
# jointly learnable and forgetting comes from interference alone
KEY_DOMAINS = {
    "HB": tuple(range(OBJ0, OBJ0 + 4)),
    "HE": tuple(range(OBJ0 + 4, OBJ0 + 8)),
    "LB": tuple(range(INS0, INS0 + 4)),
    "LE": tuple(range(INS0 + 4, INS0 + 8)),
}
SCENE_DOMAINS = {"HB": (0, 1, 2, 3), "HE": (4, 5, 6, 7), "LB": (8, 9, 10, 11), "LE": (12, 13, 14, 15)}

_SPLITS = {"train": 0, "eval": 1, "warmup": 2}


def _code(name: str) -> int:
    return zlib.crc32(name.encode())


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([p if isinstance(p, int) else _code(str(p)) for p in parts])


def level_of(setup: str) -> str:
    return "high" if setup.startswith("H") and setup != "HH" else "low"


def family_of(setup: str) -> str:
    return "behavior" if setup.endswith("B") else "environment"


def categories_of(setup: str) -> tuple[str, ...]:
    return BEHAVIORS if family_of(setup) == "behavior" else ENVIRONMENTS


@dataclass(frozen=True)
class TaskSpec:
    setup: str
    category: str | None
    level: str
    seed: int

    def __post_init__(self):
        if self.setup not in SETUP_NAMES:
            raise ContractError(f"task setup must be one of {sorted(SETUP_NAMES)}, got {self.setup!r}")
        if self.category is not None and self.category not in categories_of(self.setup):
            raise ContractError(f"category {self.category!r} does not belong to setup {self.setup}")

    @property
    def name(self) -> str:
        return self.category if self.category is not None else self.setup

    def categories(self) -> tuple[str, ...]:
        return categories_of(self.setup) if self.category is None else (self.category,)


@dataclass
class Task:
    spec: TaskSpec
    train: list[Episode]
    eval: list[Episode]


@dataclass
class TaskStream:
    setup: str
    order: int
    seed: int
    tasks: list[Task] = field(default_factory=list)

    @property
    def specs(self) -> list[TaskSpec]:
        return [t.spec for t in self.tasks]

    @property
    def names(self) -> list[str]:
        return [t.spec.name for t in self.tasks]

    def digest(self) -> str:
        """Content hash identifying the exact episodes of this stream."""
        h = zlib.crc32(b"")
        for line in self.jsonl_lines():
            h = zlib.crc32(line.encode(), h)
        return f"{h:08x}"

    def jsonl_lines(self):
        yield json.dumps({"kind": "header", "setup": self.setup, "order": self.order, "seed": self.seed,
                          "tasks": [[s.setup, s.category] for s in self.specs]})
        for t_id, task in enumerate(self.tasks):
            for split, eps in (("train", task.train), ("eval", task.eval)):
                for ep in eps:
                    row = {"kind": "episode", "split": split, "category": task.spec.category, **ep.to_json()}
                    row["task_id"] = t_id
                    yield json.dumps(row)

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for line in self.jsonl_lines():
                fh.write(line + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path) -> "TaskStream":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("kind") != "header":
                raise ContractError(f"{path}: missing stream header line")
            stream = cls(header["setup"], header["order"], header["seed"])
            for setup, category in header["tasks"]:
                spec = TaskSpec(setup, category, level_of(setup), header["seed"])
                stream.tasks.append(Task(spec, [], []))
            for line in fh:
                row = json.loads(line)
                ep = Episode.from_json(row)
                task = stream.tasks[ep.task_id]
                (task.train if row["split"] == "train" else task.eval).append(ep)
        return stream


# frozen encoder -------------------------------------------------------------

class FrozenEncoder:
    """Fixed random affine maps with tanh, one for the scene features and
    one for the bag of context tokens; outputs are concatenated."""

    def __init__(self, seed: int = 0):
        rng = _rng(seed, "encoder")
        self.Wv = rng.standard_normal((VISUAL_DIM, FEAT_DIM)) / np.sqrt(FEAT_DIM)
        self.bv = rng.standard_normal(VISUAL_DIM) * 0.1
        self.Wt = rng.standard_normal((TEXT_DIM, len(VOCAB))) * 1.5
        self.bt = rng.standard_normal(TEXT_DIM) * 0.1

    @property
    def dim(self) -> int:
        return VISUAL_DIM + TEXT_DIM

    def __call__(self, features, context) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        bag = np.zeros(len(VOCAB))
        ctx = np.asarray(context, dtype=np.int64)
        if ctx.size:
            np.add.at(bag, ctx, 1.0)
            bag /= ctx.size
        return np.concatenate([np.tanh(self.Wv @ f + self.bv), np.tanh(self.Wt @ bag + self.bt)])


def frozen_encode(features, context=(), seed: int = 0) -> np.ndarray:
    return FrozenEncoder(seed)(features, context)


# task tables ------------------------------------------------------------------

@dataclass(frozen=True)
class TaskTable:
    key_map: dict  # context token -> output token
    scene_map: dict  # scene class -> output token


def _world(seed: int) -> dict:
    rng = _rng(seed, "world")
    protos = rng.standard_normal((N_SCENES, FEAT_DIM))
    protos *= 3.0 / np.linalg.norm(protos, axis=1, keepdims=True)
    styles = {}
    for fam in ("behavior", "environment"):
        s = rng.standard_normal(FEAT_DIM)
        styles[fam] = 1.5 * s / np.linalg.norm(s)
    return {"protos": protos, "styles": styles}


def _outputs(level: str) -> np.ndarray:
    return np.arange(INS0, INS0 + 8) if level == "high" else np.arange(ACT0, ACT0 + 8)


def setup_table(setup: str, seed: int) -> TaskTable:
    """The component shared by every category of ``setup``: a slice of one
    random permutation per level."""
    level = level_of(setup)
    rng = _rng(seed, "base", level)
    outs = _outputs(level)
    pair = ("HB", "HE") if level == "high" else ("LB", "LE")
    keys = KEY_DOMAINS[pair[0]] + KEY_DOMAINS[pair[1]]
    scenes = SCENE_DOMAINS[pair[0]] + SCENE_DOMAINS[pair[1]]
    key_map = dict(zip(keys, (int(v) for v in rng.permutation(outs))))
    scene_map = dict(zip(scenes, (int(v) for v in rng.permutation(outs))))
    return TaskTable(
        {k: key_map[k] for k in KEY_DOMAINS[setup]},
        {s: scene_map[s] for s in SCENE_DOMAINS[setup]},
    )


def task_table(setup: str, category: str | None, seed: int) -> TaskTable:
    """Setup table plus one key swap and one scene swap drawn per category.
    ``category=None`` gives the shared setup table (used by HH phases)."""
    base = setup_table(setup, seed)
    if category is None:
        return base
    key_map, scene_map = dict(base.key_map), dict(base.scene_map)
    noise = _rng(seed, "swap", setup, category)
    for table in (key_map, scene_map):
        ks = sorted(table)
        i, j = noise.choice(len(ks), size=2, replace=False)
        table[ks[i]], table[ks[j]] = table[ks[j]], table[ks[i]]
    return TaskTable(key_map, scene_map)


def _inputs(setup: str, category: str, seed: int, rng: np.random.Generator):
    world = _world(seed)
    level = level_of(setup)
    scene = int(rng.choice(SCENE_DOMAINS[setup]))
    cat_off = _rng(seed, "catstyle", category).standard_normal(FEAT_DIM) * 0.3
    feats = world["protos"][scene] + world["styles"][family_of(setup)] + cat_off
    feats = feats + rng.standard_normal(FEAT_DIM) * FEATURE_NOISE
    domain = np.array(KEY_DOMAINS[setup])
    if level == "high":
        keys = [int(t) for t in rng.choice(domain, size=4)]
    else:
        goal_objs = KEY_DOMAINS["HB" if family_of(setup) == "behavior" else "HE"]
        keys = [int(rng.choice(goal_objs)), *(int(t) for t in rng.choice(domain, size=3))]
    return scene, feats, keys


def target_keys(setup: str, keys) -> list[int]:
    """Context tokens that determine the first three target tokens."""
    return list(keys[:3]) if level_of(setup) == "high" else list(keys[1:4])


def make_episode(setup: str, category: str, seed: int, split: str, index: int,
                 encoder: FrozenEncoder | None = None, task_id: int = 0,
                 table_category: str | None = "") -> Episode:
    """Pure function of its arguments. ``table_category`` overrides which
    table labels the episode (``None`` = shared setup table)."""
    rng = _rng(seed, setup, category, _SPLITS[split], index)
    scene, feats, keys = _inputs(setup, category, seed, rng)
    table = task_table(setup, category if table_category == "" else table_category, seed)
    target = tuple(table.key_map[k] for k in target_keys(setup, keys)) + (table.scene_map[scene],)
    context = (FEAT, *keys, SEP)
    encoder = encoder or FrozenEncoder(seed)
    return Episode(context, feats, target, task_id, setup, encoder(feats, context))


def _task_episodes(spec: TaskSpec, split: str, n: int, encoder, task_id: int) -> list[Episode]:
    cats = spec.categories()
    return [
        make_episode(spec.setup, cats[i % len(cats)], spec.seed, split, i // len(cats), encoder, task_id,
                     table_category=spec.category)
        for i in range(n)
    ]


def task_order(setup: str, order: int) -> tuple[str, ...]:
    if setup not in ORDERS:
        raise ContractError(f"unknown setup {setup!r}")
    if order not in ORDERS[setup]:
        raise ContractError(f"order must be 1, 2 or 3 (got {order!r})")
    return ORDERS[setup][order]


def generate_stream(setup: str, order: int, seed: int = 0, episodes_per_task: int = 512,
                    eval_per_task: int = 128) -> TaskStream:
    names = task_order(setup, order)
    stream = TaskStream(setup, order, seed)
    encoder = FrozenEncoder(seed)
    for t_id, name in enumerate(names):
        if setup == "HH":
            spec = TaskSpec(name, None, level_of(name), seed)
        else:
            spec = TaskSpec(setup, name, level_of(setup), seed)
        stream.tasks.append(
            Task(
                spec,
                _task_episodes(spec, "train", episodes_per_task, encoder, t_id),
                _task_episodes(spec, "eval", eval_per_task, encoder, t_id),
            )
        )
    return stream


def warmup_episodes(seed: int, n: int) -> list[Episode]:
    """Generic pretraining data: both context layouts, every family style,
    targets copy the key tokens and name the scene with an object token."""
    out = []
    for i in range(n):
        rng = _rng(seed, "warmup", i)
        setup = ("HB", "HE", "LB", "LE")[i % 4]
        cats = categories_of(setup)
        category = cats[int(rng.integers(len(cats)))]
        scene, feats, keys = _inputs(setup, category, seed, rng)
        target = (*target_keys(setup, keys), OBJ0 + scene)
        out.append(Episode((FEAT, *keys, SEP), feats, target, 0, setup))
    return out


def shuffled_control(task: Task, seed: int = 0) -> Task:
    """The same inputs with targets permuted across episodes: no signal."""
    rng = _rng(seed, "shuffle")
    out = []
    for eps in (task.train, task.eval):
        perm = rng.permutation(len(eps))
        out.append([
            Episode(ep.context, ep.features, eps[j].target, ep.task_id, ep.setup, ep.embedding)
            for ep, j in zip(eps, perm)
        ])
    return Task(task.spec, out[0], out[1])


@dataclass
class LearnabilityReport:
    names: list[str]
    accuracies: list[float]
    threshold: float

    @property
    def passed(self) -> list[bool]:
        return [a >= self.threshold for a in self.accuracies]

    @property
    def ok(self) -> bool:
        return all(self.passed)

    def failures(self) -> list[str]:
        return [n for n, p in zip(self.names, self.passed) if not p]


def learnability_check(stream: TaskStream, config=None, threshold: float = 0.9, tasks=None) -> LearnabilityReport:
    """Train a fresh model on each task alone and record eval accuracy."""
    from .trainer import TrainConfig, train_single_task

    config = config or TrainConfig()
    tasks = stream.tasks if tasks is None else tasks
    accs = [train_single_task(task, config) for task in tasks]
    return LearnabilityReport([t.spec.name for t in tasks], accs, threshold)
