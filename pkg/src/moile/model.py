"""Desk-scale causal transformer hosting one mixture layer per block.

The backbone (embeddings, attention, feed-forward down-projection, head)
is pretrained briefly on generic sequences and then frozen; the
feed-forward up-projection of each block becomes the frozen base ``W0`` of
a :class:`~moile.experts.MoileLayer`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .experts import ExpertAdapter, MoileLayer, Router
from .incremental import PartitionedAdapter
from .numcore import ContractError, Tensor

SCHEMA = "moile.checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 32
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    max_seq: int = 24
    d_ff: int = 128
    feat_dim: int = 16
    task_dim: int = 32
    rank: int = 8
    n_token_experts: int = 6
    n_task_experts: int = 2
    top_k: int = 2


@dataclass
class Episode:
    context: tuple[int, ...]
    features: np.ndarray
    target: tuple[int, ...]
    task_id: int = 0
    setup: str = ""
    embedding: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        out = {
            "context": list(self.context),
            "features": self.features.tolist(),
            "target": list(self.target),
            "task_id": self.task_id,
            "setup": self.setup,
        }
        if self.embedding is not None:
            out["embedding"] = self.embedding.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        emb = obj.get("embedding")
        return cls(
            tuple(obj["context"]),
            np.asarray(obj["features"], dtype=np.float64),
            tuple(obj["target"]),
            int(obj.get("task_id", 0)),
            obj.get("setup", ""),
            None if emb is None else np.asarray(emb, dtype=np.float64),
        )


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab

    def w(*shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    bb = {
        "tok_emb": rng.standard_normal((V, D)) * 0.5,
        "pos_emb": rng.standard_normal((cfg.max_seq, D)) * 0.5,
        "feat_proj": w(cfg.feat_dim, D, fan_in=cfg.feat_dim),
        "head": w(V, D, fan_in=D),
    }
    for b in range(cfg.n_blocks):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            bb[f"b{b}.{name}"] = w(D, D, fan_in=D)
        bb[f"b{b}.W_up"] = w(F, D, fan_in=D)
        bb[f"b{b}.W_down"] = w(D, F, fan_in=F)
    return bb


def _causal_mask(S: int) -> np.ndarray:
    return np.triu(np.full((S, S), -1e9), k=1)


def run_backbone(bb: dict, cfg: ModelConfig, tokens: np.ndarray, feats: np.ndarray, ffn) -> Tensor:
    """Shared transformer body. ``bb`` maps names to Tensors; ``ffn(b, a)``
    computes block ``b``'s up-projection of the ``(n, d_model)`` rows ``a``."""
    B, S = tokens.shape
    D, H = cfg.d_model, cfg.n_heads
    if S > cfg.max_seq:
        raise ContractError(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ContractError("token id out of vocabulary")
    dh = D // H
    x = nc.take(bb["tok_emb"], tokens) + nc.take(bb["pos_emb"], np.arange(S))
    # scene features enter through the first position
    prefix = nc.reshape(nc.constant(feats) @ bb["feat_proj"], (B, 1, D))
    x = x + nc.concat([prefix, nc.constant(np.zeros((B, S - 1, D)))], axis=1)
    mask = _causal_mask(S)
    scale = 1.0 / np.sqrt(dh)
    for b in range(cfg.n_blocks):
        a = nc.layer_norm(x)

        def heads(t):
            return nc.swapaxes(nc.reshape(t, (B, S, H, dh)), 1, 2)

        q = heads(a @ bb[f"b{b}.Wq"])
        k = heads(a @ bb[f"b{b}.Wk"])
        v = heads(a @ bb[f"b{b}.Wv"])
        att = nc.softmax(nc.matmul(q, nc.swapaxes(k, -1, -2)) * scale + mask, axis=-1)
        o = nc.reshape(nc.swapaxes(nc.matmul(att, v), 1, 2), (B, S, D))
        x = x + o @ bb[f"b{b}.Wo"]
        a2 = nc.reshape(nc.layer_norm(x), (B * S, D))
        up = nc.relu(ffn(b, a2))
        x = x + nc.reshape(up @ nc.transpose(bb[f"b{b}.W_down"]), (B, S, D))
    return nc.layer_norm(x) @ nc.transpose(bb["head"])


def sequences(episodes) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Teacher-forcing layout: context followed by all but the last target
    token. Returns tokens, features, targets and the context length."""
    ctx = {len(ep.context) for ep in episodes}
    tl = {len(ep.target) for ep in episodes}
    if len(ctx) != 1 or len(tl) != 1:
        raise ContractError("episodes in one batch must share context and target lengths")
    tokens = np.array([ep.context + ep.target[:-1] for ep in episodes], dtype=np.int64)
    feats = np.stack([ep.features for ep in episodes])
    targets = np.array([ep.target for ep in episodes], dtype=np.int64)
    return tokens, feats, targets, ctx.pop()


class MoileModel:
    def __init__(self, cfg: ModelConfig, backbone: dict[str, np.ndarray], layers: list[MoileLayer]):
        self.cfg = cfg
        self.backbone = {k: nc.constant(v, name=k) for k, v in backbone.items()}
        self.layers = layers
        for b, layer in enumerate(layers):
            layer.W0 = self.backbone[f"b{b}.W_up"]

    @classmethod
    def build(cls, cfg: ModelConfig, backbone: dict[str, np.ndarray], rng: np.random.Generator) -> "MoileModel":
        layers = [
            MoileLayer.init(
                backbone[f"b{b}.W_up"],
                cfg.n_token_experts,
                cfg.n_task_experts,
                cfg.top_k,
                cfg.rank,
                cfg.task_dim,
                rng,
            )
            for b in range(cfg.n_blocks)
        ]
        return cls(cfg, backbone, layers)

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for b, layer in enumerate(self.layers):
            for kind, experts in (("token", layer.token_experts), ("task", layer.task_experts)):
                for i, ad in enumerate(experts):
                    names = ("Bres", "Ares") if ad.partitioned else ("B", "A")
                    for n in names:
                        t = getattr(ad, n)
                        if t.requires_grad:
                            out[f"l{b}.{kind}{i}.{n}"] = t
            for kind, router in (("token_router", layer.token_router), ("task_router", layer.task_router)):
                if router is not None and router.weight.requires_grad:
                    out[f"l{b}.{kind}"] = router.weight
        return out

    def set_task_router(self, enabled: bool) -> None:
        for layer in self.layers:
            layer.use_task_router = enabled

    def forward_tokens(self, tokens: np.ndarray, feats: np.ndarray, e: np.ndarray | None) -> Tensor:
        """Logits ``(B, S, vocab)``; ``e`` holds one task embedding per row."""
        B, S = tokens.shape
        e_tok = None if e is None else np.repeat(np.asarray(e, dtype=np.float64), S, axis=0)

        def ffn(b, a):
            return self.layers[b].forward_rows(a, e_tok)

        return run_backbone(self.backbone, self.cfg, tokens, feats, ffn)

    def target_logits(self, episodes, e: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
        tokens, feats, targets, C = sequences(episodes)
        logits = self.forward_tokens(tokens, feats, e)
        L = targets.shape[1]
        picked = nc.take(logits, np.arange(C - 1, C - 1 + L), axis=1)
        return picked, targets

    def traces(self):
        return [layer.last_trace for layer in self.layers]

    # -- checkpoint ---------------------------------------------------------

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            layers.append(
                {
                    "K": layer.K,
                    "use_task_router": layer.use_task_router,
                    "token_experts": [ad.state() for ad in layer.token_experts],
                    "task_experts": [ad.state() for ad in layer.task_experts],
                    "token_router": None if layer.token_router is None else nc.matrix_to_json(layer.token_router.weight),
                    "task_router": None if layer.task_router is None else nc.matrix_to_json(layer.task_router.weight),
                }
            )
        return {
            "config": asdict(self.cfg),
            "backbone": {k: nc.matrix_to_json(v) for k, v in self.backbone.items()},
            "layers": layers,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MoileModel":
        cfg = ModelConfig(**obj["config"])
        bb = {k: nc.matrix_from_json(v) for k, v in obj["backbone"].items()}
        layers = []
        for b, lo in enumerate(obj["layers"]):
            def adapter(st):
                m = nc.matrix_from_json
                if st["kind"] == "lora":
                    return ExpertAdapter(nc.parameter(m(st["B"])), nc.parameter(m(st["A"])), st["level"])
                return PartitionedAdapter(m(st["Bp"]), m(st["Ap"]), m(st["Bres"]), m(st["Ares"]), st["sigma_p"], st["level"])

            def router(st, level):
                return None if st is None else Router(nc.parameter(nc.matrix_from_json(st)), level)

            layers.append(
                MoileLayer(
                    nc.constant(bb[f"b{b}.W_up"]),
                    [adapter(s) for s in lo["token_experts"]],
                    [adapter(s) for s in lo["task_experts"]],
                    router(lo["token_router"], "token"),
                    router(lo["task_router"], "task"),
                    lo["K"],
                    lo["use_task_router"],
                )
            )
        return cls(cfg, bb, layers)


def forward(model: MoileModel, episode: Episode, e=None) -> Tensor:
    """Teacher-forced logits ``(target_len, vocab)`` for one episode."""
    e = None if e is None else np.asarray(e, dtype=np.float64)[None, :]
    logits, _ = model.target_logits([episode], e)
    return nc.reshape(logits, logits.shape[1:])


def prediction_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy over all target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {targets.shape}")
    return nc.cross_entropy(nc.reshape(logits, (-1, V)), targets.reshape(-1))


def greedy_decode(model: MoileModel, episodes, e: np.ndarray | None) -> np.ndarray:
    """Greedy autoregressive decoding of each episode's target length."""
    ctx = np.array([ep.context for ep in episodes], dtype=np.int64)
    feats = np.stack([ep.features for ep in episodes])
    L = len(episodes[0].target)
    seq = ctx
    for _ in range(L):
        logits = model.forward_tokens(seq, feats, e).data
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq[:, ctx.shape[1]:]


def episode_task_embeddings(episodes, ctc_state) -> np.ndarray | None:
    if ctc_state is None:
        return None
    from .ctc import task_embeddings

    emb = np.stack([ep.embedding for ep in episodes])
    return task_embeddings(ctc_state, emb)[0]


def accuracy(model: MoileModel, episodes, ctc_state=None, batch: int = 256) -> float:
    """Exact-match rate of greedy decodes against the target sequences.

    ``ctc_state`` is read, never updated.
    """
    episodes = list(episodes)
    if not episodes:
        raise ContractError("accuracy over an empty episode list")
    correct = 0
    for i in range(0, len(episodes), batch):
        chunk = episodes[i:i + batch]
        e = episode_task_embeddings(chunk, ctc_state)
        pred = greedy_decode(model, chunk, e)
        gold = np.array([ep.target for ep in chunk])
        correct += int((pred == gold).all(axis=1).sum())
    return correct / len(episodes)
