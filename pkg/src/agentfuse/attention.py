"""Agent attention over three token streams and its cross-stream fusion.

Shapes use ``N_t`` tokens of width ``d`` and ``N_a`` agents.  All functional
ops below accept arbitrary leading (batch / head) dimensions; the softmax
axes are always the last one ("channel" axis of the formulas, which is the
axis contracted by the following product) and the second to last one.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import (LinearLayer, ShapeError, Tensor, as_tensor, concat, maximum, minimum,
                       read_arrays, save_arrays, sigmoid, silu, softmax, stack_mean, swap_last,
                       transpose)
from .objectives import total_loss
from .streams import StreamEncoder, StreamId, StreamShapes

DEFAULT_ALPHA = 0.125
DEFAULT_THRESHOLD = 0.91
FUSION_MODES = ("alsaf", "addition", "concatenation", "multiplication")
BASELINE_MODES = FUSION_MODES[1:]


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int = 16
    dim: int = 64
    n_agents: int = 4
    heads: int = 1
    n_classes: int = 80
    alpha: float = DEFAULT_ALPHA
    ffn_mult: int = 4
    head_hidden: int | None = None
    fusion: str = "alsaf"
    caaf: bool = True
    catf: bool = True
    lsas: bool = True
    box_weight: float = 5.0
    threshold: float = DEFAULT_THRESHOLD

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.n_agents > self.n_tokens:
            raise ValueError(f"n_agents={self.n_agents} exceeds n_tokens={self.n_tokens}")
        if self.n_agents < 1 or self.heads < 1:
            raise ValueError("need at least one agent and one head")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")

    @property
    def streams(self) -> tuple[StreamId, ...]:
        return (StreamId.VT, StreamId.RT, StreamId.LS) if self.lsas else (StreamId.VT, StreamId.RT)


# -- functional core ------------------------------------------------------------------
def agent_masks(q: Tensor, k: Tensor, agents: Tensor, alpha: float) -> tuple[Tensor, Tensor]:
    """Agent-query mask ``(N_a, N_t)`` and agent-key mask ``(N_t, N_a)``.

    Each row of either mask is a distribution over the contracted axis.
    """
    m_qa = softmax((agents * alpha) @ swap_last(q), axis=-1)
    m_ka = softmax((k * alpha) @ swap_last(agents), axis=-1)
    return m_qa, m_ka


def agent_key_mask(k: Tensor, agents: Tensor, alpha: float) -> Tensor:
    return softmax((k * alpha) @ swap_last(agents), axis=-1)


def agent_readout(m_ka: Tensor, m_qa: Tensor, v: Tensor) -> Tensor:
    """Gather values into agents, then broadcast agents back to tokens."""
    return m_ka @ (m_qa @ v)


def stream_agent_attention(q: Tensor, k: Tensor, v: Tensor, agents: Tensor, alpha: float,
                           ffn=None) -> tuple[Tensor, Tensor, Tensor]:
    """Single-stream agent attention; returns ``(t_star, M_QA, M_KA)``."""
    m_qa, m_ka = agent_masks(q, k, agents, alpha)
    out = agent_readout(m_ka, m_qa, v)
    return (out if ffn is None else ffn(out)), m_qa, m_ka


def suppress(base: Tensor, others: Sequence[Tensor]) -> Tensor:
    """Three-term mean: ``base``, and ``base`` reweighted by the other streams'
    summed values softmaxed along the last axis and along the second to last axis."""
    s = others[0]
    for o in others[1:]:
        s = s + o
    return (base + softmax(s, axis=-1) * base + softmax(s, axis=-2) * base) * (1.0 / 3.0)


def _check_same(tensors: Sequence[Tensor], what: str) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"{what}: streams disagree on shape {sorted(shapes)}")


def fuse_agent_attention(m_vt: Tensor, m_rt: Tensor, m_ls: Tensor | None = None) -> Tensor:
    """Visual agent-query mask reweighted by the reference (and location) masks."""
    others = [as_tensor(m_rt)] + ([] if m_ls is None else [as_tensor(m_ls)])
    _check_same([as_tensor(m_vt)] + others, "fuse_agent_attention")
    return suppress(as_tensor(m_vt), others)


def fuse_agent_tokens(a_vt: Tensor, a_rt: Tensor, a_ls: Tensor | None = None) -> Tensor:
    """Visual agent tokens reweighted by the reference (and location) agents."""
    others = [as_tensor(a_rt)] + ([] if a_ls is None else [as_tensor(a_ls)])
    _check_same([as_tensor(a_vt)] + others, "fuse_agent_tokens")
    return suppress(as_tensor(a_vt), others)


def visual_aggregate(fused_agents: Tensor, k: Tensor, v: Tensor, fused_qa: Tensor, alpha: float,
                     ffn=None) -> tuple[Tensor, Tensor]:
    """Visual tokens from the fused masks/agents; returns ``(t_star, fused M_KA)``."""
    m_ka = agent_key_mask(k, fused_agents, alpha)
    out = agent_readout(m_ka, fused_qa, v)
    return (out if ffn is None else ffn(out)), m_ka


def aggregate_streams(tokens: Sequence[Tensor]) -> Tensor:
    _check_same(tokens, "aggregate_streams")
    return stack_mean([as_tensor(t) for t in tokens])


def order_box(box: Tensor) -> Tensor:
    """Swap inverted corners so that x1 <= x2 and y1 <= y2."""
    x1, y1, x2, y2 = box[..., 0:1], box[..., 1:2], box[..., 2:3], box[..., 3:4]
    return concat([minimum(x1, x2), minimum(y1, y2), maximum(x1, x2), maximum(y1, y2)], axis=-1)


def hard_labels(scores: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.int64)


# -- parameter containers ----------------------------------------------------------------
class FeedForward:
    """Two affine layers with a SiLU in between; no residual, no normalization."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = LinearLayer(dim, hidden, rng)
        self.fc2 = LinearLayer(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(x)))

    def layers(self) -> dict[str, LinearLayer]:
        return {"fc1": self.fc1, "fc2": self.fc2}


class AgentAttentionParams:
    """Per-stream projections W_Q/W_K/W_V/W_A, agent resampler P_A and FFN."""

    def __init__(self, n_tokens: int, dim: int, n_agents: int, rng: np.random.Generator,
                 ffn_mult: int = 4, alpha: float = DEFAULT_ALPHA):
        if n_agents > n_tokens:
            raise ValueError(f"n_agents={n_agents} exceeds n_tokens={n_tokens}")
        self.alpha = alpha
        self.wq = LinearLayer(dim, dim, rng)
        self.wk = LinearLayer(dim, dim, rng)
        self.wv = LinearLayer(dim, dim, rng)
        self.wa = LinearLayer(dim, dim, rng)
        self.pa = LinearLayer(n_tokens, n_agents, rng, axis="tokens")
        self.ffn = FeedForward(dim, ffn_mult * dim, rng)

    def layers(self) -> dict[str, LinearLayer]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wa": self.wa, "pa": self.pa}
        out.update({f"ffn.{k}": v for k, v in self.ffn.layers().items()})
        return out


def project_qkva(t: Tensor, params: AgentAttentionParams):
    """``(Q, K, V, A, A_star)`` with ``A_star`` the agents resampled along the token axis."""
    t = as_tensor(t)
    a = params.wa(t)
    return params.wq(t), params.wk(t), params.wv(t), a, params.pa(a)


class HeadParams:
    """Mean-pool tokens, then an MLP to class logits and an MLP to a box."""

    def __init__(self, dim: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.cls1 = LinearLayer(dim, hidden, rng)
        self.cls2 = LinearLayer(hidden, n_classes, rng)
        self.reg1 = LinearLayer(dim, hidden, rng)
        self.reg2 = LinearLayer(hidden, 4, rng)

    def layers(self) -> dict[str, LinearLayer]:
        return {"cls1": self.cls1, "cls2": self.cls2, "reg1": self.reg1, "reg2": self.reg2}


def predict(t_agg: Tensor, heads: HeadParams) -> tuple[Tensor, Tensor]:
    """Action scores in [0, 1] and a corner-ordered box in [0, 1]."""
    t_agg = as_tensor(t_agg)
    lead = t_agg.shape[:-2]
    pooled = t_agg.mean(axis=-2, keepdims=True)
    scores = sigmoid(heads.cls2(silu(heads.cls1(pooled))))
    box = order_box(sigmoid(heads.reg2(silu(heads.reg1(pooled)))))
    return scores.reshape(*lead, scores.shape[-1]), box.reshape(*lead, 4)


def baseline_fuse(mode: str, streams: Sequence[Tensor], concat_proj: LinearLayer | None = None) -> Tensor:
    """Late fusion baselines: elementwise sum, elementwise product, or channel concat + linear."""
    streams = [as_tensor(s) for s in streams]
    _check_same(streams, "baseline_fuse")
    if mode == "addition":
        out = streams[0]
        for s in streams[1:]:
            out = out + s
        return out
    if mode == "multiplication":
        out = streams[0]
        for s in streams[1:]:
            out = out * s
        return out
    if mode == "concatenation":
        if concat_proj is None:
            raise ValueError("concatenation fusion needs a projection back to d")
        return concat_proj(concat(streams, axis=-1))
    raise ValueError(f"unknown baseline fusion mode {mode!r}; expected one of {BASELINE_MODES}")


# -- the model -----------------------------------------------------------------------------
@dataclass
class Batch:
    vt: np.ndarray
    rt: np.ndarray
    ls: np.ndarray
    ls_mask: np.ndarray
    labels: np.ndarray | None = None
    boxes: np.ndarray | None = None

    def __len__(self):
        return self.vt.shape[0]


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass, keyed for inspection."""

    tokens: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    agents: dict = field(default_factory=dict)


class AgentFusionModel:
    def __init__(self, cfg: ModelConfig, shapes: StreamShapes, seed: int = 0):
        cfg.validate()
        self.cfg, self.shapes, self.seed = cfg, shapes, seed
        rng = np.random.default_rng(seed)
        self.encoder = StreamEncoder(shapes, cfg.n_tokens, cfg.dim, rng)
        self.attn: dict[StreamId, AgentAttentionParams] = {}
        self.concat_proj = None
        if cfg.fusion == "alsaf":
            for sid in cfg.streams:
                self.attn[sid] = AgentAttentionParams(cfg.n_tokens, cfg.dim, cfg.n_agents, rng,
                                                      cfg.ffn_mult, cfg.alpha)
        elif cfg.fusion == "concatenation":
            self.concat_proj = LinearLayer(len(cfg.streams) * cfg.dim, cfg.dim, rng)
        self.heads = HeadParams(cfg.dim, cfg.head_hidden or cfg.dim, cfg.n_classes, rng)

    # -- parameters -----------------------------------------------------------------
    def layers(self) -> dict[str, LinearLayer]:
        out = {}
        for k, layer in self.encoder.layers().items():
            if self.cfg.lsas or not k.endswith("_ls"):
                out[f"encoder.{k}"] = layer
        for sid, params in self.attn.items():
            out.update({f"attn.{sid.value}.{k}": v for k, v in params.layers().items()})
        if self.concat_proj is not None:
            out["concat_proj"] = self.concat_proj
        out.update({f"heads.{k}": v for k, v in self.heads.layers().items()})
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for lname, layer in self.layers().items():
            out.extend((f"{lname}.{pname}", p) for pname, p in layer.parameters().items())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in named.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    # -- forward ------------------------------------------------------------------------
    def _split(self, x: Tensor) -> Tensor:
        h = self.cfg.heads
        if h == 1:
            return x
        b, n, d = x.shape
        return transpose(x.reshape(b, n, h, d // h), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        if self.cfg.heads == 1:
            return x
        b, h, n, dh = x.shape
        return transpose(x, (0, 2, 1, 3)).reshape(b, n, h * dh)

    def encode(self, batch: Batch) -> dict[StreamId, Tensor]:
        vt, rt, ls = self.encoder(batch.vt, batch.rt, batch.ls, batch.ls_mask)
        out = {StreamId.VT: vt, StreamId.RT: rt}
        if self.cfg.lsas:
            out[StreamId.LS] = ls
        return out

    def fuse(self, tokens: dict[StreamId, Tensor], trace: ForwardTrace | None = None) -> Tensor:
        cfg = self.cfg
        if cfg.fusion != "alsaf":
            return baseline_fuse(cfg.fusion, [tokens[s] for s in cfg.streams], self.concat_proj)
        alpha = cfg.alpha
        proj = {}
        for sid in cfg.streams:
            q, k, v, a, a_star = project_qkva(tokens[sid], self.attn[sid])
            proj[sid] = tuple(self._split(x) for x in (q, k, v, a_star))
        outs = {}
        masks = {}
        for sid in cfg.streams:
            q, k, v, a_star = proj[sid]
            masks[sid] = agent_masks(q, k, a_star, alpha)
            if sid is not StreamId.VT:
                m_qa, m_ka = masks[sid]
                outs[sid] = self.attn[sid].ffn(self._merge(agent_readout(m_ka, m_qa, v)))
        others = [s for s in cfg.streams if s is not StreamId.VT]
        q, k, v, a_star = proj[StreamId.VT]
        m_qa_vt = masks[StreamId.VT][0]
        fused_qa = fuse_agent_attention(m_qa_vt, *[masks[s][0] for s in others]) if cfg.caaf else m_qa_vt
        fused_a = fuse_agent_tokens(a_star, *[proj[s][3] for s in others]) if cfg.catf else a_star
        vt_out, fused_ka = visual_aggregate(fused_a, k, v, fused_qa, alpha)
        outs[StreamId.VT] = self.attn[StreamId.VT].ffn(self._merge(vt_out))
        if trace is not None:
            trace.masks.update({f"{s.value}.qa": m[0] for s, m in masks.items()})
            trace.masks.update({f"{s.value}.ka": m[1] for s, m in masks.items()})
            trace.masks["VT.fused_qa"] = fused_qa
            trace.masks["VT.fused_ka"] = fused_ka
            trace.agents.update({s.value: p[3] for s, p in proj.items()})
            trace.agents["VT.fused"] = fused_a
            trace.tokens.update({s.value: t for s, t in outs.items()})
        return aggregate_streams([outs[s] for s in cfg.streams])

    def forward(self, batch: Batch, trace: ForwardTrace | None = None) -> tuple[Tensor, Tensor]:
        return predict(self.fuse(self.encode(batch), trace), self.heads)

    def loss(self, batch: Batch) -> Tensor:
        scores, box = self.forward(batch)
        per_instance = total_loss(Tensor(batch.labels), scores, Tensor(batch.boxes), box, self.cfg.box_weight)
        return per_instance.mean()

    # -- checkpoints ------------------------------------------------------------------
    def manifest(self) -> dict:
        return {"model": asdict(self.cfg), "shapes": asdict(self.shapes), "seed": self.seed}

    def save(self, directory: str | Path) -> Path:
        """Write ``params.bin`` (raw parameter container) and ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_arrays(d / "params.bin", self.state_dict())
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "AgentFusionModel":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        cfg = ModelConfig(**man["model"])
        model = cls(cfg, StreamShapes(**man["shapes"]), man.get("seed", 0))
        model.load_state_dict(read_arrays(d / "params.bin"))
        return model

    def with_config(self, **changes) -> "AgentFusionModel":
        return AgentFusionModel(replace(self.cfg, **changes), self.shapes, self.seed)
