"""Token streams: visual (VT), textual reference (RT) and location-semantic (LS).

Real encoders are out of reach here, so VT/RT embeddings are ingested from
JSON-lines files (or generated synthetically) and LS tokens are built from
detection records plus a deterministic category embedder.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import LinearLayer, Tensor, as_tensor, no_grad


class StreamId(str, enum.Enum):
    VT = "VT"
    RT = "RT"
    LS = "LS"


N_STREAMS = len(StreamId)


@dataclass(frozen=True)
class TokenMatrix:
    stream: StreamId
    tokens: np.ndarray  # (N_t, d)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class RecordError(ValueError):
    """A single input record is malformed; carries its position in the file."""

    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index
        self.reason = reason


@dataclass(frozen=True)
class DetectionRecord:
    box: tuple[float, float, float, float]
    category: str
    confidence: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"box {self.box} is not a normalized corner box")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @classmethod
    def from_pixels(cls, box, width: float, height: float, category: str, confidence: float = 1.0):
        x1, y1, x2, y2 = box
        return cls((x1 / width, y1 / height, x2 / width, y2 / height), category, confidence)

    def to_dict(self) -> dict:
        return {"box": list(self.box), "category": self.category, "confidence": self.confidence}


def filter_detections(dets: Iterable[DetectionRecord], threshold: float = 0.5) -> list[DetectionRecord]:
    """Keep detections with confidence >= threshold, preserving order."""
    return [d for d in dets if d.confidence >= threshold]


class CategoryEmbedder:
    """Category name -> fixed vector.

    Names missing from the user table fall back to a unit vector drawn from a
    generator seeded by the SHA-256 of the name, unless ``fallback="error"``.
    """

    def __init__(self, dim: int, table: dict[str, Sequence[float]] | None = None,
                 fallback: str = "hash"):
        if fallback not in ("hash", "error"):
            raise ValueError(f"unknown fallback policy {fallback!r}")
        self.dim = dim
        self.fallback = fallback
        self._table: dict[str, np.ndarray] = {}
        for name, vec in (table or {}).items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (dim,):
                raise ValueError(f"embedding for {name!r} has shape {v.shape}, expected {(dim,)}")
            self._table[name] = v

    @classmethod
    def from_file(cls, path: str | Path, fallback: str = "error") -> "CategoryEmbedder":
        """Load a JSON object ``{name: [floats...]}``."""
        table = json.loads(Path(path).read_text())
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError("embedding file mixes vector lengths")
        return cls(dims.pop(), table, fallback)

    def __call__(self, name: str) -> np.ndarray:
        vec = self._table.get(name)
        if vec is not None:
            return vec.copy()
        if self.fallback == "error":
            raise KeyError(f"no embedding for category {name!r}")
        seed = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)


def location_semantic_features(dets: Sequence[DetectionRecord], embedder: CategoryEmbedder,
                               max_objects: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``concat(embed(category), box)`` padded to ``max_objects``, plus a 0/1 row mask."""
    n = len(dets) if max_objects is None else max_objects
    if len(dets) > n:
        raise ValueError(f"{len(dets)} detections exceed max_objects={n}")
    feats = np.zeros((n, embedder.dim + 4))
    mask = np.zeros(n)
    for i, det in enumerate(dets):
        feats[i, :embedder.dim] = embedder(det.category)
        feats[i, embedder.dim:] = det.box
        mask[i] = 1.0
    return feats, mask


def project_location_semantic(feats: Tensor, mask: Tensor, proj: LinearLayer,
                              resampler: LinearLayer | None = None) -> Tensor:
    """Apply ``proj`` to each detection row, zero padded rows, then resample tokens."""
    tokens = proj(feats) * mask.reshape(mask.shape + (1,))
    return tokens if resampler is None else resampler(tokens)


def build_location_semantic_tokens(dets: Sequence[DetectionRecord], embedder: CategoryEmbedder,
                                   proj: LinearLayer, resampler: LinearLayer | None = None) -> TokenMatrix:
    """LS tokens for one instance.

    Without a resampler the result has one token per detection; with one, the
    detections are zero-padded to ``resampler.d_in`` rows first.
    """
    max_objects = None if resampler is None else resampler.d_in
    feats, mask = location_semantic_features(dets, embedder, max_objects)
    if resampler is None and not dets:
        return TokenMatrix(StreamId.LS, np.zeros((0, proj.d_out)))
    with no_grad():
        out = project_location_semantic(as_tensor(feats), as_tensor(mask), proj, resampler)
    return TokenMatrix(StreamId.LS, out.data.copy())


# -- stream encoder ----------------------------------------------------------------------
@dataclass(frozen=True)
class StreamShapes:
    """Source shapes expected by a :class:`StreamEncoder`."""

    n_vt: int
    d_vt: int
    n_rt: int
    d_rt: int
    max_objects: int
    d_cat: int


class StreamEncoder:
    """Channel projections followed by token-axis resamplers, one pair per stream.

    Resamplers are bias-free so an instance without detections maps to an
    all-zero LS token matrix.
    """

    def __init__(self, shapes: StreamShapes, n_tokens: int, dim: int, rng: np.random.Generator):
        self.shapes = shapes
        self.n_tokens, self.dim = n_tokens, dim
        self.p_vt = LinearLayer(shapes.d_vt, dim, rng)
        self.r_vt = LinearLayer(shapes.n_vt, n_tokens, rng, bias=False, axis="tokens")
        self.p_rt = LinearLayer(shapes.d_rt, dim, rng)
        self.r_rt = LinearLayer(shapes.n_rt, n_tokens, rng, bias=False, axis="tokens")
        self.p_ls = LinearLayer(shapes.d_cat + 4, dim, rng)
        self.r_ls = LinearLayer(shapes.max_objects, n_tokens, rng, bias=False, axis="tokens")

    def layers(self) -> dict[str, LinearLayer]:
        return {"p_vt": self.p_vt, "r_vt": self.r_vt, "p_rt": self.p_rt, "r_rt": self.r_rt,
                "p_ls": self.p_ls, "r_ls": self.r_ls}

    def encode_vt(self, vt: Tensor) -> Tensor:
        return self.r_vt(self.p_vt(vt))

    def encode_rt(self, rt: Tensor) -> Tensor:
        return self.r_rt(self.p_rt(rt))

    def encode_ls(self, feats: Tensor, mask: Tensor) -> Tensor:
        return project_location_semantic(feats, mask, self.p_ls, self.r_ls)

    def __call__(self, vt, rt, ls_feats, ls_mask) -> tuple[Tensor, Tensor, Tensor]:
        return (self.encode_vt(as_tensor(vt)), self.encode_rt(as_tensor(rt)),
                self.encode_ls(as_tensor(ls_feats), as_tensor(ls_mask)))


# -- file formats -----------------------------------------------------------------------
@dataclass
class EmbeddingRecord:
    id: str
    vt: np.ndarray
    rt: np.ndarray


@dataclass
class IngestResult:
    records: list = field(default_factory=list)
    rejected: list[RecordError] = field(default_factory=list)


def _matrix(value, what: str, index: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise RecordError(index, f"{what} is not a rectangular numeric matrix") from exc
    if arr.ndim != 2:
        raise RecordError(index, f"{what} must be 2-D, got {arr.ndim}-D")
    if not np.isfinite(arr).all():
        raise RecordError(index, f"{what} contains non-finite values")
    return arr


def _iter_lines(path: str | Path):
    with open(path) as fh:
        for index, line in enumerate(fh):
            if line.strip():
                yield index, line


def read_embedding_file(path: str | Path, shapes: StreamShapes | None = None) -> IngestResult:
    """Parse ``{id, vt, rt}`` lines; bad records are collected in ``rejected``."""
    result = IngestResult()
    for index, line in _iter_lines(path):
        try:
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise RecordError(index, f"unparseable record ({exc})") from exc
            vt = _matrix(obj.get("vt"), "vt", index)
            rt = _matrix(obj.get("rt"), "rt", index)
            if shapes is not None:
                if vt.shape != (shapes.n_vt, shapes.d_vt):
                    raise RecordError(index, f"vt shape {vt.shape} != declared {(shapes.n_vt, shapes.d_vt)}")
                if rt.shape != (shapes.n_rt, shapes.d_rt):
                    raise RecordError(index, f"rt shape {rt.shape} != declared {(shapes.n_rt, shapes.d_rt)}")
            result.records.append(EmbeddingRecord(rid, vt, rt))
        except RecordError as err:
            result.rejected.append(err)
    return result


def write_embedding_file(path: str | Path, records: Iterable[EmbeddingRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "vt": rec.vt.tolist(), "rt": rec.rt.tolist()}) + "\n")


def read_detection_file(path: str | Path) -> IngestResult:
    """Parse ``{id, detections: [...]}`` lines into ``(id, [DetectionRecord])`` pairs."""
    result = IngestResult()
    for index, line in _iter_lines(path):
        try:
            obj = json.loads(line)
            dets = [DetectionRecord(tuple(float(v) for v in d["box"]), str(d["category"]),
                                    float(d.get("confidence", 1.0)))
                    for d in obj["detections"]]
            result.records.append((str(obj["id"]), dets))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            result.rejected.append(RecordError(index, str(exc)))
    return result


def write_detection_file(path: str | Path, items: Iterable[tuple[str, Sequence[DetectionRecord]]]) -> None:
    with open(path, "w") as fh:
        for rid, dets in items:
            fh.write(json.dumps({"id": rid, "detections": [d.to_dict() for d in dets]}) + "\n")


def ingest_embeddings(path: str | Path, encoder: StreamEncoder) -> IngestResult:
    """Read an embedding file and project every record to ``(N_t x d)`` VT and RT tokens.

    ``records`` holds ``(id, TokenMatrix VT, TokenMatrix RT)`` triples.
    """
    raw = read_embedding_file(path, encoder.shapes)
    out = IngestResult(rejected=raw.rejected)
    with no_grad():
        for rec in raw.records:
            vt = encoder.encode_vt(Tensor(rec.vt)).data.copy()
            rt = encoder.encode_rt(Tensor(rec.rt)).data.copy()
            out.records.append((rec.id, TokenMatrix(StreamId.VT, vt), TokenMatrix(StreamId.RT, rt)))
    return out


# -- synthetic scenes ----------------------------------------------------------------------
POSTURES = ("standing", "sitting", "walking", "lying")
CLUTTER = ("chair", "table", "cup", "bag", "car", "dog", "phone", "bicycle")


@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the synthetic referring benchmark.

    Every scene has ``n_persons`` people and ``n_clutter`` non-person objects.
    Each VT frame block holds one token per entity (persons and clutter in a
    random but per-scene fixed order) carrying its attributes, an action code
    and its box, corrupted by Gaussian noise of scale ``noise``.  The first
    VT channel is a noisy affinity between the entity and the reference, as a
    text-conditioned visual encoder would expose.  RT tokens are noisy copies
    of the reference; LS detections list every entity with a coarse category
    (``person_<posture>`` or the clutter name).

    The last ``interaction_classes`` labels are object interactions: the
    target carries interaction ``j`` exactly when an object of category
    ``CLUTTER[j]`` is in the scene.  They leave no trace in the VT action
    codes, so only the detection categories reveal them.
    """

    n_persons: int = 5
    n_classes: int = 10
    noise: float = 0.3
    seed: int = 0
    frames: int = 4
    n_clutter: int = 2
    attr_dim: int = 8
    action_dim: int = 8
    ref_tokens: int = 4
    ref_noise: float = 0.3
    affinity_noise: float = 0.5
    category_dim: int = 8
    max_entities: int = 8
    actions_per_person: tuple[int, int] = (1, 3)
    interaction_classes: int = 2

    @property
    def entities(self) -> int:
        return self.n_persons + self.n_clutter

    @property
    def n_interaction(self) -> int:
        return max(0, min(self.interaction_classes, self.n_classes - 1, len(CLUTTER)))

    @property
    def vt_shape(self) -> tuple[int, int]:
        return self.frames * self.max_entities, 1 + self.attr_dim + self.action_dim + 4

    @property
    def rt_shape(self) -> tuple[int, int]:
        return self.ref_tokens, self.attr_dim

    def stream_shapes(self) -> StreamShapes:
        n_vt, d_vt = self.vt_shape
        n_rt, d_rt = self.rt_shape
        return StreamShapes(n_vt, d_vt, n_rt, d_rt, self.max_entities, self.category_dim)

    def validate(self) -> None:
        if self.n_persons < 1:
            raise ValueError("need at least one person")
        if self.n_classes < 2:
            raise ValueError("need at least two action classes")
        if self.interaction_classes < 0:
            raise ValueError("interaction_classes must be non-negative")
        if self.entities > self.max_entities:
            raise ValueError(f"{self.entities} entities exceed max_entities={self.max_entities}")


@dataclass
class Person:
    attributes: np.ndarray
    box: tuple[float, float, float, float]
    actions: np.ndarray  # multi-hot over N_c
    posture: str


@dataclass
class SyntheticScene:
    persons: list[Person]
    target: int
    reference: np.ndarray
    clutter: list[DetectionRecord]
    order: np.ndarray  # entity slot -> entity index (persons first, then clutter)


def _benchmark_constants(cfg: SceneConfig) -> dict[str, np.ndarray]:
    """Fixed per-benchmark tables (independent of the scene seed)."""
    rng = np.random.default_rng([cfg.n_classes, cfg.attr_dim, cfg.action_dim, 7919])
    action_code = rng.standard_normal((cfg.n_classes, cfg.action_dim)) / math.sqrt(cfg.action_dim)
    n_plain = cfg.n_classes - cfg.n_interaction
    action_code[n_plain:] = 0.0  # interactions are invisible in VT
    posture_of_class = np.arange(n_plain) % len(POSTURES)
    return {"action_code": action_code, "posture_of_class": posture_of_class}


def _random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    w, h = rng.uniform(0.08, 0.3), rng.uniform(0.15, 0.5)
    x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def _random_actions(rng: np.random.Generator, cfg: SceneConfig, consts: dict,
                    posture: int | None = None) -> np.ndarray:
    if posture is None:
        posture = int(rng.integers(len(POSTURES)))
    n_plain = len(consts["posture_of_class"])
    in_posture = np.flatnonzero(consts["posture_of_class"] == posture)
    if in_posture.size == 0:
        in_posture = np.arange(n_plain)
    n_act = int(rng.integers(cfg.actions_per_person[0], cfg.actions_per_person[1] + 1))
    y = np.zeros(cfg.n_classes)
    # the first action always matches the posture; others are free
    y[rng.choice(in_posture)] = 1.0
    for _ in range(n_act - 1):
        y[rng.integers(n_plain)] = 1.0
    return y


def nearest_attribute_index(reference: np.ndarray, attributes: Sequence[np.ndarray]) -> int:
    d = [float(np.sum((reference - a) ** 2)) for a in attributes]
    return int(np.argmin(d))


def generate_synthetic_scene(seed: int, n_persons: int | None = None, n_classes: int | None = None,
                             cfg: SceneConfig | None = None):
    """One referring scene plus its raw streams and labels.

    Returns ``(scene, (vt, rt, ls), (actions, box))`` where ``vt``/``rt`` are the
    source-dimension token matrices and ``ls`` holds the un-projected
    ``concat(category embedding, box)`` rows of the detections.
    """
    cfg = cfg or SceneConfig()
    if n_persons is not None or n_classes is not None:
        from dataclasses import replace
        cfg = replace(cfg, n_persons=n_persons or cfg.n_persons, n_classes=n_classes or cfg.n_classes)
    cfg.validate()
    consts = _benchmark_constants(cfg)
    rng = np.random.default_rng([cfg.seed, seed])

    persons = []
    for _ in range(cfg.n_persons):
        posture = int(rng.integers(len(POSTURES)))
        y = _random_actions(rng, cfg, consts, posture)
        persons.append(Person(rng.standard_normal(cfg.attr_dim), _random_box(rng), y, POSTURES[posture]))
    target = int(rng.integers(cfg.n_persons))
    attrs = [p.attributes for p in persons]
    while True:
        reference = attrs[target] + cfg.ref_noise * rng.standard_normal(cfg.attr_dim)
        d = np.array([np.sum((reference - a) ** 2) for a in attrs])
        if cfg.n_persons == 1 or np.sum(d <= d[target]) == 1:
            break
    clutter = [DetectionRecord(_random_box(rng), str(rng.choice(CLUTTER)), float(rng.uniform(0.5, 1.0)))
               for _ in range(cfg.n_clutter)]
    clutter_attrs = rng.standard_normal((cfg.n_clutter, cfg.attr_dim))
    # clutter looks like a person doing something in VT; only LS knows it is not one
    clutter_codes = np.stack([_random_actions(rng, cfg, consts) @ consts["action_code"]
                              for _ in range(cfg.n_clutter)]) if cfg.n_clutter else np.zeros((0, cfg.action_dim))
    present = {c.category for c in clutter}
    n_plain = cfg.n_classes - cfg.n_interaction
    for j in range(cfg.n_interaction):
        persons[target].actions[n_plain + j] = float(CLUTTER[j] in present)
    order = rng.permutation(cfg.entities)
    scene = SyntheticScene(persons, target, reference, clutter, order)

    n_vt, d_vt = cfg.vt_shape
    vt = np.zeros((n_vt, d_vt))
    scale = math.sqrt(cfg.attr_dim)
    for f in range(cfg.frames):
        for slot, ent in enumerate(order):
            row = f * cfg.max_entities + slot
            if ent < cfg.n_persons:
                p = persons[ent]
                attr, code, box = p.attributes, p.actions @ consts["action_code"], p.box
            else:
                attr = clutter_attrs[ent - cfg.n_persons]
                code, box = clutter_codes[ent - cfg.n_persons], clutter[ent - cfg.n_persons].box
            affinity = float(reference @ attr) / scale
            clean = np.concatenate([[affinity], attr, code, box])
            noise = cfg.noise * rng.standard_normal(d_vt)
            noise[0] = cfg.affinity_noise * rng.standard_normal()
            vt[row] = clean + noise
    rt = reference + cfg.noise * rng.standard_normal((cfg.ref_tokens, cfg.attr_dim))

    dets = scene_detections(scene)
    embedder = CategoryEmbedder(cfg.category_dim)
    ls, _ = location_semantic_features(dets, embedder)
    tokens = (TokenMatrix(StreamId.VT, vt), TokenMatrix(StreamId.RT, rt), TokenMatrix(StreamId.LS, ls))
    labels = (persons[target].actions.copy(), np.array(persons[target].box))
    return scene, tokens, labels


def scene_detections(scene: SyntheticScene) -> list[DetectionRecord]:
    """Detections in entity-slot order (the same order as the VT frame blocks)."""
    n_persons = len(scene.persons)
    out = []
    for ent in scene.order:
        if ent < n_persons:
            p = scene.persons[ent]
            out.append(DetectionRecord(p.box, f"person_{p.posture}", 0.99))
        else:
            out.append(scene.clutter[ent - n_persons])
    return out
