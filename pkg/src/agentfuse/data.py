"""Stacked datasets of stream inputs and labels, plus the frame stub for robustness runs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import Batch
from .streams import (CategoryEmbedder, EmbeddingRecord, SceneConfig, StreamShapes,
                      filter_detections, generate_synthetic_scene, location_semantic_features,
                      read_detection_file, read_embedding_file, scene_detections,
                      write_detection_file, write_embedding_file)


@dataclass
class Dataset:
    ids: list[str]
    vt: np.ndarray        # (S, N_vt, d_vt)
    rt: np.ndarray        # (S, N_rt, d_rt)
    ls: np.ndarray        # (S, max_objects, d_cat + 4)
    ls_mask: np.ndarray   # (S, max_objects)
    labels: np.ndarray    # (S, N_c)
    boxes: np.ndarray     # (S, 4)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def shapes(self) -> StreamShapes:
        return StreamShapes(self.vt.shape[1], self.vt.shape[2], self.rt.shape[1], self.rt.shape[2],
                            self.ls.shape[1], self.ls.shape[2] - 4)

    def batch(self, idx) -> Batch:
        return Batch(self.vt[idx], self.rt[idx], self.ls[idx], self.ls_mask[idx],
                     self.labels[idx], self.boxes[idx])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([self.ids[i] for i in idx], self.vt[idx], self.rt[idx], self.ls[idx],
                       self.ls_mask[idx], self.labels[idx], self.boxes[idx], dict(self.meta))

    def with_vt(self, vt: np.ndarray) -> "Dataset":
        return Dataset(list(self.ids), vt, self.rt, self.ls, self.ls_mask, self.labels, self.boxes,
                       dict(self.meta))

    def save(self, path: str | Path) -> None:
        np.savez(path, ids=np.array(self.ids), vt=self.vt, rt=self.rt, ls=self.ls,
                 ls_mask=self.ls_mask, labels=self.labels, boxes=self.boxes,
                 meta=np.array(json.dumps(self.meta, sort_keys=True)))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path) as z:
            return cls([str(i) for i in z["ids"]], z["vt"], z["rt"], z["ls"], z["ls_mask"],
                       z["labels"], z["boxes"], json.loads(str(z["meta"])))

    @classmethod
    def empty(cls, shapes: StreamShapes, n_classes: int) -> "Dataset":
        return cls([], np.zeros((0, shapes.n_vt, shapes.d_vt)), np.zeros((0, shapes.n_rt, shapes.d_rt)),
                   np.zeros((0, shapes.max_objects, shapes.d_cat + 4)), np.zeros((0, shapes.max_objects)),
                   np.zeros((0, n_classes)), np.zeros((0, 4)))


def generate_dataset(cfg: SceneConfig, n_scenes: int, first_index: int = 0, prefix: str = "scene") -> Dataset:
    """Scenes ``first_index .. first_index + n_scenes - 1`` of the benchmark defined by ``cfg``."""
    cfg.validate()
    shapes = cfg.stream_shapes()
    if n_scenes == 0:
        ds = Dataset.empty(shapes, cfg.n_classes)
        ds.meta = {"scene_config": asdict(cfg)}
        return ds
    vt = np.zeros((n_scenes, shapes.n_vt, shapes.d_vt))
    rt = np.zeros((n_scenes, shapes.n_rt, shapes.d_rt))
    ls = np.zeros((n_scenes, shapes.max_objects, shapes.d_cat + 4))
    mask = np.zeros((n_scenes, shapes.max_objects))
    labels = np.zeros((n_scenes, cfg.n_classes))
    boxes = np.zeros((n_scenes, 4))
    ids = []
    for i in range(n_scenes):
        _, (v, r, l), (y, b) = generate_synthetic_scene(first_index + i, cfg=cfg)
        vt[i], rt[i] = v.tokens, r.tokens
        ls[i, :l.n_tokens] = l.tokens
        mask[i, :l.n_tokens] = 1.0
        labels[i], boxes[i] = y, b
        ids.append(f"{prefix}-{first_index + i:06d}")
    return Dataset(ids, vt, rt, ls, mask, labels, boxes, {"scene_config": asdict(cfg)})


def export_scene_files(cfg: SceneConfig, n_scenes: int, directory: str | Path, first_index: int = 0) -> None:
    """Write the scenes as embedding, detection and label JSON-lines files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    emb, dets, labs = [], [], []
    for i in range(first_index, first_index + n_scenes):
        scene, (v, r, _), (y, b) = generate_synthetic_scene(i, cfg=cfg)
        rid = f"scene-{i:06d}"
        emb.append(EmbeddingRecord(rid, v.tokens, r.tokens))
        dets.append((rid, scene_detections(scene)))
        labs.append({"id": rid, "labels": y.astype(int).tolist(), "box": list(b)})
    write_embedding_file(d / "embeddings.jsonl", emb)
    write_detection_file(d / "detections.jsonl", dets)
    with open(d / "labels.jsonl", "w") as fh:
        for rec in labs:
            fh.write(json.dumps(rec) + "\n")


def dataset_from_files(embeddings: str | Path, detections: str | Path, labels: str | Path,
                       embedder: CategoryEmbedder, max_objects: int,
                       confidence_threshold: float = 0.5) -> tuple[Dataset, list]:
    """Join embedding, detection and label files on ``id``; returns ``(dataset, rejections)``."""
    emb = read_embedding_file(embeddings)
    det = read_detection_file(detections)
    det_by_id = dict(det.records)
    lab_by_id = {}
    with open(labels) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                lab_by_id[str(obj["id"])] = (np.asarray(obj["labels"], float), np.asarray(obj["box"], float))
    rejected = list(emb.rejected) + list(det.rejected)
    records = [r for r in emb.records if r.id in lab_by_id]
    if not records:
        return Dataset([], np.zeros((0, 0, 0)), np.zeros((0, 0, 0)), np.zeros((0, max_objects, embedder.dim + 4)),
                       np.zeros((0, max_objects)), np.zeros((0, 0)), np.zeros((0, 4))), rejected
    ids, ls, mask = [], [], []
    for r in records:
        kept = filter_detections(det_by_id.get(r.id, []), confidence_threshold)[:max_objects]
        f, m = location_semantic_features(kept, embedder, max_objects)
        ids.append(r.id)
        ls.append(f)
        mask.append(m)
    return Dataset(ids, np.stack([r.vt for r in records]), np.stack([r.rt for r in records]),
                   np.stack(ls), np.stack(mask), np.stack([lab_by_id[i][0] for i in ids]),
                   np.stack([lab_by_id[i][1] for i in ids])), rejected


# -- frame stub ----------------------------------------------------------------------------
@dataclass(frozen=True)
class FrameStub:
    """Renders a VT source matrix as an 8-bit gray image and reads it back.

    Value ``lo`` maps to 0 and ``hi`` to 255; each entry becomes a
    ``block x block`` pixel square replicated over the three channels.
    """

    lo: float = -4.0
    hi: float = 4.0
    block: int = 2

    def encode(self, vt: np.ndarray) -> np.ndarray:
        unit = np.clip((np.asarray(vt) - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        gray = np.rint(unit * 255.0).astype(np.uint8)
        img = np.repeat(np.repeat(gray, self.block, axis=0), self.block, axis=1)
        return np.repeat(img[..., None], 3, axis=2)

    def decode(self, frame: np.ndarray) -> np.ndarray:
        h, w, _ = frame.shape
        b = self.block
        cells = frame.astype(np.float64).reshape(h // b, b, w // b, b, 3).mean(axis=(1, 3, 4))
        return self.lo + cells / 255.0 * (self.hi - self.lo)


def perturb_dataset(ds: Dataset, corrupt, stub: FrameStub = FrameStub()) -> Dataset:
    """Round-trip every VT matrix through ``stub``, applying ``corrupt(frame, index)`` in between.

    ``corrupt=None`` gives the clean round trip.
    """
    vt = np.empty_like(ds.vt)
    for i in range(len(ds)):
        frame = stub.encode(ds.vt[i])
        if corrupt is not None:
            frame = corrupt(frame, i)
        vt[i] = stub.decode(frame)
    return ds.with_vt(vt)
