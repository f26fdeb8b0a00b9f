"""Glue between manifests, images, encoders and evaluation."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import PairRecord, SplitSpec, heading_to_shift
from .embedding import (
    EmbeddingMatrix,
    EncoderParams,
    LossCurve,
    TrainConfig,
    encode_many,
    extract_descriptor,
    train_branch,
)
from .geometry import BevPlaneSpec, CameraRig, PanoramaSpec, WarpMap, build_warp_map
from .imaging import (
    ImageBuffer,
    apply_warp,
    load_warp_map,
    pad_panorama,
    quantize_warp_map,
    read_png,
    save_warp_map,
    yaw_shift,
)
from .retrieval import FusionConfig, RecallReport, evaluate_protocol

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    plane: BevPlaneSpec = BevPlaneSpec()
    rig: CameraRig = CameraRig()
    pano: PanoramaSpec = PanoramaSpec()
    grid: int = 4
    pad: bool = False
    sampling: str = "bilinear"
    fusion: FusionConfig = FusionConfig()
    train: TrainConfig = field(default_factory=TrainConfig)


def warp_cache_name(plane: BevPlaneSpec, rig: CameraRig, pano: PanoramaSpec) -> str:
    key = f"{plane.l}|{plane.r!r}|{rig.H!r}|{rig.yaw_offset!r}|{pano.h}|{pano.w}"
    return f"warp_{hashlib.sha1(key.encode()).hexdigest()[:16]}.epbw"


def cached_warp_map(
    plane: BevPlaneSpec, rig: CameraRig, pano: PanoramaSpec, cache_dir: str | os.PathLike | None
) -> tuple[WarpMap, bool]:
    """Warp map at cache precision; returns ``(map, was_cached)``.

    Built maps are rounded through float32 so a fresh build and a cache hit
    produce identical warps.
    """
    if cache_dir is None:
        return quantize_warp_map(build_warp_map(plane, rig, pano)), False
    path = Path(cache_dir) / warp_cache_name(plane, rig, pano)
    if path.exists():
        warp = load_warp_map(path)
        if warp.size == plane.l and warp.pano == pano:
            return warp, True
        log.warning("ignoring stale warp cache %s", path)
    warp = quantize_warp_map(build_warp_map(plane, rig, pano))
    save_warp_map(warp, path)
    return warp, False


class DescriptorSource:
    """Loads dataset images and computes branch descriptors, memoized by path."""

    def __init__(self, root: str | os.PathLike, cfg: PipelineConfig, cache_dir=None):
        self.root = Path(root)
        self.cfg = cfg
        self.warp, _ = cached_warp_map(cfg.plane, CameraRig(cfg.rig.H), cfg.pano, cache_dir)
        self._memo: dict[tuple[str, str], np.ndarray] = {}

    def panorama(self, rec: PairRecord) -> ImageBuffer:
        img = read_png(self.root / rec.panorama_path)
        pano = self.cfg.pano
        if (img.height, img.width) != (pano.h, pano.w):
            if self.cfg.pad and img.width == pano.w and img.height < pano.h:
                img, _ = pad_panorama(img, pano.h)
            else:
                raise ValueError(
                    f"{rec.panorama_path}: panorama is {img.height}x{img.width}, expected {pano.h}x{pano.w}"
                )
        # headings are applied as whole-column shifts so one warp map serves every record
        shift = heading_to_shift(rec.heading, img.width)
        if rec.heading is None:
            shift = -int(round(self.cfg.rig.yaw_offset / (2 * np.pi) * img.width))
        return yaw_shift(img, shift) if shift else img

    def bev(self, rec: PairRecord) -> ImageBuffer:
        return apply_warp(self.panorama(rec), self.warp, self.cfg.sampling)

    def query(self, rec: PairRecord, branch: str) -> np.ndarray:
        key = (branch, rec.id)
        if key not in self._memo:
            img = self.panorama(rec) if branch == "street" else self.bev(rec)
            self._memo[key] = extract_descriptor(img, self.cfg.grid)
        return self._memo[key]

    def reference(self, rec: PairRecord, modality: str = "satellite") -> np.ndarray:
        path = rec.satellite_path if modality == "satellite" else rec.map_path
        if path is None:
            raise ValueError(f"record {rec.id} has no {modality} image")
        key = ("ref", path)
        if key not in self._memo:
            self._memo[key] = extract_descriptor(read_png(self.root / path), self.cfg.grid)
        return self._memo[key]


def _lookup(records: Sequence[PairRecord], ids: Sequence[str]) -> list[PairRecord]:
    by_id = {r.id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"ids not in manifest: {missing[:5]}")
    return [by_id[i] for i in ids]


def train_split(
    source: DescriptorSource,
    records: Sequence[PairRecord],
    split: SplitSpec,
    branch: str,
    config: TrainConfig,
) -> tuple[EncoderParams, LossCurve]:
    """Train one branch on the query/positive pairs of ``split``."""
    recs = {r.id: r for r in records}
    queries, refs = [], []
    for qid in split.query_ids:
        pos = split.positives[qid][0]
        queries.append(source.query(recs[qid], branch))
        refs.append(source.reference(recs[pos], split.modality))
    return train_branch(np.array(queries), np.array(refs), config)


def embed_split(
    source: DescriptorSource,
    records: Sequence[PairRecord],
    split: SplitSpec,
    branch: str,
    params: EncoderParams,
) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Query and reference embeddings of one branch for a split."""
    qrecs = _lookup(records, split.query_ids)
    rrecs = _lookup(records, split.reference_ids)
    qd = np.array([source.query(r, branch) for r in qrecs])
    rd = np.array([source.reference(r, split.modality) for r in rrecs])
    qe, qbad = encode_many(qd, params)
    re, rbad = encode_many(rd, params)
    if qbad.any() or rbad.any():
        log.warning("%d degenerate embeddings replaced by e1", int(qbad.sum() + rbad.sum()))
    return EmbeddingMatrix(qe, split.query_ids), EmbeddingMatrix(re, split.reference_ids)


def evaluate_split(
    split: SplitSpec,
    embeddings: dict[str, tuple[EmbeddingMatrix, EmbeddingMatrix]],
    modes: Sequence[str],
    fusion: FusionConfig,
) -> dict[str, RecallReport]:
    street = embeddings.get("street", (None, None))
    bev = embeddings.get("bev", (None, None))
    return evaluate_protocol(
        split.query_ids,
        split.positives,
        street[0],
        bev[0],
        street[1],
        bev[1],
        split.reference_ids,
        modes=modes,
        cfg=fusion,
        excluded_ids=split.excluded_ids,
        modality=split.modality,
        name=split.name,
    )
