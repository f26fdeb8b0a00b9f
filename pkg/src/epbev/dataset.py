"""Pair manifests, evaluation splits, tile ingestion and the synthetic benchmark."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import os
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import requests

from .geometry import CameraRig, PanoramaSpec
from .imaging import (
    ImageBuffer,
    SyntheticScene,
    _atomic_write,
    render_synthetic_panorama,
    write_png,
    yaw_shift,
)

log = logging.getLogger(__name__)

MANIFEST_KEYS = (
    "id", "city", "latitude", "longitude", "capture_date", "panorama_path",
    "satellite_path", "map_path", "heading", "location_id",
)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    """One street panorama with its co-located overhead references.

    ``heading`` is the panorama yaw in degrees (the azimuth offset that
    aligns its columns with the overhead image) or None when unknown.
    ``location_id`` ties captures of the same place across years; it
    defaults to ``id``.
    """

    id: str
    city: str
    latitude: float
    longitude: float
    capture_date: str
    panorama_path: str
    satellite_path: str
    map_path: str | None = None
    heading: float | None = None
    location_id: str = ""

    def __post_init__(self):
        if not self.location_id:
            object.__setattr__(self, "location_id", self.id)

    @property
    def year(self) -> int:
        return dt.date.fromisoformat(self.capture_date).year

    def problems(self) -> list[str]:
        out = []
        if not -90 <= self.latitude <= 90:
            out.append(f"latitude {self.latitude} outside [-90, 90]")
        if not -180 <= self.longitude <= 180:
            out.append(f"longitude {self.longitude} outside [-180, 180]")
        try:
            dt.date.fromisoformat(self.capture_date)
        except (TypeError, ValueError):
            out.append(f"capture_date {self.capture_date!r} is not an ISO date")
        for key in ("panorama_path", "satellite_path", "map_path"):
            p = getattr(self, key)
            if p is not None and (os.path.isabs(p) or p.startswith("..")):
                out.append(f"{key} must be relative to the dataset root")
        if self.heading is not None and not math.isfinite(self.heading):
            out.append("heading must be finite or unknown")
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["heading"] = "unknown" if self.heading is None else self.heading
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PairRecord":
        unknown = set(d) - set(MANIFEST_KEYS)
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        heading = d.get("heading", "unknown")
        return cls(
            id=str(d["id"]),
            city=str(d["city"]),
            latitude=float(d["latitude"]),
            longitude=float(d["longitude"]),
            capture_date=str(d["capture_date"]),
            panorama_path=str(d["panorama_path"]),
            satellite_path=str(d["satellite_path"]),
            map_path=d.get("map_path"),
            heading=None if heading in (None, "unknown") else float(heading),
            location_id=str(d.get("location_id") or d["id"]),
        )


def load_manifest(path: str | os.PathLike) -> list[PairRecord]:
    """Read and validate a JSON-lines manifest."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(PairRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
    bad = {r.id: r.problems() for r in records if r.problems()}
    if bad:
        detail = "; ".join(f"{k}: {', '.join(v)}" for k, v in bad.items())
        raise ManifestError(f"invalid records [{', '.join(bad)}]: {detail}")
    seen, dupes = set(), []
    for r in records:
        if r.id in seen:
            dupes.append(r.id)
        seen.add(r.id)
    if dupes:
        raise ManifestError(f"duplicate ids: {', '.join(dupes)}")
    return records


def write_manifest(records: Iterable[PairRecord], path: str | os.PathLike) -> None:
    lines = [json.dumps(r.to_json(), ensure_ascii=False, sort_keys=False) for r in records]
    _atomic_write(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


# --- splits ----------------------------------------------------------------


@dataclass
class SplitSpec:
    """Queries, their gallery and the positive mapping for one protocol.

    ``excluded_ids`` lists references that must never enter the gallery
    (the training references for held-out-region protocols).
    """

    name: str
    query_ids: list[str]
    reference_ids: list[str]
    positives: dict[str, list[str]]
    modality: Literal["satellite", "map"] = "satellite"
    positive_rule: str = "same-location"
    excluded_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "protocol": self.name,
            "modality": self.modality,
            "positive_rule": self.positive_rule,
            "query_ids": self.query_ids,
            "reference_ids": self.reference_ids,
            "positives": self.positives,
            "excluded_ids": self.excluded_ids,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        return cls(
            name=d["protocol"],
            query_ids=list(d["query_ids"]),
            reference_ids=list(d["reference_ids"]),
            positives={k: list(v) for k, v in d["positives"].items()},
            modality=d.get("modality", "satellite"),
            positive_rule=d.get("positive_rule", "same-location"),
            excluded_ids=list(d.get("excluded_ids", [])),
        )


def save_splits(splits: dict[str, SplitSpec], path: str | os.PathLike) -> None:
    payload = {name: s.to_json() for name, s in splits.items()}
    _atomic_write(Path(path), (json.dumps(payload, indent=1) + "\n").encode("utf-8"))


def load_splits(path: str | os.PathLike) -> dict[str, SplitSpec]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {name: SplitSpec.from_json(d) for name, d in payload.items()}


class SplitError(ValueError):
    pass


def _paired(name, records, modality="satellite", excluded=()) -> SplitSpec:
    ids = [r.id for r in records]
    return SplitSpec(name, ids, list(ids), {i: [i] for i in ids}, modality, "same-id", sorted(excluded))


def make_splits(
    records: Sequence[PairRecord],
    scheme: Literal["regional", "temporal", "map"],
    seed: int = 0,
    holdout_cities: Sequence[str] = (),
    val_fraction: float = 0.1,
) -> dict[str, SplitSpec]:
    """Build the train/val/test splits of one evaluation scheme.

    regional: records from ``holdout_cities`` form the test set; the rest
      are split at random into train and val. Each gallery holds only its
      own split's references.
    map: as regional, with map tiles as the reference modality.
    temporal: the newest capture year is the training set and the
      reference gallery; each older year (and all older years mixed) is a
      query set, matched to the newest-year record of the same location.
    """
    records = list(records)
    if not records:
        raise SplitError("no records")
    if scheme in ("regional", "map"):
        return _regional_splits(records, seed, holdout_cities, val_fraction,
                                "map" if scheme == "map" else "satellite")
    if scheme == "temporal":
        return _temporal_splits(records)
    raise SplitError(f"unknown scheme {scheme!r}")


def _regional_splits(records, seed, holdout_cities, val_fraction, modality):
    holdout = set(holdout_cities)
    cities = {r.city for r in records}
    if not holdout:
        raise SplitError("regional scheme needs at least one held-out city")
    if not holdout <= cities:
        raise SplitError(f"held-out cities not in manifest: {sorted(holdout - cities)}")
    if holdout == cities:
        raise SplitError("every city is held out; nothing left to train on")
    if modality == "map":
        missing = [r.id for r in records if r.map_path is None]
        if missing:
            raise SplitError(f"map scheme needs map_path for every record, missing: {missing[:5]}")

    test = [r for r in records if r.city in holdout]
    pool = [r for r in records if r.city not in holdout]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    n_val = int(round(val_fraction * len(pool)))
    if n_val and len(pool) - n_val < 2:
        raise SplitError("too few training-region records for a validation split")
    val_idx = set(order[:n_val].tolist())
    train = [r for k, r in enumerate(pool) if k not in val_idx]
    val = [r for k, r in enumerate(pool) if k in val_idx]
    train_ids = [r.id for r in train]

    splits = {"train": _paired("train", train, modality)}
    if val:
        splits["val"] = _paired("val", val, modality, excluded=train_ids)
    splits["test"] = _paired("test", test, modality, excluded=train_ids)
    return splits


def _temporal_splits(records):
    years = sorted({r.year for r in records})
    if len(years) < 2:
        raise SplitError(f"temporal scheme needs at least two capture years, found {years}")
    newest = years[-1]
    refs = [r for r in records if r.year == newest]
    by_location: dict[str, list[str]] = {}
    for r in refs:
        by_location.setdefault(r.location_id, []).append(r.id)
    ref_ids = [r.id for r in refs]

    splits = {"train": _paired("train", refs)}
    mixed_q, mixed_pos = [], {}
    for year in years[:-1]:
        queries = [r for r in records if r.year == year and r.location_id in by_location]
        dropped = sum(1 for r in records if r.year == year and r.location_id not in by_location)
        if dropped:
            log.warning("temporal %d: %d queries have no %d reference and are skipped", year, dropped, newest)
        if not queries:
            continue
        pos = {q.id: list(by_location[q.location_id]) for q in queries}
        splits[f"temporal-{year}"] = SplitSpec(
            f"temporal-{year}", [q.id for q in queries], list(ref_ids), pos, "satellite", "same-location"
        )
        mixed_q += [q.id for q in queries]
        mixed_pos.update(pos)
    if not mixed_q:
        raise SplitError("no older-year query has a newest-year reference at the same location")
    splits["temporal-mixed"] = SplitSpec("temporal-mixed", mixed_q, list(ref_ids), mixed_pos)
    return splits


# --- tiles -------------------------------------------------------------------

MERCATOR_MAX_LAT = 85.0511287798066


@dataclass(frozen=True)
class TileCoord:
    z: int
    x: int
    y: int

    def __post_init__(self):
        n = 1 << self.z
        if self.z < 0 or not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile {self} outside the zoom-{self.z} pyramid")


def lonlat_to_tile(lon: float, lat: float, z: int) -> TileCoord:
    """Slippy-map tile containing (lon, lat) at zoom ``z``."""
    if abs(lat) > MERCATOR_MAX_LAT + 1e-9:
        raise ValueError(f"latitude {lat} beyond the Web-Mercator limit")
    if not -180 <= lon <= 180:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    n = 1 << z
    x = math.floor((lon + 180.0) / 360.0 * n)
    y = math.floor((1.0 - math.asinh(math.tan(math.radians(lat))) / math.pi) / 2.0 * n)
    # the east edge and the southern limit belong to the last tile
    return TileCoord(z, min(max(x, 0), n - 1), min(max(y, 0), n - 1))


def tile_center_lonlat(tile: TileCoord) -> tuple[float, float]:
    n = 1 << tile.z
    lon = (tile.x + 0.5) / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * (tile.y + 0.5) / n))))
    return lon, lat


def check_template(template: str) -> None:
    fields = {f for _, f, _, _ in string.Formatter().parse(template) if f is not None}
    if fields != {"z", "x", "y"}:
        raise ValueError(f"tile URL template must use exactly {{z}}, {{x}}, {{y}}; got {sorted(fields)}")


def tile_url(template: str, tile: TileCoord) -> str:
    check_template(template)
    return template.format(z=tile.z, x=tile.x, y=tile.y)


def tile_cache_path(cache_dir: str | os.PathLike, tile: TileCoord) -> Path:
    return Path(cache_dir) / str(tile.z) / str(tile.x) / f"{tile.y}.png"


@dataclass
class FetchReport:
    status: dict[str, str] = field(default_factory=dict)  # id -> fetched|cached|failed
    errors: dict[str, str] = field(default_factory=dict)
    requests_made: int = 0

    def ids_with(self, status: str) -> list[str]:
        return [k for k, v in self.status.items() if v == status]


def fetch_tiles(
    records: Sequence[PairRecord],
    template: str,
    cache_dir: str | os.PathLike,
    zoom: int = 19,
    concurrency: int = 4,
    timeout: float = 10.0,
    session: requests.Session | None = None,
) -> FetchReport:
    """Download the tile under each record into ``<cache>/<z>/<x>/<y>.png``.

    Cached tiles are never requested again. A failing tile marks only its
    own records as failed.
    """
    check_template(template)
    report = FetchReport()
    tiles: dict[TileCoord, list[str]] = {}
    for r in records:
        try:
            tile = lonlat_to_tile(r.longitude, r.latitude, zoom)
        except ValueError as exc:
            report.status[r.id] = "failed"
            report.errors[r.id] = str(exc)
            continue
        tiles.setdefault(tile, []).append(r.id)

    pending = []
    for tile, ids in tiles.items():
        if tile_cache_path(cache_dir, tile).exists():
            for i in ids:
                report.status[i] = "cached"
        else:
            pending.append(tile)

    sess = session or requests.Session()

    def download(tile: TileCoord):
        url = tile_url(template, tile)
        try:
            resp = sess.get(url, timeout=timeout)
            resp.raise_for_status()
            _atomic_write(tile_cache_path(cache_dir, tile), resp.content)
            return tile, None
        except (requests.RequestException, OSError) as exc:
            return tile, f"{url}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        outcomes = list(pool.map(download, pending))
    report.requests_made = len(pending)
    for tile, err in outcomes:
        for i in tiles[tile]:
            report.status[i] = "failed" if err else "fetched"
            if err:
                report.errors[i] = err
    return report


# --- synthetic benchmark -------------------------------------------------------

ROAD_COLOR = np.array([0.35, 0.35, 0.37])
MAP_BACKGROUND = np.array([0.95, 0.94, 0.90])
MAP_ROAD = np.array([1.0, 1.0, 1.0])


def _smooth_step(d: np.ndarray, width: float) -> np.ndarray:
    """1 inside (d < 0), 0 outside, with a linear ramp of ``width`` pixels."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def procedural_scene(size: int, rng: np.random.Generator, edge: float = 3.0):
    """Overhead texture and its map rendering for one synthetic place.

    Roads are straight stripes at random orientation and offset; buildings
    are colored elliptical blobs; the ground has a random base color and a
    low-frequency shading field. Returns ``(texture, map_tile)`` arrays.
    """
    ii, jj = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    base = rng.uniform(0.25, 0.75, size=3)
    tex = np.broadcast_to(base, (size, size, 3)).copy()
    # low-frequency shading: a few random plane waves
    shade = np.zeros((size, size))
    for _ in range(3):
        k = rng.normal(size=2) * 2 * math.pi / size * rng.uniform(0.5, 2.0)
        shade += rng.uniform(0.02, 0.06) * np.sin(k[0] * ii + k[1] * jj + rng.uniform(0, 2 * math.pi))
    tex += shade[..., None]

    map_tile = np.broadcast_to(MAP_BACKGROUND, (size, size, 3)).copy()
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(0.04, 0.14, size=2) * size
        angle = rng.uniform(0, math.pi)
        ca, sa = math.cos(angle), math.sin(angle)
        dy, dx = ii - cy, jj - cx
        a = (dx * ca + dy * sa) / rx
        b = (-dx * sa + dy * ca) / ry
        dist = (np.sqrt(a * a + b * b) - 1.0) * min(rx, ry)
        alpha = _smooth_step(dist, edge)[..., None]
        color = rng.uniform(0.05, 0.95, size=3)
        tex = tex * (1 - alpha) + color * alpha
        gray = 0.55 + 0.3 * color.mean()
        map_tile = map_tile * (1 - alpha) + gray * alpha

    for _ in range(int(rng.integers(1, 4))):
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.35, 0.35) * size
        half_width = rng.uniform(0.02, 0.05) * size
        n = np.array([math.cos(angle), math.sin(angle)])
        d = np.abs((jj - size / 2) * n[0] + (ii - size / 2) * n[1] - offset) - half_width
        alpha = _smooth_step(d, edge)[..., None]
        tex = tex * (1 - alpha) + ROAD_COLOR * alpha
        map_tile = map_tile * (1 - alpha) + MAP_ROAD * alpha

    return np.clip(tex, 0.0, 1.0), np.clip(map_tile, 0.0, 1.0)


@dataclass(frozen=True)
class BenchmarkSpec:
    """Sizes for synthetic scenes; the overhead covers ``texture_size * resolution`` meters."""

    texture_size: int = 512
    resolution: float = 0.14
    pano: PanoramaSpec = PanoramaSpec(512, 1024)
    camera_height: float = 1.5
    cities: tuple[str, ...] = ("alpha", "bravo", "charlie", "delta")
    capture_date: str = "2023-06-01"


def generate_synthetic_benchmark(
    n: int,
    seed: int,
    out_dir: str | os.PathLike,
    spec: BenchmarkSpec = BenchmarkSpec(),
) -> list[PairRecord]:
    """Write ``n`` procedurally textured scenes with rendered panoramas.

    Each panorama is rendered north-aligned and then cyclically shifted by
    a random whole number of columns; the shift is recorded as the heading
    in degrees. Scenes are assigned to cities round-robin.
    """
    if n < 2:
        raise ValueError("a benchmark needs at least 2 scenes so every query has a negative")
    out = Path(out_dir)
    for sub in ("panorama", "satellite", "map"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    master = np.random.SeedSequence(seed)
    rig = CameraRig(spec.camera_height)
    records = []
    width = len(str(n - 1))
    for k, child in enumerate(master.spawn(n)):
        rng = np.random.default_rng(child)
        tex, map_tile = procedural_scene(spec.texture_size, rng)
        scene = SyntheticScene(ImageBuffer(tex), spec.resolution, rig=rig)
        pano = render_synthetic_panorama(scene, spec.pano)
        shift = int(rng.integers(0, spec.pano.w))
        pano = yaw_shift(pano, shift)
        sid = f"scene_{k:0{width}d}"
        paths = {sub: f"{sub}/{sid}.png" for sub in ("panorama", "satellite", "map")}
        write_png(pano, out / paths["panorama"])
        write_png(ImageBuffer(tex), out / paths["satellite"])
        write_png(ImageBuffer(map_tile), out / paths["map"])
        # fictitious but valid coordinates: a small grid per city
        city = spec.cities[k % len(spec.cities)]
        lat = -10.0 + 10.0 * (k % len(spec.cities)) + 0.001 * (k // len(spec.cities))
        records.append(PairRecord(
            id=sid,
            city=city,
            latitude=round(lat, 6),
            longitude=round(20.0 + 0.001 * k, 6),
            capture_date=spec.capture_date,
            panorama_path=paths["panorama"],
            satellite_path=paths["satellite"],
            map_path=paths["map"],
            heading=shift * 360.0 / spec.pano.w,
        ))
    write_manifest(records, out / "manifest.jsonl")
    return records


def heading_to_yaw(heading_deg: float | None) -> float:
    """Azimuth offset (radians) for a recorded heading; unknown headings give 0."""
    return 0.0 if heading_deg is None else math.radians(heading_deg)


def heading_to_shift(heading_deg: float | None, width: int) -> int:
    """Whole-column shift that undoes a recorded heading."""
    return 0 if heading_deg is None else -int(round(heading_deg * width / 360.0))
