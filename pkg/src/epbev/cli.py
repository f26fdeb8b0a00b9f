"""Command-line entry point: ``epbev <command> ...``.

Exit codes: 0 success, 2 usage or I/O error, 3 protocol violation.
Progress goes to stderr; reports and CSV go to stdout or files.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from pathlib import Path

from . import dataset, embedding, imaging, pipeline
from .embedding import TrainConfig
from .geometry import BevPlaneSpec, CameraRig, PanoramaSpec
from .retrieval import FusionConfig, ProtocolError, ranked_lists_to_csv, reports_to_csv, reports_to_table

log = logging.getLogger("epbev")

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL = 0, 2, 3

DEFAULT_CONFIG = {
    "dataset_root": ".",
    "plane": {"l": 512, "r": 0.14},
    "rig": {"H": 1.5, "yaw_offset_deg": 0.0},
    "panorama": {"h": 512, "w": 1024},
    "encoder": {"grid": 4, "dim": 64},
    "train": {"lr": 1e-3, "epochs": 40, "batch": 32, "seed": 0, "weight_decay": 0.01},
    "fusion": {"M": 64},
    "protocol": "test",
}

# flag dest -> (section, key)
CONFIG_FLAGS = {
    "dataset_root": (None, "dataset_root"),
    "l": ("plane", "l"),
    "r": ("plane", "r"),
    "H": ("rig", "H"),
    "yaw_deg": ("rig", "yaw_offset_deg"),
    "pano_h": ("panorama", "h"),
    "pano_w": ("panorama", "w"),
    "grid": ("encoder", "grid"),
    "dim": ("encoder", "dim"),
    "lr": ("train", "lr"),
    "epochs": ("train", "epochs"),
    "batch": ("train", "batch"),
    "seed": ("train", "seed"),
    "weight_decay": ("train", "weight_decay"),
    "M": ("fusion", "M"),
    "protocol": (None, "protocol"),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def effective_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}")
        for key, value in loaded.items():
            if key not in cfg:
                raise CliError(f"unknown config key {key!r}")
            if isinstance(cfg[key], dict):
                unknown = set(value) - set(cfg[key])
                if unknown:
                    raise CliError(f"unknown keys in {key!r}: {sorted(unknown)}")
                cfg[key].update(value)
            else:
                cfg[key] = value
    for dest, (section, key) in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    return cfg


def write_sidecar(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def specs(cfg: dict):
    try:
        plane = BevPlaneSpec(cfg["plane"]["l"], cfg["plane"]["r"])
        rig = CameraRig(cfg["rig"]["H"], math.radians(cfg["rig"]["yaw_offset_deg"]))
        pano = PanoramaSpec(cfg["panorama"]["h"], cfg["panorama"]["w"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid geometry config: {exc}")
    return plane, rig, pano


def pipeline_config(cfg: dict, branch: str = "street", pad: bool = False) -> pipeline.PipelineConfig:
    plane, rig, pano = specs(cfg)
    t = cfg["train"]
    try:
        train = TrainConfig(
            batch_size=t["batch"], epochs=t["epochs"], lr=t["lr"], weight_decay=t["weight_decay"],
            seed=t["seed"], branch=branch, dim=cfg["encoder"]["dim"],
        )
        fusion = FusionConfig(cfg["fusion"]["M"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}")
    return pipeline.PipelineConfig(plane, rig, pano, cfg["encoder"]["grid"], pad, fusion=fusion, train=train)


def _read_png(path) -> imaging.ImageBuffer:
    try:
        return imaging.read_png(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}")


def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing file: {path}")
    return path


# --- commands -----------------------------------------------------------------


def cmd_warp(args, cfg) -> int:
    plane, rig, pano = specs(cfg)
    img = _read_png(args.input)
    if (img.height, img.width) != (pano.h, pano.w):
        if args.pad and img.width == pano.w and img.height < pano.h:
            img, info = imaging.pad_panorama(img, pano.h)
            log.info("padded %d-row strip into %dx%d at row %d", info.source_height, pano.h, pano.w, info.top)
        else:
            raise CliError(
                f"panorama is {img.height}x{img.width} but the config expects {pano.h}x{pano.w}"
                + ("" if args.pad else " (use --pad for cropped strips)")
            )
    cache_dir = Path(args.cache_dir) if args.cache_dir else Path(args.output).parent / ".warp_cache"
    warp, hit = pipeline.cached_warp_map(plane, rig, pano, cache_dir)
    log.info("warp map %s (%s)", "cache hit" if hit else "built", cache_dir)
    bev = imaging.apply_warp(img, warp, "nearest" if args.nearest else "bilinear")
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    imaging.write_png(bev, args.output)
    write_sidecar(cfg, Path(str(args.output) + ".config.json"))
    log.info("wrote %dx%d BEV to %s", bev.height, bev.width, args.output)
    return EXIT_OK


def cmd_polar(args, cfg) -> int:
    sat = _read_png(args.input)
    try:
        out = imaging.polar_transform(sat, args.out_h, args.out_w)
    except ValueError as exc:
        raise CliError(str(exc))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    imaging.write_png(out, args.output)
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    plane, rig, pano = specs(cfg)
    spec = dataset.BenchmarkSpec(plane.l, plane.r, pano, rig.H)
    seed = cfg["train"]["seed"] if args.bench_seed is None else args.bench_seed
    try:
        records = dataset.generate_synthetic_benchmark(args.n, seed, args.out, spec)
    except ValueError as exc:
        raise CliError(str(exc))
    write_sidecar(cfg, Path(args.out) / "bench_config.json")
    print(f"scenes={len(records)} panoramas={len(records)} overheads={len(records)} maps={len(records)} "
          f"manifest={Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _load_records(cfg, manifest):
    try:
        return dataset.load_manifest(_require(Path(manifest)))
    except dataset.ManifestError as exc:
        raise CliError(str(exc))


def _load_split(path, name):
    try:
        splits = dataset.load_splits(_require(Path(path)))
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read splits {path}: {exc}")
    if name not in splits:
        raise CliError(f"split {name!r} not in {path}; available: {sorted(splits)}")
    return splits[name]


def _dataset_root(cfg, manifest) -> Path:
    root = Path(cfg["dataset_root"])
    return root if cfg["dataset_root"] != "." else Path(manifest).parent


def cmd_split(args, cfg) -> int:
    records = _load_records(cfg, args.manifest)
    try:
        splits = dataset.make_splits(
            records, args.scheme, seed=cfg["train"]["seed"],
            holdout_cities=args.holdout or (), val_fraction=args.val_fraction,
        )
    except dataset.SplitError as exc:
        raise CliError(str(exc))
    dataset.save_splits(splits, args.out)
    write_sidecar(cfg, Path(str(args.out) + ".config.json"))
    for name, s in splits.items():
        print(f"{name}: queries={len(s.query_ids)} references={len(s.reference_ids)} modality={s.modality}")
    return EXIT_OK


def _branches(arg: str) -> list[str]:
    return ["street", "bev"] if arg in ("both", "all") else [arg]


def cmd_train(args, cfg) -> int:
    records = _load_records(cfg, args.manifest)
    split = _load_split(args.splits, args.split_name)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    for branch in _branches(args.branch):
        pcfg = pipeline_config(cfg, branch, args.pad)
        source = pipeline.DescriptorSource(_dataset_root(cfg, args.manifest), pcfg, run / "warp_cache")
        log.info("training %s branch on %d pairs", branch, len(split.query_ids))
        try:
            params, curve = pipeline.train_split(source, records, split, branch, pcfg.train)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"training failed: {exc}")
        embedding.save_params(params, run / f"{branch}.epbe")
        curve.write_csv(run / f"{branch}_loss.csv")
        log.info("%s: loss %.4f -> %.4f, tau %.4f", branch, curve.mean_loss[0], curve.mean_loss[-1], params.tau)
    write_sidecar(cfg, run / "train_config.json")
    return EXIT_OK


def _emb_path(run: Path, split: str, branch: str, role: str) -> Path:
    return run / f"{split}_{branch}_{role}.epbm"


def cmd_embed(args, cfg) -> int:
    records = _load_records(cfg, args.manifest)
    split = _load_split(args.splits, args.split_name)
    run = Path(args.run)
    branches = [b for b in _branches(args.branch) if (run / f"{b}.epbe").exists() or args.branch != "both"]
    if not branches:
        raise CliError(f"no trained encoders in {run}")
    for branch in branches:
        params = embedding.load_params(_require(run / f"{branch}.epbe"))
        pcfg = pipeline_config(cfg, branch, args.pad)
        source = pipeline.DescriptorSource(_dataset_root(cfg, args.manifest), pcfg, run / "warp_cache")
        try:
            q, r = pipeline.embed_split(source, records, split, branch, params)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"embedding failed: {exc}")
        embedding.save_embeddings(q, _emb_path(run, split.name, branch, "query"))
        embedding.save_embeddings(r, _emb_path(run, split.name, branch, "ref"))
        log.info("%s: embedded %d queries and %d references", branch, len(q), len(r))
    write_sidecar(cfg, run / f"embed_{split.name}_config.json")
    return EXIT_OK


def cmd_index(args, cfg) -> int:
    from .retrieval import GalleryIndex

    try:
        emb = embedding.load_embeddings(_require(Path(args.embeddings)))
        index = GalleryIndex(emb, args.modality)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"invalid gallery {args.embeddings}: {exc}")
    print(f"gallery={args.embeddings} size={len(index)} dim={index.dim} modality={index.modality} unit_norm=ok")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    split = _load_split(args.splits, args.split_name)
    run = Path(args.run)
    modes = ["street", "bev", "fused"] if args.branch == "all" else [args.branch]
    needed = sorted({b for m in modes for b in (["street", "bev"] if m == "fused" else [m])})
    embs = {}
    for branch in needed:
        q = embedding.load_embeddings(_require(_emb_path(run, split.name, branch, "query")))
        r = embedding.load_embeddings(_require(_emb_path(run, split.name, branch, "ref")))
        embs[branch] = (q, r)
    try:
        fusion = FusionConfig(cfg["fusion"]["M"])
        reports = pipeline.evaluate_split(split, embs, modes, fusion)
    except ProtocolError as exc:
        raise CliError(f"protocol violation: {exc}", EXIT_PROTOCOL)
    except (ValueError, KeyError) as exc:
        raise CliError(f"evaluation failed: {exc}")
    ordered = [reports[m] for m in modes]
    text = reports_to_csv(ordered)
    sys.stdout.write(text)
    print(reports_to_table(ordered), file=sys.stderr)
    if args.out:
        Path(args.out).write_text(text)
        write_sidecar(cfg, Path(str(args.out) + ".config.json"))
    if args.dump_ranked:
        _dump_ranked(split, embs, modes[-1], fusion, args.dump_ranked)
    return EXIT_OK


def _dump_ranked(split, embs, mode, fusion, path):
    from .retrieval import GalleryIndex, retrieve

    street = embs.get("street", (None, None))
    bev = embs.get("bev", (None, None))
    si = GalleryIndex(street[1].subset(split.reference_ids)) if street[1] is not None else None
    bi = GalleryIndex(bev[1].subset(split.reference_ids)) if bev[1] is not None else None
    sq = street[0].subset(split.query_ids) if street[0] is not None else None
    bq = bev[0].subset(split.query_ids) if bev[0] is not None else None
    k = min(10, len(split.reference_ids), fusion.shortlist)
    results = {
        qid: retrieve(mode, sq.vectors[n] if sq else None, bq.vectors[n] if bq else None, si, bi, fusion, k)
        for n, qid in enumerate(split.query_ids)
    }
    Path(path).write_text(ranked_lists_to_csv(results))


def cmd_fetch_tiles(args, cfg) -> int:
    records = _load_records(cfg, args.manifest)
    try:
        report = dataset.fetch_tiles(records, args.template, args.cache, args.zoom, args.concurrency)
    except ValueError as exc:
        raise CliError(str(exc))
    summary = {s: len(report.ids_with(s)) for s in ("fetched", "cached", "failed")}
    print(json.dumps({"summary": summary, "status": report.status, "errors": report.errors}, indent=1))
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", help="JSON run config; flags override its values")
    g.add_argument("--dataset-root", dest="dataset_root")
    g.add_argument("--l", type=int, help="BEV side length in pixels")
    g.add_argument("--r", type=float, help="BEV ground resolution in m/pixel")
    g.add_argument("--H", type=float, help="camera height in meters")
    g.add_argument("--yaw-deg", dest="yaw_deg", type=float, help="panorama yaw offset in degrees")
    g.add_argument("--pano-h", dest="pano_h", type=int)
    g.add_argument("--pano-w", dest="pano_w", type=int)
    g.add_argument("--grid", type=int, help="descriptor grid size G")
    g.add_argument("--dim", type=int, help="embedding dimension d")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--M", type=int, help="street shortlist size for fusion")
    g.add_argument("--protocol")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epbev", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warp", help="panorama PNG -> BEV PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--pad", action="store_true", help="pad cropped strips to 2:1 first")
    p.add_argument("--nearest", action="store_true", help="nearest instead of bilinear sampling")
    p.add_argument("--cache-dir", dest="cache_dir")
    _config_flags(p)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("polar", help="overhead PNG -> polar pseudo-panorama PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--out-h", dest="out_h", type=int, default=128)
    p.add_argument("--out-w", dest="out_w", type=int, default=512)
    _config_flags(p)
    p.set_defaults(func=cmd_polar)

    p = sub.add_parser("bench", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--bench-seed", dest="bench_seed", type=int, help="defaults to --seed")
    _config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("split", help="make evaluation splits from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme", choices=["regional", "temporal", "map"], required=True)
    p.add_argument("--holdout", action="append", help="held-out city (repeatable)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_split)

    for name, func, help_ in (
        ("train", cmd_train, "train branch encoders"),
        ("embed", cmd_embed, "embed queries and references"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--splits", required=True)
        p.add_argument("--split-name", dest="split_name", default="train" if name == "train" else "test")
        p.add_argument("--branch", choices=["street", "bev", "both"], default="both")
        p.add_argument("--run", required=True, help="run directory for parameters and embeddings")
        p.add_argument("--pad", action="store_true")
        _config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("index", help="validate an embedding file as a gallery")
    p.add_argument("embeddings")
    p.add_argument("--modality", choices=["satellite", "map"], default="satellite")
    _config_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="recall report for a split")
    p.add_argument("--splits", required=True)
    p.add_argument("--split-name", dest="split_name", default="test")
    p.add_argument("--run", required=True)
    p.add_argument("--branch", choices=["street", "bev", "fused", "all"], default="all")
    p.add_argument("--out", help="also write the CSV report here")
    p.add_argument("--dump-ranked", dest="dump_ranked", help="write per-query rankings CSV")
    _config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fetch-tiles", help="download XYZ tiles for manifest records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--template", required=True, help="URL with {z}, {x}, {y}")
    p.add_argument("--cache", required=True)
    p.add_argument("--zoom", type=int, default=19)
    p.add_argument("--concurrency", type=int, default=4)
    _config_flags(p)
    p.set_defaults(func=cmd_fetch_tiles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = effective_config(args)
        return args.func(args, cfg)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
