"""Command-line front end: dcrlab {gen,randomize,profile,campaign,stats,config}."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, analysis
from .bitmaps import BitmapFormatError, PermissionBitmaps
from .campaign import CampaignConfig, ConfigError, run_campaign
from .profiler import CONFIDENCE, fixture_suite, merge, profile_dynamic, profile_static
from .program import container
from .program.generator import (BlockSizeDist, GeneratorSpec, InfeasibleSpec, SpecSyntaxError, bundled_spec,
                                generate, parse_spec)
from .randomizer import TIERS, RandomizationSpec, randomize

log = logging.getLogger("dcrlab")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4
INPUT_ERRORS = (container.ContainerError, SpecSyntaxError, InfeasibleSpec, ConfigError, BitmapFormatError,
                FileNotFoundError, IsADirectoryError, json.JSONDecodeError)


class InputError(ValueError):
    pass


def _meta(kind: str, config: dict) -> bytes:
    return json.dumps({"tool": "dcrlab", "version": __version__, "kind": kind, "config": config},
                      sort_keys=True).encode()


def _load_image(path: str):
    img, bm, sec = container.load(path)
    meta = json.loads(sec[b"PROV"]) if b"PROV" in sec else {}
    return img, bm, meta


def _read_spec(arg: str) -> GeneratorSpec:
    p = Path(arg)
    if p.exists():
        return parse_spec(p.read_text())
    try:
        return bundled_spec(arg)
    except FileNotFoundError:
        raise FileNotFoundError(f"no spec file or bundled spec named {arg!r}") from None


def cmd_gen(a) -> int:
    spec = _read_spec(a.spec)
    if a.seed is not None:
        spec.seed = a.seed
    if a.blocks is not None:
        spec.block_count = a.blocks
    spec.check()
    img = generate(spec)
    cfg = spec.to_dict()
    container.save(a.out, img, extra=[(b"PROV", _meta("image", cfg))])
    emb = sum(ln for _, ln in img.embedded) / max(1, len(img.text))
    print(json.dumps({"out": a.out, "blocks": len(img.blocks), "text_bytes": len(img.text),
                      "data_in_code": round(emb, 5), "seed": spec.seed}))
    return EXIT_OK


def cmd_randomize(a) -> int:
    img, bm, meta = _load_image(a.image)
    if a.bitmaps:
        bm = PermissionBitmaps.load(a.bitmaps)
    rs = RandomizationSpec(tier=a.tier, seed=a.seed or 0)
    r = randomize(img, bm, rs)
    cfg = {"randomization": rs.to_dict(), "source": meta.get("config")}
    container.save(a.out, r.image, r.bitmap if bm is not None else None,
                   extra=[(b"RAND", r.rand_section()), (b"PROV", _meta("randomized-image", cfg))])
    print(json.dumps({"out": a.out, "tier": a.tier, "seed": rs.seed, "text_bytes": len(r.image.text)}))
    return EXIT_OK


def _workload(img, arg: str | None, seed: int):
    if not arg:
        return fixture_suite(img, seed)["train"]
    suite = fixture_suite(img, seed)
    if arg in suite:
        return suite[arg]
    items = json.loads(Path(arg).read_text())
    try:
        return [(int(e), tuple(int(x) for x in args)) for e, args in items]
    except (TypeError, ValueError):
        raise InputError("workload file must be a JSON list of [entry, [args...]]") from None


def cmd_profile(a) -> int:
    img, _, _ = _load_image(a.image)
    seed = a.seed or 0
    crashes: list = []
    if a.mode == "static":
        bm = profile_static(img, a.confidence)
    elif a.mode == "dynamic":
        bm = profile_dynamic(img, _workload(img, a.workload, seed), crashes=crashes)
    else:
        bm = merge(profile_static(img, a.confidence),
                   profile_dynamic(img, _workload(img, a.workload, seed), crashes=crashes))
    bm.save(a.out)
    print(json.dumps({"tool": "dcrlab", "version": __version__, "out": a.out, "mode": a.mode,
                      "confidence": a.confidence, "workload": a.workload, "seed": seed,
                      "fractions": bm.fractions(), "workload_crashes": len(crashes)}))
    return EXIT_OK


def cmd_campaign(a) -> int:
    img, bm, _ = _load_image(a.image)
    cfg = CampaignConfig.from_yaml(Path(a.config).read_text()) if a.config else CampaignConfig()
    if a.seed is not None:
        cfg.seed = a.seed
    if a.trials is not None:
        cfg.trials = a.trials
    if a.workers is not None:
        cfg.workers = a.workers
    cfg.check()
    bitmaps = PermissionBitmaps.load(cfg.profile.path) if cfg.profile.source == "file" else None
    res = run_campaign(img, cfg, bitmaps)
    for w in res.warnings:
        log.warning(w)
    text = res.to_json()
    if a.out:
        Path(a.out).write_text(text)
    print(json.dumps(res.summary, sort_keys=True))
    return EXIT_OK


def cmd_stats(a) -> int:
    img, _, meta = _load_image(a.image)
    bs = (meta.get("config") or {}).get("block_size")
    pmf = (BlockSizeDist(**bs) if isinstance(bs, dict) else BlockSizeDist()).pmf()
    paths = analysis.emit_csvs(img, a.out_dir, seed=a.seed or 0, samples=a.samples, pmf=pmf)
    (Path(a.out_dir) / "stats.json").write_text(json.dumps(
        {"tool": "dcrlab", "version": __version__, "image": a.image, "seed": a.seed or 0,
         "samples": a.samples, "files": [p.name for p in paths]}, indent=1, sort_keys=True))
    print(json.dumps({"out_dir": a.out_dir, "files": [p.name for p in paths]}))
    return EXIT_OK


def cmd_config(a) -> int:
    if a.dump:
        sys.stdout.write("# campaign configuration (defaults)\n" + CampaignConfig().dump())
        sys.stdout.write("# generator spec (defaults)\n" + _yaml(GeneratorSpec().to_dict()))
    return EXIT_OK


def _yaml(d: dict) -> str:
    import yaml

    return yaml.safe_dump(d, sort_keys=False)


def build_parser() -> argparse.ArgumentParser:
    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p = argparse.ArgumentParser(prog="dcrlab", parents=[seed], description=__doc__)
    p.add_argument("--version", action="version", version=f"dcrlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", parents=[seed], help="generate a synthetic image")
    g.add_argument("--spec", default="xul-like", help="spec file or bundled spec name")
    g.add_argument("--out", required=True)
    g.add_argument("--blocks", type=int, help="override block_count")
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("randomize", parents=[seed], help="randomize an image")
    r.add_argument("--image", required=True)
    r.add_argument("--tier", choices=TIERS, default="tier1")
    r.add_argument("--bitmaps", help="profile to carry along")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_randomize)

    pr = sub.add_parser("profile", parents=[seed], help="code/data profile of an original image")
    pr.add_argument("--image", required=True)
    pr.add_argument("--mode", choices=("static", "dynamic", "merged"), default="static")
    pr.add_argument("--confidence", choices=CONFIDENCE, default="conservative")
    pr.add_argument("--workload", help="fixture name (smoke/test/train) or JSON file")
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_profile)

    c = sub.add_parser("campaign", parents=[seed], help="run seeded attack trials")
    c.add_argument("--image", required=True)
    c.add_argument("--config")
    c.add_argument("--trials", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_campaign)

    s = sub.add_parser("stats", parents=[seed], help="emit analysis CSVs")
    s.add_argument("--image", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--samples", type=int, default=20_000)
    s.set_defaults(fn=cmd_stats)

    cf = sub.add_parser("config", help="show configuration defaults")
    cf.add_argument("--dump", action="store_true")
    cf.set_defaults(fn=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not hasattr(a, "seed"):
        a.seed = None
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"dcrlab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"dcrlab: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
