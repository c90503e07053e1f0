"""Command line interface: ``fflogo {register,synth,evaluate,ablate,info}``.

Log verbosity comes from the ``FFLOGO_LOG_LEVEL`` environment variable
(default WARNING). Exit codes tell failure causes apart, see ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from fflogo import __version__
from fflogo.config import PipelineConfig, load_config
from fflogo.errors import CloudFormatError, ConfigError, RegistrationError
from fflogo.evaluation import BenchmarkReport, load_corpus, run_benchmark
from fflogo.features import EXTRACTORS
from fflogo.io import load_cloud, save_cloud
from fflogo.pipeline import ff_logo_register
from fflogo.pointcloud import apply_transform
from fflogo.synth import CorpusSpec, write_corpus

log = logging.getLogger("fflogo")

EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "io": 3,
    "parse": 4,
    "config": 5,
    "empty-corpus": 6,
    # pipeline stages
    "input": 10,
    "downsample": 11,
    "normals": 12,
    "features": 13,
    "matching": 14,
    "coarse": 15,
    "keyregion": 16,
    "local": 17,
    "fusion": 18,
}


def sample_cloud_path() -> Path:
    return Path(str(resources.files("fflogo") / "data" / "sample.ply"))


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "extractor", None):
        changes["features"] = replace(cfg.features, extractor=args.extractor)
    if getattr(args, "no_logo", False):
        changes["refinement"] = "none"
    if getattr(args, "go_only", False):
        changes["refinement"] = "go"
    return replace(cfg, **changes) if changes else cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_register(args) -> int:
    cfg = _config(args)
    source = load_cloud(args.source)
    target = load_cloud(args.target)
    result = ff_logo_register(source, target, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(apply_transform(source, result.T_f), out / "source_registered.ply")
    _write(out / "result.json", result.to_json(include_timing=args.timing))
    print(result.T_f.to_text())
    return 0


def cmd_synth(args) -> int:
    doc = {}
    if args.spec is not None:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("corpus spec must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.pairs is not None:
        doc["pairs"] = args.pairs
    spec = CorpusSpec.from_dict(doc)
    manifest = write_corpus(spec, args.out)
    print(f"wrote {spec.pairs} pairs and {manifest}")
    return 0


def _benchmark(args, arms) -> BenchmarkReport:
    records = load_corpus(args.corpus)
    if not records:
        raise _EmptyCorpus(f"corpus {args.corpus} lists no pairs")
    return run_benchmark(records, _config(args), repeats=args.repeats, arms=arms, workers=args.workers)


def _emit_report(report: BenchmarkReport, args) -> None:
    out = Path(args.out)
    _write(out, report.to_json(include_timing=args.timing))
    _write(out.with_suffix(".csv"), report.to_csv())
    print(report.table())


def cmd_evaluate(args) -> int:
    _emit_report(_benchmark(args, None), args)
    return 0


def cmd_ablate(args) -> int:
    _emit_report(_benchmark(args, ("ff", "go", "logo")), args)
    return 0


def cmd_info(args) -> int:
    print(f"fflogo {__version__}")
    print(f"extractors: {', '.join(EXTRACTORS)}")
    print(f"sample cloud: {sample_cloud_path()}")
    print("default config:")
    print(PipelineConfig().to_json())
    return 0


class _EmptyCorpus(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fflogo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def pipeline_flags(p):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--extractor", choices=EXTRACTORS, help="feature extractor")
        arm = p.add_mutually_exclusive_group()
        arm.add_argument("--no-logo", action="store_true", help="stop after the coarse transform")
        arm.add_argument("--go-only", action="store_true", help="refine with one global point-to-plane solve")
        p.add_argument("--timing", action="store_true", help="include wall-clock timings in the JSON output")

    p = sub.add_parser("register", help="register a source cloud onto a target cloud")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--out", default="registration", help="output directory")
    pipeline_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="generate a synthetic benchmark corpus")
    p.add_argument("spec", nargs="?", help="corpus spec JSON (defaults to the 50-pair corpus)")
    p.add_argument("--out", default="corpus", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--pairs", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func, help_text in (
        ("evaluate", cmd_evaluate, "run the benchmark on a corpus"),
        ("ablate", cmd_ablate, "compare coarse-only, global and key-region refinement"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("corpus", help="corpus directory containing a manifest")
        p.add_argument("--out", default=f"{name}_report.json", help="report path; a CSV is written next to it")
        p.add_argument("--repeats", type=int, default=10)
        p.add_argument("--workers", type=int, default=1, help="pairs processed in parallel")
        pipeline_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("info", help="show version, extractors and default config")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = logging.getLevelName(os.environ.get("FFLOGO_LOG_LEVEL", "WARNING").upper())
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RegistrationError as exc:
        log.error("%s", exc)
        return EXIT_CODES.get(exc.stage, 1)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CODES["config"]
    except CloudFormatError as exc:
        log.error("%s", exc)
        return EXIT_CODES["parse"]
    except _EmptyCorpus as exc:
        log.error("%s", exc)
        return EXIT_CODES["empty-corpus"]
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename or exc)
        return EXIT_CODES["io"]
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
