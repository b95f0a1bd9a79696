"""Command-line front end.

One JSON document describes a run; every config field is also a flag, and
flags override the document. Subcommands pin the fields that define them
(``tps`` forces ``search=tps``, ``eval`` forces a 0-epoch no-search run)
so a snapshot written by one command replays identically under another
only when those pins agree. Exit status is 0 iff every stage completed
and all metrics are finite.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .harness import RunConfig, generate, run, spec_for

_FLAG_TYPES = {
    "str": str,
    "int": int,
    "float": float,
    "int | None": int,
    "float | None": float,
}

_FORCED = {
    "search-arch": {"search": "spikedhs"},
    "train": {"search": "none"},
    "dgs": {"search": "dgs"},
    "tps": {"search": "tps"},
    "hns": {"search": "hns"},
    "energy": {"search": "none", "epochs": 0},
    "eval": {"search": "none", "epochs": 0},
    "gen-data": {},
}

_HELP = {
    "search-arch": "bi-level architecture search, then decode/retrain/eval",
    "train": "train a fixed network (no search)",
    "dgs": "surrogate-temperature selection rounds at every site",
    "tps": "stepwise temporal-parameter search",
    "hns": "hybrid spiking/dense unit selection",
    "energy": "evaluate an untrained network and report its energy",
    "eval": "0-epoch evaluation-only run",
    "gen-data": "write the synthetic dataset for a config to disk",
}


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="JSON config document")
    parser.add_argument("--out", type=Path, help="output directory")
    for f in fields(RunConfig):
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=_FLAG_TYPES[str(f.type)],
            default=None,
            help=f"override {f.name} (default {f.default!r})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikesearch")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, text in _HELP.items():
        _add_config_flags(sub.add_parser(command, help=text))
    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        doc = json.loads(args.config.read_text())
        if not isinstance(doc, dict):
            raise ValueError("config document must be a JSON object")
    for f in fields(RunConfig):
        value = getattr(args, f.name)
        if value is not None:
            doc[f.name] = value
    doc.update(_FORCED[args.command])
    return RunConfig.from_dict(doc)


def _gen_data(config: RunConfig, out: Path | None) -> Path:
    out = Path("dataset") if out is None else out
    out.mkdir(parents=True, exist_ok=True)
    splits = generate(spec_for(config), config.seed)
    arrays = {}
    for name, part in zip(("train", "val", "test"), splits):
        arrays[f"{name}_movies"] = part.movies
        arrays[f"{name}_labels"] = part.labels
        if part.right is not None:
            arrays[f"{name}_right"] = part.right
    np.savez(out / "dataset.npz", **arrays)
    (out / "meta.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _merge_config(args)
        if args.command == "gen-data":
            out = _gen_data(config, args.out)
            print(f"wrote {out / 'dataset.npz'}")
            return 0
        out = run(config, out_dir=args.out)
        metrics = json.loads((out / "metrics.json").read_text())
        summary = {
            k: v for k, v in metrics.items() if isinstance(v, (int, float, str))
        }
        print(f"run dir: {out}")
        print(json.dumps(summary, sort_keys=True))
        return 0
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
