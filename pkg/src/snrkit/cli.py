"""Command line entry point: gen-data, train, eval, ablate, divergence.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit
from .data import DatasetManifest, DatasetSpec, generate_from_spec
from .harness.ablation import AblationMatrix, run_ablation, write_ablation_report
from .harness.evaluate import divergence, evaluate
from .harness.schedule import ConfigError, TrainConfig
from .harness.train import TrainingAborted, load_checkpoint, train_run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("snrkit")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def _csv_path(args, report_path) -> Path | None:
    return Path(report_path).with_suffix(".csv") if args.csv else None


def _manifest(path) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    try:
        return DatasetManifest.read(p)
    except (OSError, ValueError, TypeError) as e:
        raise ConfigError(f"cannot read manifest {p}: {e}") from e


def cmd_gen_data(args) -> int:
    try:
        spec = DatasetSpec.from_dict(_read_json(args.spec))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad dataset spec: {e}") from e
    man = generate_from_spec(spec, args.out)
    log.info("wrote %d samples to %s", len(man.samples), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = TrainConfig.from_dict(_read_json(args.config))
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e
    manifest = _manifest(cfg.dataset) if cfg.dataset else None
    target = cfg.target_domain
    eval_fn = None
    if target is not None and manifest is not None:
        eval_fn = lambda model, epoch: {  # noqa: E731
            k: v for k, v in evaluate(model, manifest, target).items() if k in ("mAP", "cmc")
        }
    _, record = train_run(cfg, manifest, args.out, eval_fn)
    log.info("trained %d epochs in %.1fs", len(record.epochs), record.wall_time)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    report = evaluate(model, _manifest(args.manifest), args.target_domain)
    report["scheme"] = meta["train"]["scheme"]
    evalkit.write_report(report, args.report, _csv_path(args, args.report))
    log.info("mAP %.4f rank-1 %.4f", report["mAP"], report["cmc"]["1"])
    return EXIT_OK


def cmd_divergence(args) -> int:
    try:
        a, b = (int(x) for x in args.domains.split(","))
    except ValueError as e:
        raise ConfigError("--domains expects two ids, e.g. 0,1") from e
    model, meta = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest) if args.manifest else _manifest(meta["train"]["dataset"])
    rep = divergence(model, manifest, a, b).to_dict()
    rep["divergence_per_stage"] = rep.pop("per_stage")
    rep["config_hash"] = model.config.digest()
    evalkit.write_report(rep, args.report, _csv_path(args, args.report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    matrix = AblationMatrix.from_dict(_read_json(args.matrix))
    report = run_ablation(matrix, args.out, log=log.info)
    write_ablation_report(report, args.out, csv=args.csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snrkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic styled-identity corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one scheme")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics of a checkpoint on one domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--target-domain", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="scheme x seed sweep")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("divergence", help="per-stage feature divergence between two domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domains", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--manifest", default=None, help="defaults to the dataset the checkpoint was trained on")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_divergence)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except TrainingAborted as e:
        log.error("numerical abort: %s (dump: %s)", e, e.dump_dir)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
