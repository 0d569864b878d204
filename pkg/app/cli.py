"""Command-line entry point: ``python -m app.cli <command> ...``.

Diagnostics go to standard error; reports are JSON on standard output or in
the ``--out`` file. Exit codes: 0 success, 1 usage, 2 data or format error,
3 internal assertion.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import tensorflow as tf
from pydantic import ValidationError

from app.config import HOST, CERTSIM_THREADS, PORT, configure_logging
from app.errors import CertSimError, SoundnessViolation, UsageError
from app.models.models import AttackConfig, Radius, TrainConfig

logger = logging.getLogger("app.cli")

CERTIFICATE_FIELDS = {"id", "margin", "gap", "radius", "correct", "valid"}


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(text: str) -> Path:
    path = Path(text)
    if not path.exists():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return path


def _radii(text: str) -> List[Radius]:
    try:
        radii = [Radius.parse(part) for part in text.split(",") if part.strip()]
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"invalid radius list {text!r}: {e}")
    if not radii or any(r.value < 0 for r in radii):
        raise argparse.ArgumentTypeError(f"radii must be non-negative, got {text!r}")
    return sorted(radii, key=lambda r: r.value)


def _budgets(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid budget list {text!r}: {e}")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"budgets must be non-negative, got {text!r}")
    return sorted(values)


def _emit(document
, out: Optional[Path]) -> None:
    text = json.dumps(document, sort_keys=True, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        logger.info("✅ Wrote %s", out)


def _emit_lines(rows: Sequence[dict], out: Optional[Path]) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        logger.info("✅ Wrote %d records to %s", len(rows), out)


def _emit_records(rows: Sequence[dict], summary: dict, out: Optional[Path]) -> None:
    """Records as JSON lines to ``out``; the summary to stdout, or to the log when stdout carries the records."""
    if out is not None:
        _emit_lines(rows, out)
        _emit(summary, None)
    else:
        _emit_lines(rows, None)
        logger.info("📊 %s", json.dumps(summary, sort_keys=True))


def _train_config(args) -> TrainConfig:
    from app.services.training import load_train_config

    return load_train_config(args.config) if args.config else TrainConfig()


def cmd_gen_data(args) -> int:
    from app.data.synthetic import generate_synthetic

    entries = generate_synthetic(args.n, args.size, args.seed, args.out)
    _emit({"count": len(entries), "manifest": str(Path(args.out) / "manifest.jsonl")}, None)
    return 0


def cmd_distill(args) -> int:
    from app.data.embeddings import build_teacher_store
    from app.data.manifest import load_dataset
    from app.network.checkpoint import save_model
    from app.network.extractor import build_extractor
    from app.services.training import distill, seed_everything, split_dataset

    config = _train_config(args)
    seed_everything(config.seed)
    dataset = load_dataset(args.data)
    store = build_teacher_store(dataset, args.teacher, config.architecture.embed_dim, config.seed)
    train_set, validation = split_dataset(dataset, config.validation_fraction, config.seed)
    student = build_extractor(config.architecture, seed=config.seed, project=False)
    _reset_log(args.log)
    distill(student, train_set, store, config, validation, args.log)
    save_model(student, args.out)
    return 0


def cmd_finetune(args) -> int:
    from app.data.manifest import load_dataset
    from app.network.checkpoint import load_model, save_model
    from app.services.training import finetune, seed_everything, split_dataset

    config = _train_config(args)
    seed_everything(config.seed)
    dataset = load_dataset(args.data)
    student = load_model(args.model)
    train_set, validation = split_dataset(dataset, config.validation_fraction, config.seed)
    _reset_log(args.log)
    finetune(student, train_set, config, validation, args.log)
    save_model(student, args.out)
    return 0


def cmd_train(args) -> int:
    from app.data.embeddings import build_teacher_store
    from app.data.manifest import load_dataset
    from app.network.checkpoint import save_model
    from app.services.training import train

    config = _train_config(args)
    dataset = load_dataset(args.data)
    store = build_teacher_store(dataset, args.teacher, config.architecture.embed_dim, config.seed)
    student, _ = train(config, dataset, store, args.log)
    save_model(student, args.out)
    return 0


def _reset_log(path: Optional[Path]) -> None:
    if path is not None:
        Path(path).write_text("", encoding="utf-8")


def cmd_certify(args) -> int:
    from app.data.manifest import load_dataset
    from app.network.checkpoint import load_model
    from app.services.evaluation import certified_scores, certify_dataset, excluded_invalid_fraction

    model = load_model(args.model)
    dataset = load_dataset(args.data)
    certificates = certify_dataset(model, dataset, args.threads)
    rows = [c.model_dump(include=CERTIFICATE_FIELDS) for c in certificates]
    summary = {
        "radii": [r.model_dump() for r in args.radii],
        "certified": certified_scores(certificates, args.radii),
        "excluded_invalid_fraction": excluded_invalid_fraction(certificates),
        "count": len(rows),
    }
    _emit_records(rows, summary, args.out)
    return 0


def _attack_config(**values) -> AttackConfig:
    try:
        return AttackConfig(**values)
    except ValidationError as e:
        raise UsageError(f"invalid attack settings: {e}") from e


def cmd_attack(args) -> int:
    from app.data.manifest import load_dataset
    from app.network.checkpoint import load_model
    from app.services.attacks import attack_embeddings, attack_triplets, to_records

    cfg = _attack_config(norm=args.norm, epsilon=args.eps, steps=args.steps, step_size=args.step_size,
                         objective=args.objective, restarts=args.restarts, seed=args.seed)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    records, correct = [], []
    for batch in dataset.batches(64):
        if cfg.objective == "triplet_ce":
            outcome = attack_triplets(model, batch.x, batch.x0, batch.x1, batch.y, cfg, batch.ids)
            correct.extend(outcome.correct_after.tolist())
        else:
            outcome = attack_embeddings(model, batch.x, cfg, batch.ids)
        records.extend(to_records(outcome, batch.ids, cfg))
    rows = [r.model_dump() for r in records]
    summary = {"epsilon": cfg.epsilon, "norm": cfg.norm, "objective": cfg.objective, "count": len(rows)}
    if correct:
        summary["empirical_score"] = float(np.mean(correct))
    else:
        summary["max_distance"] = max((r["final_distance"] for r in rows), default=0.0)
    _emit_records(rows, summary, args.out)
    return 0


def cmd_eval(args) -> int:
    from app.data.embeddings import SyntheticTeacher, TeacherMetric
    from app.data.manifest import load_dataset
    from app.network.checkpoint import load_model
    from app.services.evaluation import evaluate

    attack = _attack_config(steps=args.steps, restarts=args.restarts, seed=args.seed)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    teacher = None
    if args.teacher == "synthetic":
        teacher = TeacherMetric(SyntheticTeacher(model.image_shape, dim=model.embed_dim, seed=args.teacher_seed))
    report = evaluate(model, dataset, args.radii, attack, histogram_epsilon=args.histogram_eps, bins=args.bins,
                      falsify=not args.no_falsify, threads=args.threads, linf_grid=args.linf, teacher=teacher)
    _emit(report.model_dump(mode="json"), args.out)
    if report.falsification_violations:
        raise SoundnessViolation(
            f"{len(report.falsification_violations)} certified decisions flipped: "
            + ", ".join(report.falsification_violations)
        )
    return 0


def cmd_retrieve(args) -> int:
    from app.data.images import load_image
    from app.data.retrieval import RetrievalIndex, retrieve
    from app.network.checkpoint import load_model
    from app.services.evaluation import retrieval_attack

    model = load_model(args.model)
    index = RetrievalIndex.load(args.index)
    query = load_image(args.query, size=model.image_shape[-1])
    if args.attack_eps is None:
        hits = retrieve(index, model, query, args.topk)
        _emit({"hits": [{"id": key, "distance": value} for key, value in hits]}, None)
        return 0
    clean, attacked = retrieval_attack(model, index, query, args.attack_eps, args.topk, seed=args.seed)
    _emit({"clean": clean.model_dump(), "attacked": attacked.model_dump(), "epsilon": args.attack_eps}, None)
    return 0


def cmd_build_index(args) -> int:
    from app.data.manifest import load_dataset
    from app.data.retrieval import build_index
    from app.network.checkpoint import load_model

    model = load_model(args.model)
    dataset = load_dataset(args.data)
    build_index(model, dataset.ids, dataset.x).save(args.out)
    _emit({"count": len(dataset), "index": str(args.out)}, None)
    return 0


def cmd_selfcheck(args) -> int:
    from app.services.selfcheck import run_selfcheck

    results = run_selfcheck(args.seed)
    _emit({r.name: {"passed": r.passed, "detail": r.detail} for r in results}, None)
    return 0 if all(r.passed for r in results) else SoundnessViolation.exit_code


def cmd_serve(args) -> int:
    import uvicorn

    from app.main import app
    from app.services.metric_service import metric_service

    if args.model or args.index:
        metric_service.load(str(args.model or metric_service.model_path), str(args.index or ""))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="certsim", description="Certified 1-Lipschitz perceptual similarity metric")
    parser.add_argument("--threads", type=int, default=CERTSIM_THREADS,
                        help="worker threads for dataset-parallel evaluation (1 = deterministic)")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic 2AFC triplets")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_gen_data)

    for name, handler, help_text in (
        ("distill", cmd_distill, "step 1: distill teacher embeddings"),
        ("finetune", cmd_finetune, "step 2: hinge-loss fine-tuning"),
        ("train", cmd_train, "both training steps"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=_existing, default=None)
        p.add_argument("--data", type=_existing, required=True)
        if name == "finetune":
            p.add_argument("--model", type=_existing, required=True)
        else:
            p.add_argument("--teacher", default="synthetic", help="embedding store file or 'synthetic'")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--log", type=Path, default=None, help="per-epoch JSON-lines log")
        p.set_defaults(handler=handler)

    p = sub.add_parser("certify", help="certificates and certified scores")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--radii", type=_radii, default=_radii("36/255,72/255,108/255"))
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_certify)

    p = sub.add_parser("attack", help="PGD attack on the reference images")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--norm", choices=("l2", "linf"), default="l2")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--objective", choices=("triplet_ce", "embed_mse"), default="triplet_ce")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("eval", help="full evaluation report")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--radii", type=_radii, default=_radii("36/255,72/255,108/255"))
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--histogram-eps", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--no-falsify", action="store_true")
    p.add_argument("--linf", type=_budgets, default=_budgets("0.01,0.02,0.03"), help="l-infinity PGD budgets")
    p.add_argument("--teacher", choices=("synthetic",), default=None, help="add a teacher comparison row")
    p.add_argument("--teacher-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("retrieve", help="nearest neighbours of a query image")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--index", type=_existing, required=True)
    p.add_argument("--query", type=_existing, required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--attack-eps", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_retrieve)

    p = sub.add_parser("build-index", help="embed the reference images of a manifest")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_build_index)

    p = sub.add_parser("selfcheck", help="gradient, Lipschitz, projection and format checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_selfcheck)

    p = sub.add_parser("serve", help="start the HTTP metric service")
    p.add_argument("--host", default=HOST)
    p.add_argument("--port", type=int, default=PORT)
    p.add_argument("--model", type=_existing, default=None)
    p.add_argument("--index", type=_existing, default=None)
    p.set_defaults(handler=cmd_serve)
    return parser


def _configure_threads(threads: int) -> None:
    if threads < 1:
        raise UsageError(f"--threads must be at least 1, got {threads}")
    if threads == 1:
        try:
            tf.config.threading.set_intra_op_parallelism_threads(1)
            tf.config.threading.set_inter_op_parallelism_threads(1)
        except RuntimeError:
            # already initialized in this process
            pass


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        _configure_threads(args.threads)
        return args.handler(args)
    except CertSimError as e:
        logging.getLogger("app.cli").error("❌ %s", e)
        return e.exit_code
    except ValidationError as e:
        logging.getLogger("app.cli").error("❌ Invalid settings: %s", e)
        return UsageError.exit_code
    except AssertionError as e:
        logging.getLogger("app.cli").error("❌ Internal assertion failed: %s", e)
        return SoundnessViolation.exit_code


if __name__ == "__main__":
    sys.exit(main())
